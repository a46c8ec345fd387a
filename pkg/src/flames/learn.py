"""Device-type models over daily feature rows.

All three model families (linear SVM, k-means, Gaussian mixtures) work on
z-scored features; the standardization constants ride along in the model so
evaluation and sampling see original units at the boundary. Every stochastic
step draws from a generator seeded by the caller, making training,
cross-validation and sampling reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

PRUNE_WEIGHT = 1e-6
GMM_TOL = 1e-7
GMM_MAX_ITER = 500
KMEANS_TOL = 1e-8
KMEANS_MAX_ITER = 300
GMM_FORMAT = "flames-gmm-v1"


class SingleClassInput(Exception):
    pass


class KExceedsN(Exception):
    pass


class ModelFeatureMismatch(Exception):
    pass


def standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(z, mean, std); zero-variance columns get std 1 so they map to 0."""
    x = np.asarray(x, dtype=float)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std == 0, 1.0, std)
    return (x - mean) / std, mean, std


# --- linear SVM ---------------------------------------------------------------

@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    mean: np.ndarray
    std: np.ndarray
    classes: tuple          # (negative, positive)
    objective: list[float]  # per-epoch hinge objective


def _hinge_objective(z: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, lam: float) -> float:
    margins = np.maximum(0.0, 1.0 - y * (z @ w + b))
    return float(0.5 * lam * (w @ w) + margins.mean())


def svm_train(
    features: np.ndarray,
    labels: Sequence,
    lam: float = 1e-4,
    epochs: int = 50,
    seed: int = 0,
) -> SvmModel:
    """Stochastic subgradient descent on the hinge loss (Pegasos schedule)."""
    x = np.asarray(features, dtype=float)
    classes = tuple(sorted(set(labels)))
    if len(classes) != 2:
        raise SingleClassInput(f"need two classes, got {classes}")
    y = np.where(np.asarray(labels) == classes[1], 1.0, -1.0)
    z, mean, std = standardize(x)
    rng = np.random.default_rng(seed)
    n, d = z.shape
    w = np.zeros(d)
    b = 0.0
    t = 0
    objective = []
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            if y[i] * (z[i] @ w + b) < 1.0:
                w = (1.0 - eta * lam) * w + eta * y[i] * z[i]
                b += eta * y[i]
            else:
                w = (1.0 - eta * lam) * w
        objective.append(_hinge_objective(z, y, w, b, lam))
    return SvmModel(w=w, b=b, mean=mean, std=std, classes=classes, objective=objective)


def svm_predict(model: SvmModel, features: np.ndarray) -> np.ndarray:
    z = (np.asarray(features, dtype=float) - model.mean) / model.std
    side = z @ model.w + model.b
    return np.where(side >= 0, model.classes[1], model.classes[0])


def svm_eval(model: SvmModel, features: np.ndarray, labels: Sequence) -> float:
    pred = svm_predict(model, features)
    return float((pred == np.asarray(labels)).mean())


def stratified_folds(labels: Sequence, k: int, seed: int = 0) -> list[np.ndarray]:
    """k index folds preserving class proportions; deterministic per seed."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    folds: list[list[int]] = [[] for _ in range(k)]
    for value in sorted(set(labels.tolist())):
        idx = np.where(labels == value)[0]
        rng.shuffle(idx)
        for pos, i in enumerate(idx):
            folds[pos % k].append(int(i))
    return [np.array(sorted(f)) for f in folds]


@dataclass
class CvResult:
    accuracies: list[float]
    mean: float


def svm_cross_validate(
    features: np.ndarray,
    labels: Sequence,
    folds: int = 5,
    lam: float = 1e-4,
    epochs: int = 50,
    seed: int = 0,
) -> CvResult:
    x = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    parts = stratified_folds(labels, folds, seed)
    accs = []
    for j, test_idx in enumerate(parts):
        train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
        model = svm_train(x[train_idx], labels[train_idx], lam=lam, epochs=epochs, seed=seed + j)
        accs.append(svm_eval(model, x[test_idx], labels[test_idx]))
    return CvResult(accuracies=accs, mean=float(np.mean(accs)))


def svm_cross_validate_split(
    features: np.ndarray,
    labels: Sequence,
    split: Sequence[bool],
    folds: int = 5,
    lam: float = 1e-4,
    epochs: int = 50,
    seed: int = 0,
) -> CvResult:
    """Separate cross-validations per split value (e.g. weekday/weekend),
    combined as a row-weighted mean accuracy."""
    split = np.asarray(split, dtype=bool)
    x = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    accs = []
    correct = 0.0
    for value in (False, True):
        idx = np.where(split == value)[0]
        if idx.size == 0:
            continue
        r = svm_cross_validate(x[idx], labels[idx], folds=folds, lam=lam, epochs=epochs, seed=seed)
        accs.extend(r.accuracies)
        correct += r.mean * idx.size
    return CvResult(accuracies=accs, mean=float(correct / len(labels)))


# --- k-means --------------------------------------------------------------------

def _kmeans_pp_centers(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centers = np.empty((k, z.shape[1]))
    centers[0] = z[rng.integers(n)]
    d2 = ((z - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = z[rng.integers(n)]
        else:
            centers[j] = z[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((z - centers[j]) ** 2).sum(axis=1))
    return centers


@dataclass
class KmeansResult:
    assignments: np.ndarray
    centroids: np.ndarray         # in original units
    inertia: list[float]          # per-Lloyd-iteration within-cluster SS
    mean: np.ndarray
    std: np.ndarray


def _kmeans_once(z: np.ndarray, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[float]]:
    centers = _kmeans_pp_centers(z, k, rng)
    inertia = []
    assign = np.zeros(z.shape[0], dtype=int)
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        inertia.append(float(d2[np.arange(z.shape[0]), assign].sum()))
        new_centers = centers.copy()
        for j in range(k):
            members = z[assign == j]
            if members.shape[0] == 0:
                far = int(d2.min(axis=1).argmax())
                new_centers[j] = z[far]
            else:
                new_centers[j] = members.mean(axis=0)
        movement = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if movement < KMEANS_TOL:
            break
    return assign, centers, inertia


def kmeans(features: np.ndarray, k: int, seed: int = 0, restarts: int = 8) -> KmeansResult:
    """k-means++ seeding then Lloyd iterations to centroid movement below
    tolerance or the iteration cap; keeps the best of `restarts` runs."""
    x = np.asarray(features, dtype=float)
    if k > x.shape[0]:
        raise KExceedsN(f"k={k} exceeds n={x.shape[0]}")
    z, mean, std = standardize(x)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(restarts, 1)):
        assign, centers, inertia = _kmeans_once(z, k, rng)
        if best is None or inertia[-1] < best[2][-1]:
            best = (assign, centers, inertia)
    assign, centers, inertia = best
    return KmeansResult(
        assignments=assign,
        centroids=centers * std + mean,
        inertia=inertia,
        mean=mean,
        std=std,
    )


def silhouette(features: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distance; NaN for a single
    cluster (undefined)."""
    x = np.asarray(features, dtype=float)
    assign = np.asarray(assignments)
    clusters = np.unique(assign)
    if clusters.size < 2:
        return float("nan")
    sq = (x * x).sum(axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0))
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        own = assign == assign[i]
        n_own = own.sum()
        if n_own <= 1:
            scores[i] = 0.0
            continue
        a = d[i][own].sum() / (n_own - 1)
        b = min(d[i][assign == c].mean() for c in clusters if c != assign[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def purity(assignments: np.ndarray, labels: Sequence) -> float:
    """Majority-label purity of a clustering."""
    assign = np.asarray(assignments)
    labels = np.asarray(labels)
    correct = 0
    for c in np.unique(assign):
        members = labels[assign == c]
        _, counts = np.unique(members, return_counts=True)
        correct += counts.max()
    return float(correct / len(labels))


# --- Gaussian mixtures ------------------------------------------------------------

@dataclass
class GmmModel:
    k: int
    weights: np.ndarray
    means: np.ndarray        # k x d, standardized space
    covariances: np.ndarray  # k x d x d, standardized space
    feature_names: list[str]
    mean: np.ndarray         # standardization constants
    std: np.ndarray
    ll_history: list[float] = field(default_factory=list)
    covariance_type: str = "full"


def _chol_with_jitter(cov: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        jitter = PRUNE_WEIGHT * np.eye(cov.shape[0])
        for _ in range(12):
            try:
                return linalg.cholesky(cov + jitter, lower=True)
            except linalg.LinAlgError:
                jitter *= 10.0
    raise linalg.LinAlgError("covariance not positive definite even with jitter")


def _log_gauss(z: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    low = _chol_with_jitter(cov)
    solved = linalg.solve_triangular(low, (z - mu).T, lower=True)
    logdet = 2.0 * np.log(np.diag(low)).sum()
    quad = (solved * solved).sum(axis=0)
    return -0.5 * (quad + logdet + z.shape[1] * math.log(2.0 * math.pi))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    peak = a.max(axis=axis, keepdims=True)
    return (peak + np.log(np.exp(a - peak).sum(axis=axis, keepdims=True))).squeeze(axis)


def gmm_fit(
    features: np.ndarray,
    k: int,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
    covariance_type: str = "full",
    restarts: int = 1,
) -> GmmModel:
    """EM from k-means++ initial responsibilities; log-likelihood history is
    recorded and is non-decreasing.

    covariance_type "diag" constrains each component to axis-aligned spread,
    which forces cross-feature dependence to be carried by the mixture
    structure instead of a single component's covariance.

    With restarts > 1 the fit runs from seeds seed..seed+restarts-1 and keeps
    the run with the best final log-likelihood; EM only finds local optima,
    and a single unlucky initialization can misplace every component."""
    if covariance_type not in ("full", "diag"):
        raise ValueError(f"unknown covariance_type {covariance_type!r}")
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    best = None
    for attempt in range(restarts):
        model = _gmm_fit_once(features, k, seed + attempt, feature_names,
                              covariance_type)
        if best is None or model.ll_history[-1] > best.ll_history[-1]:
            best = model
    return best


def _gmm_fit_once(
    features: np.ndarray,
    k: int,
    seed: int,
    feature_names: Sequence[str] | None,
    covariance_type: str,
) -> GmmModel:
    x = np.asarray(features, dtype=float)
    if k > x.shape[0]:
        raise KExceedsN(f"k={k} exceeds n={x.shape[0]}")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(x.shape[1])]
    z, mean, std = standardize(x)
    n, d = z.shape
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_centers(z, k, rng)
    d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((n, k))
    resp[np.arange(n), d2.argmin(axis=1)] = 1.0

    weights = np.full(k, 1.0 / k)
    means = centers.copy()
    covs = np.stack([np.eye(d)] * k)
    ll_history: list[float] = []
    for _ in range(GMM_MAX_ITER):
        # M step from current responsibilities
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / n
        means = (resp.T @ z) / nk[:, None]
        covs = np.empty((weights.size, d, d))
        for j in range(weights.size):
            delta = z - means[j]
            if covariance_type == "diag":
                var = (resp[:, j][:, None] * delta * delta).sum(axis=0) / nk[j]
                covs[j] = np.diag(np.maximum(var, 1e-9))
            else:
                covs[j] = (resp[:, j][:, None] * delta).T @ delta / nk[j]

        # prune dead components
        alive = weights >= PRUNE_WEIGHT
        if not alive.all():
            warnings.warn(f"pruned {int((~alive).sum())} degenerate GMM component(s)")
            weights = weights[alive] / weights[alive].sum()
            means = means[alive]
            covs = covs[alive]
            resp = resp[:, alive]
            ll_history.clear()  # likelihood is not comparable across k

        # E step
        logp = np.stack([
            np.log(weights[j]) + _log_gauss(z, means[j], covs[j])
            for j in range(weights.size)
        ], axis=1)
        log_norm = _logsumexp(logp, axis=1)
        ll = float(log_norm.sum())
        resp = np.exp(logp - log_norm[:, None])
        if ll_history and ll - ll_history[-1] < GMM_TOL:
            ll_history.append(ll)
            break
        ll_history.append(ll)
    return GmmModel(
        k=int(weights.size),
        weights=weights,
        means=means,
        covariances=covs,
        feature_names=names,
        mean=mean,
        std=std,
        ll_history=ll_history,
        covariance_type=covariance_type,
    )


def gmm_bic(model: GmmModel, n: int) -> float:
    d = model.means.shape[1]
    cov_params = d if model.covariance_type == "diag" else d * (d + 1) // 2
    params = (model.k - 1) + model.k * d + model.k * cov_params
    return -2.0 * model.ll_history[-1] + params * math.log(n)


def gmm_select_k(
    features: np.ndarray,
    k_range: Iterable[int] = range(1, 11),
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
    covariance_type: str = "full",
    restarts: int = 1,
) -> GmmModel:
    """Fit each k and keep the BIC minimizer."""
    x = np.asarray(features, dtype=float)
    best = None
    best_bic = math.inf
    for k in k_range:
        if k > x.shape[0]:
            break
        model = gmm_fit(x, k, seed=seed, feature_names=feature_names,
                        covariance_type=covariance_type, restarts=restarts)
        bic = gmm_bic(model, x.shape[0])
        if bic < best_bic:
            best, best_bic = model, bic
    if best is None:
        raise KExceedsN("no k in range fits the sample count")
    return best


def gmm_sample(model: GmmModel, n: int, seed: int = 0) -> np.ndarray:
    """Draw n rows: component by weight, then Cholesky-transformed normals,
    de-standardized to original units."""
    rng = np.random.default_rng(seed)
    if n == 0:
        return np.empty((0, model.means.shape[1]))
    counts = rng.multinomial(n, model.weights)
    blocks = []
    for j, nj in enumerate(counts):
        if nj == 0:
            continue
        low = _chol_with_jitter(model.covariances[j])
        normals = rng.standard_normal((nj, model.means.shape[1]))
        blocks.append(model.means[j] + normals @ low.T)
    z = np.vstack(blocks)
    return z * model.std + model.mean


@dataclass
class SynthesisReport:
    per_feature: dict[str, tuple[float, float]]  # name -> (D, p)
    average: float
    minimum: float
    maximum: float
    std: float


def validate_synthesis(real: np.ndarray, model: GmmModel, seed: int = 0) -> SynthesisReport:
    """Two-sample KS per feature between a fresh model sample (same n) and
    the real rows."""
    from flames.stats import ks_two_sample

    x = np.asarray(real, dtype=float)
    if x.shape[1] != model.means.shape[1]:
        raise ModelFeatureMismatch(
            f"model has {model.means.shape[1]} features, data has {x.shape[1]}")
    synth = gmm_sample(model, x.shape[0], seed=seed)
    per = {}
    stats = []
    for j, name in enumerate(model.feature_names):
        d, p = ks_two_sample(x[:, j], synth[:, j])
        per[name] = (d, p)
        stats.append(d)
    arr = np.asarray(stats)
    return SynthesisReport(
        per_feature=per,
        average=float(arr.mean()),
        minimum=float(arr.min()),
        maximum=float(arr.max()),
        std=float(arr.std()),
    )


# --- model persistence --------------------------------------------------------

def save_gmm(model: GmmModel, path: str | os.PathLike) -> None:
    doc = {
        "format": GMM_FORMAT,
        "k": model.k,
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "covariances": model.covariances.tolist(),
        "feature_names": model.feature_names,
        "standardization_mean": model.mean.tolist(),
        "standardization_std": model.std.tolist(),
        "ll_history": model.ll_history,
        "covariance_type": model.covariance_type,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_gmm(path: str | os.PathLike) -> GmmModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != GMM_FORMAT:
        raise ValueError(f"{path}: unsupported model format {doc.get('format')!r}")
    return GmmModel(
        k=doc["k"],
        weights=np.asarray(doc["weights"], dtype=float),
        means=np.asarray(doc["means"], dtype=float),
        covariances=np.asarray(doc["covariances"], dtype=float),
        feature_names=list(doc["feature_names"]),
        mean=np.asarray(doc["standardization_mean"], dtype=float),
        std=np.asarray(doc["standardization_std"], dtype=float),
        ll_history=[float(v) for v in doc["ll_history"]],
        covariance_type=doc.get("covariance_type", "full"),
    )

"""Moment estimates, MLE fits with KS model selection, rank tests, CFS.

Iterative families (gamma, weibull, logistic, beta) are solved by Newton
steps on the analytic score of the mean log-likelihood, tolerance 1e-9 on
the gradient norm, at most 200 iterations. Log-likelihoods are reported in
the units of the input sample (rescaled beta fits include the Jacobian of
the affine transform) so families can be compared directly.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, betaln, digamma, expit, gammainc, gammaln, ndtr, polygamma

FAMILIES = ("gaussian", "exponential", "gamma", "weibull", "logistic", "beta", "lognormal")

_EPS = 1e-9          # beta rescale margin
_GRAD_TOL = 1e-9
_MAX_ITER = 200


class SupportViolation(Exception):
    """Samples fall outside the family's support."""


class NonConvergence(Exception):
    """Newton failed to reach tolerance; .result holds the last iterate."""

    def __init__(self, message: str, result: "FitResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class FitResult:
    family: str
    params: dict[str, float]
    log_likelihood: float
    ks_stat: float
    ks_p: float
    n: int
    converged: bool = True
    iterations: int = 0


# --- moments and filtering -------------------------------------------------

@dataclass(frozen=True)
class Moments:
    n: int
    mean: float
    std: float            # bias-corrected (ddof=1)
    skewness: float       # g1; NaN when variance is 0
    ex_kurtosis: float    # g2 = m4/m2^2 - 3; NaN when variance is 0
    degenerate: bool = False


def moments(samples) -> Moments:
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("moments need at least 2 samples")
    mean = float(x.mean())
    d = x - mean
    m2 = float((d * d).mean())
    std = float(x.std(ddof=1))
    if m2 == 0.0:
        return Moments(n, mean, 0.0, float("nan"), float("nan"), degenerate=True)
    m3 = float((d ** 3).mean())
    m4 = float((d ** 4).mean())
    return Moments(n, mean, std, m3 / m2 ** 1.5, m4 / (m2 * m2) - 3.0)


def iqr_filter(samples) -> tuple[np.ndarray, int]:
    """Drop values outside [Q1 - 1.5 IQR, Q3 + 1.5 IQR]; quartiles by
    linear interpolation. Returns (retained, removed count)."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        return x, 0
    q1, q3 = np.percentile(x, [25.0, 75.0])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    keep = (x >= lo) & (x <= hi)
    return x[keep], int(x.size - keep.sum())


# --- Kolmogorov-Smirnov ----------------------------------------------------

def kolmogorov_sf(t: float) -> float:
    """P(K > t) for the Kolmogorov distribution, by the alternating series."""
    if t <= 0.0:
        return 1.0
    total = 0.0
    for k in range(1, 101):
        term = 2.0 * (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * t * t)
        total += term
        if abs(term) < 1e-12:
            break
    return min(1.0, max(0.0, total))


def _ks_p(d: float, n_eff: float) -> float:
    sn = math.sqrt(n_eff)
    return kolmogorov_sf(d * (sn + 0.12 + 0.11 / sn))


def ks_statistic(samples, cdf) -> tuple[float, float]:
    """One-sample KS: D = sup |F_n - F| against a vectorized CDF callable."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("empty sample")
    f = np.asarray(cdf(x), dtype=float)
    grid = np.arange(1, n + 1) / n
    d = float(max((grid - f).max(), (f - (grid - 1.0 / n)).max()))
    d = min(1.0, max(0.0, d))
    return d, _ks_p(d, n)


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample KS via the merged empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("empty sample")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / n
    fb = np.searchsorted(b, pooled, side="right") / m
    d = float(np.abs(fa - fb).max())
    return d, _ks_p(d, n * m / (n + m))


# --- rank tests ------------------------------------------------------------

def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_term(values: np.ndarray) -> float:
    """Sum of t^3 - t over tie groups."""
    _, counts = np.unique(values, return_counts=True)
    t = counts.astype(float)
    return float((t ** 3 - t).sum())


def mann_whitney_u(a, b) -> tuple[float, float]:
    """U = min(U1, U2); two-sided p by normal approximation with tie
    correction and continuity correction."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("empty sample")
    pooled = np.concatenate([a, b])
    r1 = _ranks(pooled)[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0
    u = min(u1, n1 * n2 - u1)
    n = n1 + n2
    var = n1 * n2 / 12.0 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = (u - n1 * n2 / 2.0 + 0.5) / math.sqrt(var)
    return u, min(1.0, 2.0 * float(ndtr(z)))


def wilcoxon_signed_rank(a, b=None) -> tuple[float, float]:
    """W = min(W+, W-) over nonzero paired differences; two-sided normal
    approximation with tie correction."""
    d = np.asarray(a, dtype=float)
    if b is not None:
        d = d - np.asarray(b, dtype=float)
    d = d[d != 0]
    m = d.size
    if m == 0:
        return 0.0, 1.0
    ranks = _ranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    w = min(w_plus, m * (m + 1) / 2.0 - w_plus)
    var = m * (m + 1) * (2 * m + 1) / 24.0 - _tie_term(np.abs(d)) / 48.0
    if var <= 0:
        return w, 1.0
    z = (w - m * (m + 1) / 4.0 + 0.5) / math.sqrt(var)
    return w, min(1.0, 2.0 * float(ndtr(z)))


# --- family internals ------------------------------------------------------
# Closed-form families return (params, True, 0); Newton families iterate on
# the mean log-likelihood score.

def _fit_gaussian(x):
    sigma = float(x.std())
    if sigma <= 0:
        raise SupportViolation("gaussian fit needs non-constant samples")
    return {"mu": float(x.mean()), "sigma": sigma}, True, 0


def _fit_exponential(x):
    mean = float(x.mean())
    if mean <= 0:
        raise SupportViolation("exponential fit needs a positive mean")
    return {"rate": 1.0 / mean}, True, 0


def _fit_lognormal(x):
    lx = np.log(x)
    sigma = float(lx.std())
    if sigma <= 0:
        raise SupportViolation("lognormal fit needs non-constant samples")
    return {"mu": float(lx.mean()), "sigma": sigma}, True, 0


def _fit_gamma(x):
    mean = float(x.mean())
    s = math.log(mean) - float(np.log(x).mean())
    if s <= 0:
        raise SupportViolation("gamma fit needs non-constant positive samples")
    k = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    converged = False
    iters = 0
    for iters in range(1, _MAX_ITER + 1):
        f = math.log(k) - float(digamma(k)) - s
        if abs(f) <= _GRAD_TOL:
            converged = True
            break
        step = f / (1.0 / k - float(polygamma(1, k)))
        while k - step <= 0:
            step *= 0.5
        k -= step
    return {"shape": k, "scale": mean / k}, converged, iters


def _weibull_scale(lx: np.ndarray, k: float) -> float:
    shift = lx.max()
    return math.exp(shift + math.log(float(np.exp(k * (lx - shift)).mean())) / k)


def _fit_weibull(x):
    lx = np.log(x)
    spread = float(lx.std())
    if spread <= 0:
        raise SupportViolation("weibull fit needs non-constant positive samples")
    mlx = float(lx.mean())
    shift = lx.max()
    a = lx - shift
    k = min(max(1.2 / spread, 1e-3), 1e3)
    converged = False
    iters = 0
    for iters in range(1, _MAX_ITER + 1):
        w = np.exp(k * a)
        sw = float(w.sum())
        swl = float((w * lx).sum())
        g = swl / sw - 1.0 / k - mlx
        if abs(g) <= _GRAD_TOL:
            converged = True
            break
        swll = float((w * lx * lx).sum())
        gp = (swll * sw - swl * swl) / (sw * sw) + 1.0 / (k * k)
        step = g / gp
        while k - step <= 0:
            step *= 0.5
        k -= step
    return {"shape": k, "scale": _weibull_scale(lx, k)}, converged, iters


def _logistic_score(x, mu, s):
    z = (x - mu) / s
    p = expit(z)
    gmu = float((2.0 * p - 1.0).mean()) / s
    gs = float((z * (2.0 * p - 1.0) - 1.0).mean()) / s
    return np.array([gmu, gs]), z, p


def _fit_logistic(x):
    mu = float(x.mean())
    s = max(float(x.std()) * math.sqrt(3.0) / math.pi, 1e-12)
    if float(x.std()) <= 0:
        raise SupportViolation("logistic fit needs non-constant samples")
    converged = False
    iters = 0
    for iters in range(1, _MAX_ITER + 1):
        g, z, p = _logistic_score(x, mu, s)
        if float(np.hypot(*g)) <= _GRAD_TOL:
            converged = True
            break
        pq = p * (1.0 - p)
        hmm = -2.0 * float(pq.mean()) / (s * s)
        hms = float((-2.0 * z * pq - (2.0 * p - 1.0)).mean()) / (s * s)
        hss = float((1.0 - 2.0 * z * (2.0 * p - 1.0) - 2.0 * z * z * pq).mean()) / (s * s)
        try:
            dmu, ds = np.linalg.solve([[hmm, hms], [hms, hss]], -g)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        while s + lam * ds <= 0:
            lam *= 0.5
        base = _loglik_logistic(x, {"mu": mu, "scale": s})
        for _ in range(30):
            if _loglik_logistic(x, {"mu": mu + lam * dmu, "scale": s + lam * ds}) >= base:
                break
            lam *= 0.5
        mu += lam * dmu
        s += lam * ds
    return {"mu": mu, "scale": s}, converged, iters


def _beta_transform(x) -> tuple[np.ndarray, float, float]:
    """Affine map onto (eps, 1-eps) when samples leave the open unit
    interval; identity (loc 0, scale 1) when they already fit."""
    lo, hi = float(x.min()), float(x.max())
    if 0.0 < lo and hi < 1.0:
        return x, 0.0, 1.0
    if hi <= lo:
        raise SupportViolation("beta fit needs non-constant samples")
    scale = (hi - lo) / (1.0 - 2.0 * _EPS)
    loc = lo - _EPS * scale
    return (x - loc) / scale, loc, scale


def _beta_score(mean_lx, mean_l1x, a, b):
    c = float(digamma(a + b))
    return np.array([c - float(digamma(a)) + mean_lx, c - float(digamma(b)) + mean_l1x])


def _fit_beta(x):
    y, loc, scale = _beta_transform(x)
    lx = np.log(y)
    l1x = np.log1p(-y)
    mean_lx, mean_l1x = float(lx.mean()), float(l1x.mean())
    m, v = float(y.mean()), float(y.var())
    if v <= 0:
        raise SupportViolation("beta fit needs non-constant samples")
    c = m * (1.0 - m) / v - 1.0
    a = max(m * c, 1e-3) if c > 0 else 1.0
    b = max((1.0 - m) * c, 1e-3) if c > 0 else 1.0
    sum_core = lambda aa, bb: (aa - 1.0) * mean_lx + (bb - 1.0) * mean_l1x - float(betaln(aa, bb))
    converged = False
    iters = 0
    for iters in range(1, _MAX_ITER + 1):
        g = _beta_score(mean_lx, mean_l1x, a, b)
        if float(np.hypot(*g)) <= _GRAD_TOL:
            converged = True
            break
        tab = float(polygamma(1, a + b))
        h = np.array([[tab - float(polygamma(1, a)), tab],
                      [tab, tab - float(polygamma(1, b))]])
        try:
            da, db = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        while a + lam * da <= 0 or b + lam * db <= 0:
            lam *= 0.5
        base = sum_core(a, b)
        for _ in range(30):
            if sum_core(a + lam * da, b + lam * db) >= base:
                break
            lam *= 0.5
        a += lam * da
        b += lam * db
    return {"alpha": a, "beta": b, "loc": loc, "scale": scale}, converged, iters


# --- log-likelihood / cdf / gradient dispatch -------------------------------

def _loglik_gaussian(x, p):
    z = (x - p["mu"]) / p["sigma"]
    return float(-0.5 * (z * z).sum() - x.size * (math.log(p["sigma"]) + 0.5 * math.log(2 * math.pi)))


def _loglik_exponential(x, p):
    lam = p["rate"]
    return float(x.size * math.log(lam) - lam * x.sum())


def _loglik_gamma(x, p):
    k, th = p["shape"], p["scale"]
    return float((k - 1.0) * np.log(x).sum() - x.sum() / th
                 - x.size * (k * math.log(th) + float(gammaln(k))))


def _loglik_weibull(x, p):
    k, lam = p["shape"], p["scale"]
    z = x / lam
    return float(x.size * (math.log(k) - k * math.log(lam))
                 + (k - 1.0) * np.log(x).sum() - (z ** k).sum())


def _loglik_logistic(x, p):
    z = (x - p["mu"]) / p["scale"]
    return float((-z - np.logaddexp(0.0, -z) * 2.0).sum() - x.size * math.log(p["scale"]))


def _loglik_beta(x, p):
    y = (x - p["loc"]) / p["scale"]
    if y.min() <= 0 or y.max() >= 1:
        return float("-inf")
    core = (p["alpha"] - 1.0) * np.log(y).sum() + (p["beta"] - 1.0) * np.log1p(-y).sum() \
        - x.size * float(betaln(p["alpha"], p["beta"]))
    return float(core - x.size * math.log(p["scale"]))


def _loglik_lognormal(x, p):
    lx = np.log(x)
    z = (lx - p["mu"]) / p["sigma"]
    return float(-0.5 * (z * z).sum() - lx.sum()
                 - x.size * (math.log(p["sigma"]) + 0.5 * math.log(2 * math.pi)))


def _cdf_gaussian(x, p):
    return ndtr((x - p["mu"]) / p["sigma"])


def _cdf_exponential(x, p):
    return np.where(x < 0, 0.0, -np.expm1(-p["rate"] * np.maximum(x, 0.0)))


def _cdf_gamma(x, p):
    return np.where(x <= 0, 0.0, gammainc(p["shape"], np.maximum(x, 0.0) / p["scale"]))


def _cdf_weibull(x, p):
    z = np.maximum(x, 0.0) / p["scale"]
    return np.where(x <= 0, 0.0, -np.expm1(-z ** p["shape"]))


def _cdf_logistic(x, p):
    return expit((x - p["mu"]) / p["scale"])


def _cdf_beta(x, p):
    y = np.clip((x - p["loc"]) / p["scale"], 0.0, 1.0)
    return betainc(p["alpha"], p["beta"], y)


def _cdf_lognormal(x, p):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = ndtr((np.log(x[pos]) - p["mu"]) / p["sigma"])
    return out


_FIT = {
    "gaussian": _fit_gaussian,
    "exponential": _fit_exponential,
    "gamma": _fit_gamma,
    "weibull": _fit_weibull,
    "logistic": _fit_logistic,
    "beta": _fit_beta,
    "lognormal": _fit_lognormal,
}

_LOGLIK = {
    "gaussian": _loglik_gaussian,
    "exponential": _loglik_exponential,
    "gamma": _loglik_gamma,
    "weibull": _loglik_weibull,
    "logistic": _loglik_logistic,
    "beta": _loglik_beta,
    "lognormal": _loglik_lognormal,
}

_CDF = {
    "gaussian": _cdf_gaussian,
    "exponential": _cdf_exponential,
    "gamma": _cdf_gamma,
    "weibull": _cdf_weibull,
    "logistic": _cdf_logistic,
    "beta": _cdf_beta,
    "lognormal": _cdf_lognormal,
}

# strictly positive support; exponential additionally allows zeros
_POSITIVE = {"gamma", "weibull", "lognormal"}


def _check_support(x: np.ndarray, family: str):
    if family in _POSITIVE and x.min() <= 0:
        raise SupportViolation(f"{family} requires positive samples")
    if family == "exponential" and x.min() < 0:
        raise SupportViolation("exponential requires non-negative samples")


def log_likelihood(samples, family: str, params: dict[str, float]) -> float:
    x = np.asarray(samples, dtype=float)
    return _LOGLIK[family](x, params)


def cdf(x, family: str, params: dict[str, float]) -> np.ndarray:
    return _CDF[family](np.asarray(x, dtype=float), params)


def gradient(samples, family: str, params: dict[str, float]) -> np.ndarray:
    """Analytic gradient of the mean log-likelihood, for the Newton families."""
    x = np.asarray(samples, dtype=float)
    if family == "gamma":
        k, th = params["shape"], params["scale"]
        return np.array([
            float(np.log(x).mean()) - math.log(th) - float(digamma(k)),
            float(x.mean()) / (th * th) - k / th,
        ])
    if family == "weibull":
        k, lam = params["shape"], params["scale"]
        z = x / lam
        zk = z ** k
        return np.array([
            1.0 / k + float(np.log(x).mean()) - math.log(lam) - float((zk * np.log(z)).mean()),
            (k / lam) * (float(zk.mean()) - 1.0),
        ])
    if family == "logistic":
        g, _, _ = _logistic_score(x, params["mu"], params["scale"])
        return g
    if family == "beta":
        y = (x - params["loc"]) / params["scale"]
        return _beta_score(float(np.log(y).mean()), float(np.log1p(-y).mean()),
                           params["alpha"], params["beta"])
    raise ValueError(f"no iterative gradient for family {family!r}")


def fit_mle(samples, family: str) -> FitResult:
    """Fit one family by maximum likelihood; KS of the fit is attached."""
    if family not in _FIT:
        raise ValueError(f"unknown family {family!r}")
    x = np.asarray(samples, dtype=float)
    if x.size < 10:
        raise ValueError("fit_mle needs at least 10 samples")
    if not np.isfinite(x).all():
        raise SupportViolation("samples must be finite")
    _check_support(x, family)
    params, converged, iters = _FIT[family](x)
    ll = _LOGLIK[family](x, params)
    d, p = ks_statistic(x, lambda v: _CDF[family](v, params))
    result = FitResult(family, params, ll, d, p, x.size, converged, iters)
    if not converged:
        raise NonConvergence(f"{family} fit did not converge in {_MAX_ITER} iterations", result)
    return result


def select_best_fit(samples, families=FAMILIES) -> list[FitResult]:
    """Fit every applicable family; rank by KS statistic, log-likelihood as
    tie-break. Families whose support excludes the sample are skipped."""
    results = []
    for family in families:
        try:
            results.append(fit_mle(samples, family))
        except SupportViolation:
            continue
        except NonConvergence as err:
            results.append(err.result)
    if not results:
        raise SupportViolation("no family admits this sample")
    results.sort(key=lambda r: (r.ks_stat, -r.log_likelihood))
    return results


# --- correlation and feature selection --------------------------------------

def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx = x - x.mean()
    dy = y - y.mean()
    nx = math.sqrt(float((dx * dx).sum()))
    ny = math.sqrt(float((dy * dy).sum()))
    if nx == 0 or ny == 0:
        return float("nan")
    return max(-1.0, min(1.0, float((dx * dy).sum()) / (nx * ny)))


def pearson_matrix(table: np.ndarray) -> np.ndarray:
    """Pairwise Pearson r over columns; zero-variance columns yield NaN
    rows/columns (unit diagonal preserved)."""
    x = np.asarray(table, dtype=float)
    centered = x - x.mean(axis=0)
    norms = np.sqrt((centered * centered).sum(axis=0))
    out = np.empty((x.shape[1], x.shape[1]))
    out.fill(np.nan)
    np.fill_diagonal(out, 1.0)
    good = norms > 0
    if good.any():
        unit = centered[:, good] / norms[good]
        sub = np.clip(unit.T @ unit, -1.0, 1.0)
        idx = np.where(good)[0]
        out[np.ix_(idx, idx)] = sub
        np.fill_diagonal(out, 1.0)
    return out


def zero_variance_columns(table: np.ndarray) -> list[int]:
    x = np.asarray(table, dtype=float)
    return [int(i) for i in np.where(x.std(axis=0) == 0)[0]]


@dataclass
class CfsResult:
    selected: list[str]
    merit: float
    dropped: list[str] = field(default_factory=list)


def cfs_select(table, labels, feature_names=None) -> CfsResult:
    """Best-first subset search on the CFS merit
    k·mean|r_cf| / sqrt(k + k(k-1)·mean|r_ff|), stall limit 5.

    Zero-variance features are dropped up front. Labels are encoded 0/1.
    """
    x = np.asarray(table, dtype=float)
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(x.shape[1])]
    if len(names) != x.shape[1]:
        raise ValueError("feature_names length mismatch")
    classes = sorted(set(labels))
    if len(classes) != 2:
        raise ValueError("cfs_select needs exactly two classes")
    y = np.array([classes.index(v) for v in labels], dtype=float)

    dead = set(zero_variance_columns(x))
    keep = [i for i in range(x.shape[1]) if i not in dead]
    dropped = [names[i] for i in sorted(dead)]
    if not keep:
        return CfsResult([], 0.0, dropped)
    xs = x[:, keep]
    r_cf = np.array([abs(pearson_r(xs[:, j], y)) for j in range(xs.shape[1])])
    r_ff = np.abs(pearson_matrix(xs))

    def merit(subset: tuple[int, ...]) -> float:
        k = len(subset)
        rcf = float(r_cf[list(subset)].mean())
        if k == 1:
            return rcf
        idx = np.array(subset)
        block = r_ff[np.ix_(idx, idx)]
        rff = float((block.sum() - k) / (k * (k - 1)))
        return k * rcf / math.sqrt(k + k * (k - 1) * rff)

    visited: set[frozenset] = set()
    heap: list[tuple[float, tuple[int, ...]]] = []

    def push(subset: tuple[int, ...]):
        fs = frozenset(subset)
        if fs in visited:
            return
        visited.add(fs)
        heapq.heappush(heap, (-merit(subset), subset))

    for j in range(xs.shape[1]):
        push((j,))
    best_subset: tuple[int, ...] = ()
    best_merit = 0.0
    stall = 0
    while heap and stall < 5:
        neg, subset = heapq.heappop(heap)
        if -neg > best_merit + 1e-12:
            best_merit, best_subset = -neg, subset
            stall = 0
        else:
            stall += 1
        for j in range(xs.shape[1]):
            if j not in subset:
                push(tuple(sorted(subset + (j,))))
    selected = [names[keep[j]] for j in best_subset]
    return CfsResult(selected, best_merit, dropped)

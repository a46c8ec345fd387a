"""File-based orchestration: each analysis stage reads and writes artifacts.

A run lives in one output directory. `testgen` plants a synthetic world under
`raw/`; `ingest` parses and canonicalizes the raw logs; the remaining stages
each consume the previous stage's files and add their own. Every stage writes
a manifest recording its input and output hashes, parameters and seed, so a
finished run documents exactly how it was produced. Wall-clock timestamps go
to a sibling `.times.json` file, which keeps the manifests themselves (and
every data artifact) byte-identical across re-runs with the same inputs.

Numbers are serialized with `repr`, giving the shortest text that round-trips
the exact float, so artifact bytes are stable across platforms that share
IEEE-754 doubles.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from flames import __version__
from flames.classify import (
    admob_heuristic,
    classification_report,
    classify_by_oui,
    device_types,
    label_sources,
)
from flames.fuse import (
    LeaseCounters,
    LeaseIndex,
    MatchCounters,
    derive_all_leases,
    match_flows,
    read_core,
    read_leases,
    write_core,
    write_leases,
)
from flames.ingest import (
    FORMAT_VERSION,
    IngestError,
    ParseCounters,
    format_ap_event_line,
    format_netflow_line,
    load_building_registry,
    load_dns_map,
    load_oui_labels,
    open_text,
    read_ap_events,
    read_netflow,
    write_building_registry,
    write_dns_map,
    write_oui_labels,
)
from flames.learn import (
    gmm_sample,
    gmm_select_k,
    gmm_bic,
    gmm_fit,
    kmeans,
    load_gmm,
    purity,
    save_gmm,
    silhouette,
    svm_cross_validate,
    svm_train,
    validate_synthesis,
)
from flames.mobility import (
    InsufficientRanks,
    daily_mobility_rows,
    sessions_from_leases,
    zipf_rank_fit,
)
from flames.model import (
    DeviceType,
    MobilityFeatures,
    TrafficFeatures,
)
from flames.stats import cfs_select, ks_two_sample, pearson_matrix, select_best_fit
from flames.synth import (
    PopulationSpec,
    generate_world,
    synthesize_features,
    write_world,
)
from flames.traffic import daily_traffic_rows

STAGES = (
    "testgen", "ingest", "fuse", "classify", "mobility", "traffic",
    "features", "correlate", "fit", "model", "synth",
)

# estimation-procedure constants shared by the model stage and its consumers;
# they are part of the method, not of a run's identity, so the run seed does
# not perturb them
SVM_SEED = 7
KMEANS_SEED = 7
KMEANS_RESTARTS = 8
GMM_SEED = 0
GMM_SAMPLE_SEED = 11
GMM_SELF_SAMPLE_SEED = 21
GMM_SELF_EVAL_SEED = 31

MOBILITY_COLS = list(MobilityFeatures.FIELDS)
TRAFFIC_COLS = list(TrafficFeatures.FIELDS)
FEATURE_COLS = MOBILITY_COLS + TRAFFIC_COLS


class PipelineError(Exception):
    """A stage cannot proceed because its input data is missing or unusable."""


@dataclass
class Settings:
    """Run-wide knobs; None means the producing module's default."""

    seed: int | None = None
    threads: int = 1
    flutes: int | None = None
    cellos: int | None = None
    days: int | None = None
    buildings: int | None = None
    servers: int | None = None
    folds: int = 5
    clusters: int = 2
    kmax: int = 8
    restarts: int = 8
    synth_n: int = 1000
    fit_cap: int = 50_000

    def spec(self) -> PopulationSpec:
        kw = {}
        for name in ("seed", "flutes", "cellos", "days", "buildings", "servers"):
            value = getattr(self, name)
            if value is not None:
                kw[name] = value
        return PopulationSpec(**kw)

    def effective_seed(self) -> int:
        return self.seed if self.seed is not None else PopulationSpec.seed


# --- artifact layout ---------------------------------------------------------

def artifact_paths(out: str | os.PathLike) -> dict[str, Path]:
    """Every artifact a full run produces, keyed by a stable name."""
    out = Path(out)
    raw = out / "raw"
    return {
        "raw_dir": raw,
        "raw_ap_log": raw / "ap_log.csv",
        "raw_netflow": raw / "netflow.csv",
        "raw_buildings": raw / "buildings.csv",
        "raw_oui": raw / "oui.csv",
        "raw_dnsmap": raw / "dnsmap.csv",
        "truth": raw / "truth.json",
        "ap_events": out / "ap_events.csv",
        "netflow": out / "netflow.csv",
        "buildings": out / "buildings.csv",
        "oui": out / "oui.csv",
        "dnsmap": out / "dnsmap.csv",
        "leases": out / "leases.csv",
        "core": out / "core.csv",
        "device_types": out / "device_types.csv",
        "mobility": out / "mobility.csv",
        "traffic": out / "traffic.csv",
        "features": out / "features.csv",
        "corr_mobility": out / "correlate" / "mobility_corr.csv",
        "corr_traffic": out / "correlate" / "traffic_corr.csv",
        "corr_combined": out / "correlate" / "combined_corr.csv",
        "cfs": out / "correlate" / "cfs.json",
        "fits": out / "fit" / "fits.csv",
        "zipf": out / "fit" / "zipf.csv",
        "svm_cv": out / "models" / "svm_cv.csv",
        "svm_model": out / "models" / "svm.json",
        "kmeans_eval": out / "models" / "kmeans.csv",
        "gmm_flute": out / "models" / "gmm_flute.json",
        "gmm_cello": out / "models" / "gmm_cello.json",
        "gmm_traffic_flute": out / "models" / "gmm_traffic_flute.json",
        "gmm_traffic_cello": out / "models" / "gmm_traffic_cello.json",
        "gmm_report": out / "models" / "gmm_report.json",
        "synthetic": out / "synth" / "synthetic_features.csv",
        "report_ingest": out / "reports" / "ingest.json",
        "report_fuse": out / "reports" / "fuse.json",
        "report_classify": out / "reports" / "classify.json",
        "manifest_dir": out / "manifests",
    }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _rel(p: Path, out: Path) -> str:
    try:
        return str(p.relative_to(out))
    except ValueError:
        return str(p)


def _write_manifest(
    out: Path,
    stage: str,
    seed: int | None,
    params: dict,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    started: str,
) -> Path:
    mdir = artifact_paths(out)["manifest_dir"]
    doc = {
        "stage": stage,
        "version": {"package": __version__, "format": FORMAT_VERSION},
        "seed": seed,
        "params": params,
        "inputs": {_rel(p, out): _sha256(p) for p in sorted(inputs)},
        "outputs": {_rel(p, out): _sha256(p) for p in sorted(outputs)},
    }
    path = mdir / f"{stage}.json"
    _write_json(path, doc)
    _write_json(mdir / f"{stage}.times.json",
                {"stage": stage, "started": started, "finished": _now()})
    return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _num(value) -> str:
    """Shortest exact text for a number; ints stay ints."""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_table(path: Path, kind: str, columns: Sequence[str],
                rows: Iterable[Sequence]) -> int:
    """Versioned CSV: `flames-v1 <kind>` line, column line, data rows."""
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_VERSION} {kind}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _num(v) for v in row) + "\n")
            n += 1
    return n


def read_table(path: Path, kind: str) -> tuple[list[str], list[list[str]]]:
    with open_text(path) as fh:
        header = fh.readline().strip()
        if header != f"{FORMAT_VERSION} {kind}":
            raise PipelineError(f"{path}: expected a {kind} table, got {header!r}")
        columns = fh.readline().strip().split(",")
        rows = [line.rstrip("\r\n").split(",") for line in fh if line.strip()]
    return columns, rows


def _require(paths: Iterable[Path]) -> None:
    for p in paths:
        if not p.is_file():
            raise PipelineError(f"{p}: missing input artifact")


# --- stages ------------------------------------------------------------------

def run_testgen(out: str | os.PathLike, settings: Settings) -> dict[str, Path]:
    """Plant a synthetic world under raw/ and record its ground truth."""
    out = Path(out)
    started = _now()
    spec = settings.spec()
    world = generate_world(spec, threads=settings.threads)
    paths = write_world(world, artifact_paths(out)["raw_dir"])
    outputs = [Path(p) for p in paths.values()]
    _write_manifest(out, "testgen", spec.seed, {
        "flutes": spec.flutes, "cellos": spec.cellos, "days": spec.days,
        "buildings": spec.buildings, "servers": spec.servers,
        "threads": settings.threads,
    }, [], outputs, started)
    return {k: Path(v) for k, v in paths.items()}


def run_ingest(out: str | os.PathLike, settings: Settings,
               raw: str | os.PathLike | None = None) -> dict:
    """Parse the raw logs and re-emit them in canonical form.

    Malformed lines are dropped and counted; a log in which nothing parses is
    a data error, not an empty result.
    """
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    raw_dir = Path(raw) if raw is not None else ap["raw_dir"]
    src = {
        "ap_log": raw_dir / "ap_log.csv",
        "netflow": raw_dir / "netflow.csv",
        "buildings": raw_dir / "buildings.csv",
        "oui": raw_dir / "oui.csv",
        "dnsmap": raw_dir / "dnsmap.csv",
    }
    _require(src.values())

    report: dict[str, dict] = {}
    ev_counters = ParseCounters()
    with open_text(src["ap_log"]) as fh, open(ap["ap_events"], "w", encoding="utf-8") as out_fh:
        for event in read_ap_events(fh, counters=ev_counters):
            out_fh.write(format_ap_event_line(event) + "\n")
    fl_counters = ParseCounters()
    with open_text(src["netflow"]) as fh, open(ap["netflow"], "w", encoding="utf-8") as out_fh:
        for flow in read_netflow(fh, counters=fl_counters):
            out_fh.write(format_netflow_line(flow) + "\n")
    for name, counters in (("ap_log", ev_counters), ("netflow", fl_counters)):
        if counters.total and not counters.records:
            raise IngestError(f"{src[name]}: no parsable records")
        report[name] = {
            "total": counters.total, "records": counters.records,
            "skipped": counters.skipped, "errors": counters.errors,
        }

    registry = load_building_registry(src["buildings"])
    write_building_registry(ap["buildings"], registry)
    labels = load_oui_labels(src["oui"])
    write_oui_labels(ap["oui"], labels)
    dns = load_dns_map(src["dnsmap"])
    write_dns_map(ap["dnsmap"], dns)
    report["buildings"] = {"buildings": len(registry.buildings), "rules": len(registry.rules)}
    report["oui"] = {"entries": len(labels)}
    report["dnsmap"] = {"entries": len(dns)}
    _write_json(ap["report_ingest"], report)

    outputs = [ap["ap_events"], ap["netflow"], ap["buildings"], ap["oui"],
               ap["dnsmap"], ap["report_ingest"]]
    _write_manifest(out, "ingest", None, {"raw": _rel(raw_dir, out)},
                    list(src.values()), outputs, started)
    return report


def run_fuse(out: str | os.PathLike, settings: Settings) -> dict:
    """Derive leases from associations, then attribute flows to leases."""
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["ap_events"], ap["netflow"], ap["buildings"]])

    registry = load_building_registry(ap["buildings"])
    lease_counters = LeaseCounters()
    with open_text(ap["ap_events"]) as fh:
        leases = derive_all_leases(
            read_ap_events(fh),
            building_for_ap=registry.building_for_ap,
            counters=lease_counters,
        )
    write_leases(ap["leases"], leases)

    match_counters = MatchCounters()
    index = LeaseIndex(leases)
    with open_text(ap["netflow"]) as fh:
        write_core(ap["core"], match_flows(read_netflow(fh), index, None, match_counters))

    report = {
        "leases": {
            "events": lease_counters.events, "leases": lease_counters.leases,
            "zero_length_dropped": lease_counters.zero_length_dropped,
            "discarded_final": lease_counters.discarded_final,
        },
        "match": {
            "flows": match_counters.flows, "matched": match_counters.matched,
            "matched_flows": match_counters.matched_flows,
            "two_sided": match_counters.two_sided,
            "unmatched": match_counters.unmatched,
        },
    }
    _write_json(ap["report_fuse"], report)
    _write_manifest(out, "fuse", None, {},
                    [ap["ap_events"], ap["netflow"], ap["buildings"]],
                    [ap["leases"], ap["core"], ap["report_fuse"]], started)
    return report


def run_classify(out: str | os.PathLike, settings: Settings) -> dict:
    """Resolve per-OUI labels, apply the ad-traffic heuristic, expand to MACs."""
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["oui"], ap["dnsmap"], ap["leases"], ap["core"]])

    labels = load_oui_labels(ap["oui"])
    resolved = classify_by_oui(labels.values())
    ad_ips = {ip for ip, domain in load_dns_map(ap["dnsmap"]).items()
              if domain.endswith("admob.com")}
    resolved = admob_heuristic(read_core(ap["core"]), resolved, ad_ips)

    macs = sorted({lease.mac for lease in read_leases(ap["leases"])},
                  key=lambda m: m.text)
    per_mac = device_types(macs, resolved)
    write_table(ap["device_types"], "device-types", ["mac", "device_type"],
                [(mac.text, kind.value) for mac, kind in per_mac.items()])

    report_obj = classification_report(macs, resolved, label_sources(labels.values()))
    report = {
        "devices": report_obj.devices, "flutes": report_obj.flutes,
        "cellos": report_obj.cellos, "unknown": report_obj.unknown,
        "labeled_fraction": report_obj.labeled_fraction,
        "by_source": dict(sorted(report_obj.by_source.items())),
        "heuristic_ad_ips": sorted(ad_ips),
    }
    _write_json(ap["report_classify"], report)
    _write_manifest(out, "classify", None, {},
                    [ap["oui"], ap["dnsmap"], ap["leases"], ap["core"]],
                    [ap["device_types"], ap["report_classify"]], started)
    return report


def run_mobility(out: str | os.PathLike, settings: Settings) -> int:
    """Daily mobility metrics per device from the lease sessions."""
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["leases"], ap["buildings"]])

    registry = load_building_registry(ap["buildings"])
    coords = {b.id: (b.lat, b.lon) for b in registry.buildings.values()}
    sessions = sessions_from_leases(read_leases(ap["leases"]))
    rows = daily_mobility_rows(sessions, coords)
    n = write_table(
        ap["mobility"], "mobility-days",
        ["mac", "date", "weekend"] + MOBILITY_COLS,
        [(mac.text, day.date.isoformat(), int(day.is_weekend),
          *[getattr(feats, c) for c in MOBILITY_COLS]) for mac, day, feats in rows],
    )
    _write_manifest(out, "mobility", None, {},
                    [ap["leases"], ap["buildings"]], [ap["mobility"]], started)
    return n


def run_traffic(out: str | os.PathLike, settings: Settings) -> int:
    """Daily traffic metrics per device from the attributed flows."""
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["core"]])

    rows = daily_traffic_rows(read_core(ap["core"]))
    n = write_table(
        ap["traffic"], "traffic-days",
        ["mac", "date", "weekend"] + TRAFFIC_COLS,
        [(mac.text, day.date.isoformat(), int(day.is_weekend),
          *[getattr(feats, c) for c in TRAFFIC_COLS]) for mac, day, feats in rows],
    )
    _write_manifest(out, "traffic", None, {}, [ap["core"]], [ap["traffic"]], started)
    return n


def run_features(out: str | os.PathLike, settings: Settings) -> int:
    """Join mobility and traffic rows per device-day and attach the label.

    Traffic requires flows, flows imply a lease, and a lease implies a
    session, so traffic keys are a subset of mobility keys; the join keeps
    device-days that have both.
    """
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["mobility"], ap["traffic"], ap["device_types"]])

    _, type_rows = read_table(ap["device_types"], "device-types")
    kind = {mac: t for mac, t in type_rows}
    mcols, mrows = read_table(ap["mobility"], "mobility-days")
    tcols, trows = read_table(ap["traffic"], "traffic-days")
    mob = {(r[0], r[1]): r for r in mrows}

    joined = []
    for r in trows:
        m = mob.get((r[0], r[1]))
        if m is None:
            raise PipelineError(
                f"{ap['traffic']}: device-day {r[0]}/{r[1]} has flows but no sessions")
        joined.append((r[0], r[1], r[2], kind.get(r[0], DeviceType.UNKNOWN.value),
                       *m[3:], *r[3:]))
    n = write_table(
        ap["features"], "feature-days",
        ["mac", "date", "weekend", "device_type"] + FEATURE_COLS,
        joined,
    )
    _write_manifest(out, "features", None, {},
                    [ap["mobility"], ap["traffic"], ap["device_types"]],
                    [ap["features"]], started)
    return n


def load_features(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """features.csv -> (values[n,19], labels[n], weekend[n]) in column order."""
    cols, rows = read_table(path, "feature-days")
    want = ["mac", "date", "weekend", "device_type"] + FEATURE_COLS
    if cols != want:
        raise PipelineError(f"{path}: unexpected columns {cols}")
    x = np.array([[float(v) for v in r[4:]] for r in rows], dtype=float)
    labels = np.array([r[3] for r in rows])
    weekend = np.array([r[2] == "1" for r in rows])
    return x, labels, weekend


def _write_matrix(path: Path, kind: str, names: Sequence[str], matrix: np.ndarray) -> None:
    write_table(path, kind, ["feature"] + list(names),
                [(name, *matrix[i]) for i, name in enumerate(names)])


def run_correlate(out: str | os.PathLike, settings: Settings) -> dict:
    """Pairwise Pearson matrices and the correlation-based feature subset."""
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["features"]])

    x, labels, _ = load_features(ap["features"])
    if x.shape[0] < 2:
        raise PipelineError(f"{ap['features']}: need at least 2 rows to correlate")
    full = pearson_matrix(x)
    nm = len(MOBILITY_COLS)
    _write_matrix(ap["corr_mobility"], "correlation", MOBILITY_COLS, full[:nm, :nm])
    _write_matrix(ap["corr_traffic"], "correlation", TRAFFIC_COLS, full[nm:, nm:])
    _write_matrix(ap["corr_combined"], "correlation", FEATURE_COLS, full)

    known = np.isin(labels, (DeviceType.FLUTE.value, DeviceType.CELLO.value))
    doc: dict = {"selected": [], "merit": None, "dropped": [], "rows": int(known.sum())}
    if known.any() and len(set(labels[known])) == 2:
        cfs = cfs_select(np.log1p(x[known]), labels[known], FEATURE_COLS)
        doc = {"selected": cfs.selected, "merit": cfs.merit,
               "dropped": cfs.dropped, "rows": int(known.sum())}
    _write_json(ap["cfs"], doc)

    _write_manifest(out, "correlate", None, {}, [ap["features"]],
                    [ap["corr_mobility"], ap["corr_traffic"],
                     ap["corr_combined"], ap["cfs"]], started)
    return doc


def _typed_macs(ap: dict[str, Path]) -> dict[str, str]:
    _, rows = read_table(ap["device_types"], "device-types")
    return {mac: kind for mac, kind in rows
            if kind in (DeviceType.FLUTE.value, DeviceType.CELLO.value)}


def run_fit(out: str | os.PathLike, settings: Settings) -> int:
    """Rank distribution families per device type for the headline quantities.

    Flow-level samples are capped by a seeded subsample so the stage cost
    stays bounded on large traces without losing determinism.
    """
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["core"], ap["leases"], ap["traffic"], ap["device_types"]])

    kind = _typed_macs(ap)
    seed = settings.effective_seed()

    sizes: dict[str, list[float]] = {"flute": [], "cello": []}
    for cf in read_core(ap["core"]):
        t = kind.get(cf.device_mac.text)
        if t is not None:
            sizes[t].append(float(cf.flow.flow_bytes))

    durations: dict[str, list[float]] = {"flute": [], "cello": []}
    visits: dict[str, dict[str, dict[str, int]]] = {"flute": {}, "cello": {}}
    for lease in read_leases(ap["leases"]):
        t = kind.get(lease.mac.text)
        if t is None:
            continue
        durations[t].append((lease.end_ms - lease.start_ms) / 60_000.0)
        if lease.building_id is not None:
            counts = visits[t].setdefault(lease.mac.text, {})
            counts[lease.building_id] = counts.get(lease.building_id, 0) + 1

    tcols, trows = read_table(ap["traffic"], "traffic-days")
    tby_idx = tcols.index("tby")
    daily: dict[str, list[float]] = {"flute": [], "cello": []}
    for r in trows:
        t = kind.get(r[0])
        if t is not None:
            daily[t].append(float(r[tby_idx]))

    rng = np.random.default_rng(seed + 1)
    fit_rows = []
    quantities = (("flow_bytes", sizes), ("session_minutes", durations),
                  ("daily_bytes", daily))
    for t in ("flute", "cello"):
        for qname, table in quantities:
            values = np.asarray(table[t], dtype=float)
            values = values[values > 0]
            if values.size > settings.fit_cap:
                values = values[np.sort(rng.choice(values.size, settings.fit_cap,
                                                   replace=False))]
            if values.size < 10:
                continue
            for rank, fit in enumerate(select_best_fit(values), start=1):
                params = ";".join(f"{k}={fit.params[k]!r}" for k in sorted(fit.params))
                fit_rows.append((t, qname, rank, fit.family, fit.ks_stat,
                                 fit.log_likelihood, int(fit.converged), params))
    n = write_table(ap["fits"], "fits",
                    ["device_type", "quantity", "rank", "family", "ks",
                     "log_likelihood", "converged", "params"], fit_rows)

    zipf_rows = []
    for t in ("flute", "cello"):
        per_device = [sorted(c.values(), reverse=True) for c in visits[t].values()]
        try:
            fit = zipf_rank_fit(per_device)
        except InsufficientRanks:
            continue  # too few devices of this type to anchor a rank law
        if math.isfinite(fit.beta):
            zipf_rows.append((t, fit.beta, len(fit.table)))
    write_table(ap["zipf"], "zipf", ["device_type", "beta", "ranks"], zipf_rows)

    _write_manifest(out, "fit", seed, {"cap": settings.fit_cap},
                    [ap["core"], ap["leases"], ap["traffic"], ap["device_types"]],
                    [ap["fits"], ap["zipf"]], started)
    return n


def _model_arrays(ap: dict[str, Path]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labeled rows only, log1p-compressed; heavy-tailed raw units would let
    a single large day dominate every standardized distance."""
    x, labels, weekend = load_features(ap["features"])
    known = np.isin(labels, (DeviceType.FLUTE.value, DeviceType.CELLO.value))
    if not known.any():
        raise PipelineError(f"{ap['features']}: no labeled rows to model")
    return np.log1p(x[known]), labels[known], weekend[known]


def _feature_sets(x: np.ndarray, weekend: np.ndarray, with_day: bool = True):
    nm = len(MOBILITY_COLS)
    sets = [("mobility", x[:, :nm]), ("traffic", x[:, nm:]), ("combined", x)]
    if with_day:
        sets.append(("combined+day", np.hstack([x, weekend[:, None].astype(float)])))
    return sets


def run_model_svm(out: str | os.PathLike, settings: Settings) -> dict[str, float]:
    """Cross-validated accuracy per feature set, plus the final classifier."""
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["features"]])
    x, labels, weekend = _model_arrays(ap)

    means: dict[str, float] = {}
    rows = []
    for name, feats in _feature_sets(x, weekend):
        cv = svm_cross_validate(feats, labels, folds=settings.folds, seed=SVM_SEED)
        means[name] = cv.mean
        rows.append((name, cv.mean, ";".join(repr(a) for a in cv.accuracies)))
    write_table(ap["svm_cv"], "svm-cv", ["feature_set", "mean", "folds"], rows)

    model = svm_train(x, labels, seed=SVM_SEED)
    _write_json(ap["svm_model"], {
        "feature_names": FEATURE_COLS,
        "classes": list(model.classes),
        "w": [repr(v) for v in model.w],
        "b": repr(model.b),
        "mean": [repr(v) for v in model.mean],
        "std": [repr(v) for v in model.std],
        "objective": [repr(v) for v in model.objective],
    })
    _write_manifest(out, "model-svm", SVM_SEED, {"folds": settings.folds},
                    [ap["features"]], [ap["svm_cv"], ap["svm_model"]], started)
    return means


def run_model_kmeans(out: str | os.PathLike, settings: Settings) -> dict[str, float]:
    """Unsupervised split per feature set, scored against the labels."""
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["features"]])
    x, labels, weekend = _model_arrays(ap)

    purities: dict[str, float] = {}
    rows = []
    for name, feats in _feature_sets(x, weekend, with_day=False):
        result = kmeans(feats, settings.clusters, seed=KMEANS_SEED,
                        restarts=KMEANS_RESTARTS)
        p = purity(result.assignments, labels)
        s = silhouette(feats, result.assignments)
        purities[name] = p
        rows.append((name, settings.clusters, p, s))
    write_table(ap["kmeans_eval"], "kmeans-eval",
                ["feature_set", "k", "purity", "silhouette"], rows)
    _write_manifest(out, "model-kmeans", KMEANS_SEED,
                    {"k": settings.clusters, "restarts": KMEANS_RESTARTS},
                    [ap["features"]], [ap["kmeans_eval"]], started)
    return purities


def run_model_gmm(out: str | os.PathLike, settings: Settings) -> dict:
    """Per-type mixtures on combined and traffic-only features.

    The report records, per type: the selected component counts, how well
    each model's synthetic sample tracks the real traffic marginals, and the
    self-consistency check (resample a model's own output and refit).
    """
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    _require([ap["features"]])
    x, labels, _ = _model_arrays(ap)
    nm = len(MOBILITY_COLS)

    report: dict = {"per_type": {}, "sample_n": 10_000,
                    "kmax": settings.kmax, "restarts": settings.restarts}
    cross_combined: list[float] = []
    cross_traffic: list[float] = []
    outputs = [ap["gmm_report"]]
    for t in (DeviceType.FLUTE.value, DeviceType.CELLO.value):
        sel = labels == t
        if sel.sum() < 2:
            continue
        combined = gmm_select_k(x[sel], range(1, settings.kmax + 1), seed=GMM_SEED,
                                feature_names=FEATURE_COLS, restarts=settings.restarts)
        traffic = gmm_select_k(x[sel][:, nm:], range(1, settings.kmax + 1),
                               seed=GMM_SEED, feature_names=TRAFFIC_COLS,
                               restarts=settings.restarts)
        save_gmm(combined, ap[f"gmm_{t}"])
        save_gmm(traffic, ap[f"gmm_traffic_{t}"])
        outputs += [ap[f"gmm_{t}"], ap[f"gmm_traffic_{t}"]]

        n_sample = report["sample_n"]
        from_combined = gmm_sample(combined, n_sample, seed=GMM_SAMPLE_SEED)[:, nm:]
        from_traffic = gmm_sample(traffic, n_sample, seed=GMM_SAMPLE_SEED)
        ks_c = [ks_two_sample(x[sel][:, nm + j], from_combined[:, j])[0]
                for j in range(len(TRAFFIC_COLS))]
        ks_t = [ks_two_sample(x[sel][:, nm + j], from_traffic[:, j])[0]
                for j in range(len(TRAFFIC_COLS))]
        cross_combined += ks_c
        cross_traffic += ks_t

        resample = gmm_sample(traffic, n_sample, seed=GMM_SELF_SAMPLE_SEED)
        refit = gmm_fit(resample, traffic.k, seed=GMM_SEED,
                        feature_names=TRAFFIC_COLS, restarts=settings.restarts)
        self_check = validate_synthesis(resample, refit, seed=GMM_SELF_EVAL_SEED)

        report["per_type"][t] = {
            "rows": int(sel.sum()),
            "combined_k": combined.k, "traffic_k": traffic.k,
            "combined_bic": gmm_bic(combined, int(sel.sum())),
            "traffic_bic": gmm_bic(traffic, int(sel.sum())),
            "ks_combined": {"avg": float(np.mean(ks_c)), "max": float(np.max(ks_c))},
            "ks_traffic": {"avg": float(np.mean(ks_t)), "max": float(np.max(ks_t))},
            "self_refit_ks_max": self_check.maximum,
        }
    if not report["per_type"]:
        raise PipelineError(f"{ap['features']}: no device type has enough rows")
    if cross_combined:
        report["traffic_marginals"] = {
            "combined_model_avg_ks": float(np.mean(cross_combined)),
            "traffic_model_avg_ks": float(np.mean(cross_traffic)),
        }
    _write_json(ap["gmm_report"], report)
    _write_manifest(out, "model-gmm", GMM_SEED,
                    {"kmax": settings.kmax, "restarts": settings.restarts},
                    [ap["features"]], outputs, started)
    return report


def run_model(out: str | os.PathLike, settings: Settings,
              which: str = "all") -> dict:
    runners: dict[str, Callable] = {
        "svm": run_model_svm, "kmeans": run_model_kmeans, "gmm": run_model_gmm,
    }
    if which == "all":
        return {name: fn(out, settings) for name, fn in runners.items()}
    if which not in runners:
        raise ValueError(f"unknown model {which!r}")
    return {which: runners[which](out, settings)}


def run_synth(out: str | os.PathLike, settings: Settings) -> int:
    """Sample synthetic device-days from the stored per-type mixtures."""
    out = Path(out)
    started = _now()
    ap = artifact_paths(out)
    models = {}
    inputs = []
    for t in (DeviceType.FLUTE.value, DeviceType.CELLO.value):
        path = ap[f"gmm_{t}"]
        if path.is_file():
            models[t] = load_gmm(path)
            inputs.append(path)
    if not models:
        raise PipelineError(f"{ap['gmm_flute'].parent}: no stored mixture models; "
                            "run the gmm model stage first")
    seed = settings.effective_seed() + 2
    samples = synthesize_features(models, settings.synth_n, seed=seed)

    names = next(iter(models.values())).feature_names
    rows = []
    for t in sorted(samples):
        # models are trained on log1p features; emit rows in original units
        values = np.expm1(samples[t])
        for row in values:
            rows.append((t, *row))
    n = write_table(ap["synthetic"], "synthetic-features",
                    ["device_type"] + list(names), rows)
    _write_manifest(out, "synth", seed, {"n_per_type": settings.synth_n},
                    inputs, [ap["synthetic"]], started)
    return n


def run_pipeline(out: str | os.PathLike, settings: Settings,
                 raw: str | os.PathLike | None = None,
                 progress: Callable[[str], None] | None = None) -> list[str]:
    """All stages in order; `raw` skips testgen and ingests existing logs.

    The result of a pipeline run is identical to running each stage's
    subcommand by hand in the same order.
    """
    out = Path(out)
    stages: list[tuple[str, Callable[[], object]]] = []
    if raw is None:
        stages.append(("testgen", lambda: run_testgen(out, settings)))
    stages += [
        ("ingest", lambda: run_ingest(out, settings, raw=raw)),
        ("fuse", lambda: run_fuse(out, settings)),
        ("classify", lambda: run_classify(out, settings)),
        ("mobility", lambda: run_mobility(out, settings)),
        ("traffic", lambda: run_traffic(out, settings)),
        ("features", lambda: run_features(out, settings)),
        ("correlate", lambda: run_correlate(out, settings)),
        ("fit", lambda: run_fit(out, settings)),
        ("model", lambda: run_model(out, settings)),
        ("synth", lambda: run_synth(out, settings)),
    ]
    ran = []
    for name, step in stages:
        step()
        ran.append(name)
        if progress is not None:
            progress(name)
    return ran

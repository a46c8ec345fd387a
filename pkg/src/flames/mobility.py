"""Session-sequence mobility metrics.

A session is the lease interval seen as a visit: one device, one AP, one
building, a start and an end in unix seconds. Daily metrics fold over the
time-ordered sessions of one device within one local day (a session belongs
to the day it starts in). Distances between building coordinates are
great-circle; the radius of gyration works on planar-projected positions so
the usual Euclidean invariances hold exactly.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from flames.model import (
    DEFAULT_TZ_OFFSET_MINUTES,
    DayKey,
    DeviceType,
    Lease,
    MacAddress,
    MobilityFeatures,
    local_hour,
)

EARTH_RADIUS_M = 6371000.0
PASSBY_THRESHOLD_S = 300.0
FIVE_MIN_WINDOW_S = (295.0, 305.0)


class EmptyInput(Exception):
    pass


class InsufficientRanks(Exception):
    """Zipf fit needs at least 3 qualifying ranks."""


@dataclass(frozen=True)
class SessionRecord:
    device_mac: MacAddress
    ap_mac: MacAddress
    building_id: str | None
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    @classmethod
    def from_lease(cls, lease: Lease) -> "SessionRecord":
        return cls(
            device_mac=lease.mac,
            ap_mac=lease.ap_mac,
            building_id=lease.building_id,
            start_s=lease.start_ms / 1000.0,
            end_s=lease.end_ms / 1000.0,
        )


def sessions_from_leases(leases: Iterable[Lease]) -> list[SessionRecord]:
    return [SessionRecord.from_lease(l) for l in leases]


# --- geometry ---------------------------------------------------------------

def haversine_m(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in meters between (lat, lon) points in degrees."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def project_planar(points: Sequence[tuple[float, float]], ref: tuple[float, float] | None = None) -> np.ndarray:
    """Equirectangular projection of (lat, lon) degrees to planar meters
    about a reference point (default: the centroid of the inputs)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (lat, lon) pairs")
    if ref is None:
        ref = (float(pts[:, 0].mean()), float(pts[:, 1].mean()))
    lat0 = math.radians(ref[0])
    y = np.radians(pts[:, 0] - ref[0]) * EARTH_RADIUS_M
    x = np.radians(pts[:, 1] - ref[1]) * EARTH_RADIUS_M * math.cos(lat0)
    return np.column_stack([x, y])


def daily_trajectory_metrics(positions: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """(ljm, dia, tjm) over time-ordered (lat, lon) positions.

    ljm: longest consecutive jump; dia: longest distance over all pairs;
    tjm: total of consecutive jumps. A single position yields all zeros;
    staying in one building contributes zero-length jumps.
    """
    n = len(positions)
    if n == 0:
        raise EmptyInput("no positions")
    ljm = 0.0
    tjm = 0.0
    for a, b in zip(positions, positions[1:]):
        d = haversine_m(a, b)
        ljm = max(ljm, d)
        tjm += d
    dia = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            dia = max(dia, haversine_m(positions[i], positions[j]))
    return ljm, dia, tjm


def radius_of_gyration(xy: np.ndarray, weights: Sequence[float] | None = None) -> float:
    """Root-mean-square planar distance from the (dwell-weighted) centroid."""
    pts = np.asarray(xy, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptyInput("no positions")
    if weights is None:
        w = np.ones(pts.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape[0] != pts.shape[0]:
            raise ValueError("weights length mismatch")
    total = w.sum()
    if total <= 0:
        w = np.ones(pts.shape[0])
        total = float(pts.shape[0])
    centroid = (pts * w[:, None]).sum(axis=0) / total
    sq = ((pts - centroid) ** 2).sum(axis=1)
    return float(math.sqrt((sq * w).sum() / total))


# --- visitation -------------------------------------------------------------

@dataclass(frozen=True)
class VisitationMetrics:
    bld: int
    apc: int
    pdt_min: float
    dlt_min: float
    preferred_building: str | None


def visitation_metrics(sessions: Sequence[SessionRecord]) -> VisitationMetrics:
    """Distinct buildings/APs and per-building dwell; preferred building is
    the dwell argmax, ties to the smallest id."""
    if not sessions:
        raise EmptyInput("no sessions")
    dwell: dict[str, float] = defaultdict(float)
    aps = set()
    total = 0.0
    for s in sessions:
        aps.add(s.ap_mac)
        total += s.duration_s
        if s.building_id is not None:
            dwell[s.building_id] += s.duration_s
    preferred = None
    pdt = 0.0
    if dwell:
        preferred = min(dwell, key=lambda b: (-dwell[b], b))
        pdt = dwell[preferred]
    return VisitationMetrics(
        bld=len(dwell),
        apc=len(aps),
        pdt_min=pdt / 60.0,
        dlt_min=total / 60.0,
        preferred_building=preferred,
    )


def device_day_mobility(
    sessions: Sequence[SessionRecord],
    coords: dict[str, tuple[float, float]],
    weighted: bool = True,
) -> MobilityFeatures:
    """The 8 daily mobility features of one device-day.

    Sessions must be time-ordered. Sessions whose building has no known
    coordinate are skipped by the trajectory metrics but still count toward
    AP/dwell totals.
    """
    visit = visitation_metrics(sessions)
    placed = [s for s in sessions if s.building_id in coords]
    positions = [coords[s.building_id] for s in placed]
    if positions:
        ljm, dia, tjm = daily_trajectory_metrics(positions)
        xy = project_planar(positions)
        gyr = radius_of_gyration(xy, [s.duration_s for s in placed] if weighted else None)
    else:
        ljm = dia = tjm = gyr = 0.0
    return MobilityFeatures(
        ljm=ljm, dia=dia, tjm=tjm, gyr=gyr,
        bld=visit.bld, apc=visit.apc, pdt=visit.pdt_min, dlt=visit.dlt_min,
    )


def daily_mobility_rows(
    sessions: Iterable[SessionRecord],
    coords: dict[str, tuple[float, float]],
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
    weighted: bool = True,
) -> list[tuple[MacAddress, DayKey, MobilityFeatures]]:
    """Group sessions by (device, local start day) and compute each row."""
    groups: dict[tuple[MacAddress, DayKey], list[SessionRecord]] = defaultdict(list)
    for s in sessions:
        day = DayKey.from_ms(int(s.start_s * 1000), tz_offset_minutes)
        groups[s.device_mac, day].append(s)
    rows = []
    for (mac, day), group in sorted(groups.items(), key=lambda kv: (kv[0][0].text, kv[0][1].date)):
        group.sort(key=lambda s: s.start_s)
        rows.append((mac, day, device_day_mobility(group, coords, weighted)))
    return rows


# --- population curves ------------------------------------------------------

def session_start_histogram(
    sessions: Iterable[SessionRecord],
    category_of: dict[str, str],
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
    bins: int = 24,
) -> dict[str, np.ndarray]:
    """Per-category PDF of session start over hour of day; empty categories
    are omitted."""
    counts: dict[str, np.ndarray] = {}
    for s in sessions:
        if s.building_id is None:
            continue
        category = category_of.get(s.building_id)
        if category is None:
            continue
        hour = local_hour(int(s.start_s * 1000), tz_offset_minutes)
        counts.setdefault(category, np.zeros(bins))[hour * bins // 24] += 1
    return {cat: c / c.sum() for cat, c in counts.items() if c.sum() > 0}


def visited_locations_curve(
    sessions: Sequence[SessionRecord],
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
) -> np.ndarray:
    """S(t): distinct buildings seen by the end of each elapsed day since
    the device's first session. Non-decreasing by construction."""
    if not sessions:
        raise EmptyInput("no sessions")
    ordered = sorted(sessions, key=lambda s: s.start_s)
    first_day = DayKey.from_ms(int(ordered[0].start_s * 1000), tz_offset_minutes).date
    last_day = DayKey.from_ms(int(ordered[-1].start_s * 1000), tz_offset_minutes).date
    curve = np.zeros((last_day - first_day).days + 1)
    seen: set[str] = set()
    for s in ordered:
        if s.building_id is not None:
            seen.add(s.building_id)
        day = (DayKey.from_ms(int(s.start_s * 1000), tz_offset_minutes).date - first_day).days
        curve[day] = len(seen)
    # carry forward through days without sessions
    for i in range(1, curve.size):
        curve[i] = max(curve[i], curve[i - 1])
    return curve


@dataclass(frozen=True)
class ZipfFit:
    beta: float
    table: list[tuple[int, float, int]]  # (rank, mean share, device support)


def zipf_rank_fit(
    per_device_counts: Iterable[Sequence[int]],
    min_devices: int = 10,
) -> ZipfFit:
    """Fit P(L) ~ L^-beta over per-device location-visit counts.

    Each device's counts are ranked descending and normalized to shares;
    rank L's probability is the mean share at L over devices reaching that
    rank. beta comes from least squares on log P vs log L over ranks with
    at least `min_devices` support.
    """
    share_sum: Counter[int] = Counter()
    support: Counter[int] = Counter()
    for counts in per_device_counts:
        ranked = sorted((c for c in counts if c > 0), reverse=True)
        total = sum(ranked)
        if total == 0:
            continue
        for rank, c in enumerate(ranked, start=1):
            share_sum[rank] += c / total
            support[rank] += 1
    table = [(rank, share_sum[rank] / support[rank], support[rank]) for rank in sorted(support)]
    fit_rows = [(rank, p) for rank, p, sup in table if sup >= min_devices and p > 0]
    if len(fit_rows) < 3:
        raise InsufficientRanks(f"only {len(fit_rows)} ranks with support >= {min_devices}")
    logl = np.log([r for r, _ in fit_rows])
    logp = np.log([p for _, p in fit_rows])
    slope = float(np.polyfit(logl, logp, 1)[0])
    return ZipfFit(beta=-slope, table=table)


@dataclass(frozen=True)
class DurationKernel:
    edges: np.ndarray      # log-spaced bin edges, seconds
    pdf: np.ndarray        # sums to 1 with five_min_mass
    five_min_mass: float   # share of sessions in the idle-timeout window


def session_duration_kernel(
    durations_s: Sequence[float],
    bins: int = 40,
    lo_s: float = 1.0,
    hi_s: float = 86400.0,
    five_min_window: tuple[float, float] = FIVE_MIN_WINDOW_S,
) -> DurationKernel:
    """Log-binned session-duration PDF with the idle-timeout spike split out."""
    d = np.asarray(list(durations_s), dtype=float)
    if d.size == 0:
        raise EmptyInput("no durations")
    lo_w, hi_w = five_min_window
    spike = (d >= lo_w) & (d < hi_w)
    rest = np.clip(d[~spike], lo_s, hi_s)
    edges = np.logspace(math.log10(lo_s), math.log10(hi_s), bins + 1)
    hist, _ = np.histogram(rest, bins=edges)
    return DurationKernel(
        edges=edges,
        pdf=hist / d.size,
        five_min_mass=float(spike.sum() / d.size),
    )


def detect_passby_aps(
    sessions_by_device: Iterable[Sequence[SessionRecord]],
    threshold_s: float = PASSBY_THRESHOLD_S,
) -> dict[MacAddress, float]:
    """Pass-by score per AP: windows of 3 consecutive short sessions at 3
    distinct APs increment all three; normalized by the AP's session total."""
    hits: Counter[MacAddress] = Counter()
    totals: Counter[MacAddress] = Counter()
    for sessions in sessions_by_device:
        ordered = sorted(sessions, key=lambda s: s.start_s)
        for s in ordered:
            totals[s.ap_mac] += 1
        for w in zip(ordered, ordered[1:], ordered[2:]):
            aps = {s.ap_mac for s in w}
            if len(aps) == 3 and all(s.duration_s < threshold_s for s in w):
                for ap in aps:
                    hits[ap] += 1
    return {ap: hits[ap] / totals[ap] for ap in hits}


def return_probability(
    sessions_by_device: Iterable[Sequence[SessionRecord]],
    granularity: str = "building",
    horizon_h: int = 336,
) -> np.ndarray:
    """PDF over hourly lags between a visit and every later revisit of the
    same location (building or AP)."""
    if granularity not in ("building", "ap"):
        raise ValueError("granularity must be 'building' or 'ap'")
    counts = np.zeros(horizon_h)
    for sessions in sessions_by_device:
        visits: dict[object, list[float]] = defaultdict(list)
        for s in sorted(sessions, key=lambda s: s.start_s):
            key = s.building_id if granularity == "building" else s.ap_mac
            if key is None:
                continue
            visits[key].append(s.start_s)
        for times in visits.values():
            for i in range(len(times)):
                for j in range(i + 1, len(times)):
                    lag = int((times[j] - times[i]) / 3600.0)
                    if 0 < lag < horizon_h:
                        counts[lag] += 1
    total = counts.sum()
    return counts / total if total > 0 else counts


@dataclass(frozen=True)
class AssociationCurves:
    hour_fraction: dict[DeviceType, np.ndarray]  # fraction of devices active per hour
    stay_difference: np.ndarray                  # flute minus cello count per stay length 1..24


def hourly_association_curves(
    sessions: Iterable[SessionRecord],
    device_type: dict[MacAddress, DeviceType],
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
) -> AssociationCurves:
    """Per-hour active-device fractions per type, and the flute-minus-cello
    count over daily stay lengths (distinct active hours in a day)."""
    active_hours: dict[tuple[MacAddress, int], set[int]] = defaultdict(set)
    hour_devices: dict[DeviceType, list[set[MacAddress]]] = {
        t: [set() for _ in range(24)] for t in (DeviceType.FLUTE, DeviceType.CELLO)
    }
    populations: dict[DeviceType, set[MacAddress]] = {
        DeviceType.FLUTE: set(), DeviceType.CELLO: set(),
    }
    for s in sessions:
        kind = device_type.get(s.device_mac, DeviceType.UNKNOWN)
        if kind not in populations:
            continue
        populations[kind].add(s.device_mac)
        ms = int(s.start_s * 1000)
        hour = local_hour(ms, tz_offset_minutes)
        day = DayKey.from_ms(ms, tz_offset_minutes).date
        active_hours[s.device_mac, day].add(hour)
        hour_devices[kind][hour].add(s.device_mac)
    fractions = {}
    for kind, per_hour in hour_devices.items():
        n = len(populations[kind])
        fractions[kind] = np.array([len(v) / n if n else 0.0 for v in per_hour])
    stay = np.zeros(25)
    for (mac, _), hours in active_hours.items():
        kind = device_type.get(mac, DeviceType.UNKNOWN)
        h = len(hours)
        if kind is DeviceType.FLUTE:
            stay[h] += 1
        elif kind is DeviceType.CELLO:
            stay[h] -= 1
    return AssociationCurves(hour_fraction=fractions, stay_difference=stay[1:])

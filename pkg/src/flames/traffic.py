"""Flow-level, AP-level, and per-device-day traffic characterization.

Flows are grouped into device-days by the local day of the flow start.
Active time merges flow intervals, coalescing overlaps and gaps of at most
a configurable number of seconds (default 60). The per-hour flow-count
spread (SFC) is taken within the day, over the local hours spanned by the
device's first to last flow with empty hours counted as zero.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from flames.model import (
    DEFAULT_TZ_OFFSET_MINUTES,
    CoreFlow,
    DayKey,
    DeviceType,
    MacAddress,
    Protocol,
    TrafficFeatures,
    local_hour,
)

MB = 1e6
DEFAULT_GAP_S = 60.0


class EmptyGroup(Exception):
    pass


# --- flow-level summaries ----------------------------------------------------

@dataclass(frozen=True)
class QuantitySummary:
    n: int
    mean: float
    median: float
    std: float


def summarize(values) -> QuantitySummary:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise EmptyGroup("no values")
    return QuantitySummary(
        n=int(x.size),
        mean=float(x.mean()),
        median=float(np.median(x)),
        std=float(x.std()),
    )


_QUANTITIES = ("bytes", "packet_size", "packets", "runtime_ms")


@dataclass(frozen=True)
class FlowLevelStats:
    raw: dict[str, QuantitySummary]
    filtered: dict[str, QuantitySummary]
    removed: dict[str, int]


def flow_level_stats(flows: Sequence[CoreFlow]) -> FlowLevelStats:
    """Mean/median/std of flow bytes, average packet size, packet count and
    runtime for one group of flows, before and after IQR filtering."""
    from flames.stats import iqr_filter

    if not flows:
        raise EmptyGroup("no flows")
    series = {
        "bytes": np.array([f.flow.flow_bytes for f in flows], dtype=float),
        "packet_size": np.array(
            [f.flow.flow_bytes / f.flow.packet_count for f in flows if f.flow.packet_count > 0],
            dtype=float,
        ),
        "packets": np.array([f.flow.packet_count for f in flows], dtype=float),
        "runtime_ms": np.array([f.flow.duration_ms for f in flows], dtype=float),
    }
    raw = {}
    filtered = {}
    removed = {}
    for key in _QUANTITIES:
        raw[key] = summarize(series[key])
        kept, dropped = iqr_filter(series[key])
        filtered[key] = summarize(kept) if kept.size else raw[key]
        removed[key] = dropped
    return FlowLevelStats(raw=raw, filtered=filtered, removed=removed)


def group_flows(
    core: Iterable[CoreFlow],
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
) -> dict[tuple[DeviceType, bool], list[CoreFlow]]:
    """Split flows into (device type, is_weekend) groups."""
    groups: dict[tuple[DeviceType, bool], list[CoreFlow]] = defaultdict(list)
    for cf in core:
        day = DayKey.from_ms(cf.flow.start_ms, tz_offset_minutes)
        groups[cf.device_type, day.is_weekend].append(cf)
    return dict(groups)


def protocol_split(flows: Sequence[CoreFlow]) -> dict[Protocol, tuple[float, float]]:
    """(flow share, byte share) per protocol; each share family sums to 1."""
    if not flows:
        raise EmptyGroup("no flows")
    flow_counts: Counter[Protocol] = Counter()
    byte_counts: Counter[Protocol] = Counter()
    total_bytes = 0
    for cf in flows:
        flow_counts[cf.flow.protocol] += 1
        byte_counts[cf.flow.protocol] += cf.flow.flow_bytes
        total_bytes += cf.flow.flow_bytes
    n = len(flows)
    return {
        proto: (
            flow_counts[proto] / n,
            byte_counts[proto] / total_bytes if total_bytes else 0.0,
        )
        for proto in Protocol
    }


# --- AP-side views ------------------------------------------------------------

@dataclass(frozen=True)
class ApDayLoad:
    ap_mac: MacAddress
    day: DayKey
    device_type: DeviceType
    flows: int
    packets: int
    bytes: int


def ap_daily_load(
    core: Iterable[CoreFlow],
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
) -> list[ApDayLoad]:
    acc: dict[tuple[MacAddress, DayKey, DeviceType], list[int]] = defaultdict(lambda: [0, 0, 0])
    for cf in core:
        day = DayKey.from_ms(cf.flow.start_ms, tz_offset_minutes)
        cell = acc[cf.ap_mac, day, cf.device_type]
        cell[0] += 1
        cell[1] += cf.flow.packet_count
        cell[2] += cf.flow.flow_bytes
    return [
        ApDayLoad(ap, day, kind, flows, packets, volume)
        for (ap, day, kind), (flows, packets, volume) in sorted(
            acc.items(), key=lambda kv: (kv[0][0].text, kv[0][1].date, kv[0][2].value)
        )
    ]


def zero_flow_ap_fraction(
    loads: Sequence[ApDayLoad],
    ap_universe: set[MacAddress],
) -> dict[tuple[bool, DeviceType], float]:
    """Fraction of known APs with no flows of a type per day class, averaged
    over the days present in `loads`."""
    seen_days: dict[bool, set[int]] = defaultdict(set)
    active: dict[tuple[bool, DeviceType], dict[int, set[MacAddress]]] = defaultdict(lambda: defaultdict(set))
    kinds = set()
    for row in loads:
        seen_days[row.day.is_weekend].add(row.day.date)
        active[row.day.is_weekend, row.device_type][row.day.date].add(row.ap_mac)
        kinds.add(row.device_type)
    out = {}
    total = len(ap_universe)
    if total == 0:
        return out
    for weekend, days in seen_days.items():
        for kind in kinds:
            per_day = active.get((weekend, kind), {})
            fractions = [1.0 - len(per_day.get(d, ())) / total for d in days]
            out[weekend, kind] = float(np.mean(fractions))
    return out


def cdf_table(values) -> list[tuple[float, float]]:
    """Empirical CDF as (x, F(x)) pairs at the distinct sample values."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        return []
    xs, idx = np.unique(x, return_index=True)
    counts = np.diff(np.append(idx, x.size))
    f = np.cumsum(counts) / x.size
    return list(zip(xs.tolist(), f.tolist()))


# --- per-AP inter-arrival times ------------------------------------------------

@dataclass
class IatResult:
    samples: dict[tuple[MacAddress, int, DeviceType], np.ndarray]
    skipped: int


def iat_per_ap(
    core: Iterable[CoreFlow],
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
) -> IatResult:
    """Per (AP, day, device type) inter-arrival times in ms between
    successive flow starts; streams with fewer than two flows are skipped."""
    starts: dict[tuple[MacAddress, int, DeviceType], list[int]] = defaultdict(list)
    for cf in core:
        day = DayKey.from_ms(cf.flow.start_ms, tz_offset_minutes)
        starts[cf.ap_mac, day.date, cf.device_type].append(cf.flow.start_ms)
    samples = {}
    skipped = 0
    for key, times in starts.items():
        if len(times) < 2:
            skipped += 1
            continue
        times.sort()
        samples[key] = np.diff(np.asarray(times, dtype=float))
    return IatResult(samples=samples, skipped=skipped)


def pooled_iats(result: IatResult, device_type: DeviceType) -> np.ndarray:
    chunks = [v for (ap, day, kind), v in result.samples.items() if kind is device_type]
    return np.concatenate(chunks) if chunks else np.array([])


# --- per-device-day features ----------------------------------------------------

@dataclass(frozen=True)
class ActiveTime:
    tat_min: float
    aat_min: float
    periods: int


def active_time(flows: Sequence[CoreFlow], gap_s: float = DEFAULT_GAP_S) -> ActiveTime:
    """Merge flow intervals into active periods; overlaps and gaps of at
    most `gap_s` coalesce. Order-independent."""
    if not flows:
        raise EmptyGroup("no flows")
    gap_ms = gap_s * 1000.0
    intervals = sorted((f.flow.start_ms, f.flow.finish_ms) for f in flows)
    periods = []
    start, end = intervals[0]
    for s, e in intervals[1:]:
        if s - end <= gap_ms:
            end = max(end, e)
        else:
            periods.append(end - start)
            start, end = s, e
    periods.append(end - start)
    total = float(sum(periods))
    return ActiveTime(
        tat_min=total / 60000.0,
        aat_min=total / len(periods) / 60000.0,
        periods=len(periods),
    )


def _hour_count_std(starts_ms: Sequence[int], tz_offset_minutes: int) -> float:
    hours = [local_hour(ms, tz_offset_minutes) for ms in starts_ms]
    lo, hi = min(hours), max(hours)
    counts = np.zeros(hi - lo + 1)
    for h in hours:
        counts[h - lo] += 1
    return float(counts.std())


def user_daily_traffic(
    flows: Sequence[CoreFlow],
    gap_s: float = DEFAULT_GAP_S,
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
) -> TrafficFeatures:
    """The 11 daily traffic features of one device-day.

    tby is in MB (1e6 bytes), tat/aat in minutes, ait/sit in seconds; aby
    and sby are in bytes over the day's flow sizes.
    """
    if not flows:
        raise EmptyGroup("no flows")
    sizes = np.array([f.flow.flow_bytes for f in flows], dtype=float)
    starts = sorted(f.flow.start_ms for f in flows)
    udp_flows = sum(1 for f in flows if f.flow.protocol is Protocol.UDP)
    udp_bytes = sum(f.flow.flow_bytes for f in flows if f.flow.protocol is Protocol.UDP)
    total_bytes = float(sizes.sum())
    act = active_time(flows, gap_s)
    if len(starts) > 1:
        iats_s = np.diff(np.asarray(starts, dtype=float)) / 1000.0
        ait, sit = float(iats_s.mean()), float(iats_s.std())
    else:
        ait = sit = 0.0
    return TrafficFeatures(
        tby=total_bytes / MB,
        aby=float(sizes.mean()),
        sby=float(sizes.std()),
        tat=act.tat_min,
        aat=act.aat_min,
        tfc=float(len(flows)),
        sfc=_hour_count_std(starts, tz_offset_minutes),
        rub=udp_bytes / total_bytes if total_bytes else 0.0,
        ruf=udp_flows / len(flows),
        ait=ait,
        sit=sit,
    )


def daily_traffic_rows(
    core: Iterable[CoreFlow],
    gap_s: float = DEFAULT_GAP_S,
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
) -> list[tuple[MacAddress, DayKey, TrafficFeatures]]:
    """Group flows by (device, local start day) and compute each row."""
    groups: dict[tuple[MacAddress, DayKey], list[CoreFlow]] = defaultdict(list)
    for cf in core:
        groups[cf.device_mac, DayKey.from_ms(cf.flow.start_ms, tz_offset_minutes)].append(cf)
    rows = []
    for (mac, day), group in sorted(groups.items(), key=lambda kv: (kv[0][0].text, kv[0][1].date)):
        rows.append((mac, day, user_daily_traffic(group, gap_s, tz_offset_minutes)))
    return rows

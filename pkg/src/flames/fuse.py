"""Derive device leases from association sequences and attribute flows.

A lease is the interval between two consecutive associations of one device:
association k opens a lease at AP_k with the IP of event k, and the next
association closes it. The final association of a device is discarded since
nothing bounds it. A flow is attributed to a lease when one of its endpoints
is the lease IP and its entire lifetime falls inside the lease interval.
"""

from __future__ import annotations

import os
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from flames.ingest import (
    FORMAT_VERSION,
    BadHeader,
    FieldParse,
    MalformedLine,
    _format_ms,
    _parse_mac,
    _parse_ms,
    open_text,
    parse_netflow_line,
    format_netflow_line,
)
from flames.model import (
    ApEvent,
    CoreFlow,
    DayKey,
    DeviceType,
    Direction,
    FlowRecord,
    Lease,
    MacAddress,
    DEFAULT_TZ_OFFSET_MINUTES,
)


class UnsortedInput(Exception):
    """Events of one device must be ordered by association time."""


@dataclass
class LeaseCounters:
    events: int = 0
    leases: int = 0
    zero_length_dropped: int = 0
    discarded_final: int = 0


def derive_leases(
    events: list[ApEvent],
    building_for_ap=None,
    counters: LeaseCounters | None = None,
) -> list[Lease]:
    """Build the lease list of one device from its time-ordered associations.

    n events yield at most n-1 leases; lease k spans
    [event_k.begin, event_{k+1}.begin) with event k's IP and AP. Zero-length
    intervals (duplicate timestamps) are dropped and counted.
    """
    c = counters if counters is not None else LeaseCounters()
    c.events += len(events)
    if not events:
        return []
    mac = events[0].user_mac
    leases: list[Lease] = []
    for current, nxt in zip(events, events[1:]):
        if nxt.user_mac != mac:
            raise UnsortedInput("events of multiple devices interleaved")
        if nxt.lease_begin_ms < current.lease_begin_ms:
            raise UnsortedInput("events not sorted by association time")
        if nxt.lease_begin_ms == current.lease_begin_ms:
            c.zero_length_dropped += 1
            continue
        building = building_for_ap(current.ap_name) if building_for_ap else None
        leases.append(
            Lease(
                mac=mac,
                ip=current.user_ip,
                ap_mac=current.ap_mac,
                building_id=building.id if building else None,
                start_ms=current.lease_begin_ms,
                end_ms=nxt.lease_begin_ms,
            )
        )
    c.discarded_final += 1
    c.leases += len(leases)
    return leases


def derive_all_leases(
    events: Iterable[ApEvent],
    building_for_ap=None,
    counters: LeaseCounters | None = None,
) -> list[Lease]:
    """Group events by device, sort each group by time, derive every lease."""
    by_mac: dict[MacAddress, list[ApEvent]] = {}
    for event in events:
        by_mac.setdefault(event.user_mac, []).append(event)
    leases: list[Lease] = []
    for mac in sorted(by_mac, key=lambda m: m.text):
        group = sorted(by_mac[mac], key=lambda e: e.lease_begin_ms)
        leases.extend(derive_leases(group, building_for_ap, counters))
    return leases


class LeaseIndex:
    """Per-IP sorted lease arrays supporting stabbing queries.

    Leases of one (device, IP) stream are disjoint, so a binary search on the
    start times followed by one containment check answers each query.
    """

    def __init__(self, leases: Iterable[Lease]):
        by_ip: dict[str, list[Lease]] = {}
        for lease in leases:
            by_ip.setdefault(lease.ip, []).append(lease)
        self._starts: dict[str, list[int]] = {}
        self._maxend: dict[str, list[int]] = {}
        self._leases: dict[str, list[Lease]] = {}
        for ip, group in by_ip.items():
            group.sort(key=lambda l: (l.start_ms, l.end_ms, l.mac.text))
            self._leases[ip] = group
            self._starts[ip] = [l.start_ms for l in group]
            running = 0
            maxend = []
            for l in group:
                running = max(running, l.end_ms)
                maxend.append(running)
            self._maxend[ip] = maxend

    def find(self, ip: str, start_ms: int, finish_ms: int) -> Lease | None:
        """The lease on `ip` containing [start, finish], if any."""
        starts = self._starts.get(ip)
        if not starts:
            return None
        group = self._leases[ip]
        maxend = self._maxend[ip]
        # candidates start at or before the flow; walking back is safe to cut
        # short once no earlier lease ends late enough to contain the flow.
        i = bisect_right(starts, start_ms) - 1
        while i >= 0 and maxend[i] >= finish_ms:
            if finish_ms <= group[i].end_ms:
                return group[i]
            i -= 1
        return None


@dataclass
class MatchCounters:
    flows: int = 0
    matched: int = 0          # CoreFlows emitted (a two-sided match counts twice)
    matched_flows: int = 0    # flows with at least one side matched
    two_sided: int = 0
    unmatched: int = 0


def match_flows(
    flows: Iterable[FlowRecord],
    index: LeaseIndex,
    device_types: dict[str, DeviceType] | None = None,
    counters: MatchCounters | None = None,
) -> Iterator[CoreFlow]:
    """Attribute flows to leases; unmatched flows are counted, not emitted.

    A flow matching a lease on its source is outbound, on its destination
    inbound; a flow bridging two leases (on-campus peer traffic) emits one
    CoreFlow per side.
    """
    c = counters if counters is not None else MatchCounters()
    types = device_types or {}
    for flow in flows:
        c.flows += 1
        any_side = False
        out_lease = index.find(flow.src_ip, flow.start_ms, flow.finish_ms)
        in_lease = index.find(flow.dst_ip, flow.start_ms, flow.finish_ms)
        for lease, direction in ((out_lease, Direction.OUTBOUND), (in_lease, Direction.INBOUND)):
            if lease is None:
                continue
            any_side = True
            c.matched += 1
            yield CoreFlow(
                flow=flow,
                device_mac=lease.mac,
                device_type=types.get(lease.mac.oui, DeviceType.UNKNOWN),
                ap_mac=lease.ap_mac,
                building_id=lease.building_id,
                direction=direction,
            )
        if out_lease is not None and in_lease is not None:
            c.two_sided += 1
        if any_side:
            c.matched_flows += 1
        else:
            c.unmatched += 1


def partition_days(
    core: Iterable[CoreFlow],
    tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES,
) -> dict[tuple[MacAddress, DayKey], list[CoreFlow]]:
    """Group attributed flows by (device, local day of the flow start)."""
    groups: dict[tuple[MacAddress, DayKey], list[CoreFlow]] = {}
    for cf in core:
        key = (cf.device_mac, DayKey.from_ms(cf.flow.start_ms, tz_offset_minutes))
        groups.setdefault(key, []).append(cf)
    return groups


# --- CORE / lease file round-trip ----------------------------------------

_DIRECTIONS = {d.value: d for d in Direction}
_DEVICE_TYPES = {t.value: t for t in DeviceType}


def write_core(path: str | os.PathLike, core: Iterable[CoreFlow]) -> int:
    """CORE file: device columns then the 10 flow columns, flames-v1 header."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_VERSION} core\n")
        for cf in core:
            fh.write(
                f"{cf.device_mac.text},{cf.device_type.value},{cf.ap_mac.text},"
                f"{cf.building_id or '-'},{cf.direction.value},"
                f"{format_netflow_line(cf.flow)}\n"
            )
            n += 1
    return n


def read_core(path: str | os.PathLike) -> Iterator[CoreFlow]:
    with open_text(path) as fh:
        header = fh.readline().strip()
        if header != f"{FORMAT_VERSION} core":
            raise BadHeader(f"{path}: not a CORE file: {header!r}")
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split(",", 5)
            if len(fields) != 6:
                raise MalformedLine(f"CORE row needs 6+ fields: {line!r}")
            yield CoreFlow(
                flow=parse_netflow_line(fields[5]),
                device_mac=_parse_mac(fields[0], 0),
                device_type=_DEVICE_TYPES[fields[1]],
                ap_mac=_parse_mac(fields[2], 2),
                building_id=None if fields[3] == "-" else fields[3],
                direction=_DIRECTIONS[fields[4]],
            )


def write_leases(path: str | os.PathLike, leases: Iterable[Lease]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_VERSION} leases\n")
        for l in leases:
            fh.write(
                f"{l.mac.text},{l.ip},{l.ap_mac.text},{l.building_id or '-'},"
                f"{_format_ms(l.start_ms)},{_format_ms(l.end_ms)}\n"
            )
            n += 1
    return n


def read_leases(path: str | os.PathLike) -> Iterator[Lease]:
    with open_text(path) as fh:
        header = fh.readline().strip()
        if header != f"{FORMAT_VERSION} leases":
            raise BadHeader(f"{path}: not a lease file: {header!r}")
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 6:
                raise MalformedLine(f"lease row needs 6 fields: {line!r}")
            yield Lease(
                mac=_parse_mac(fields[0], 0),
                ip=fields[1],
                ap_mac=_parse_mac(fields[2], 2),
                building_id=None if fields[3] == "-" else fields[3],
                start_ms=_parse_ms(fields[4], 4),
                end_ms=_parse_ms(fields[5], 5),
            )

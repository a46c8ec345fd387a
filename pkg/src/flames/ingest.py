"""Streaming parsers for the four input artifacts.

NetFlow and AP logs are delimiter-separated text, one record per line, in the
column orders fixed by the file formats below. Malformed lines are skipped and
counted, never fatal: with multi-billion-row provenance some dirt is a given.

File formats
------------
NetFlow, 10 columns::

    start,finish,duration,src_ip,dst_ip,protocol,src_port,dst_port,packets,bytes

AP log, 6 columns::

    user_ip,user_mac,ap_name,ap_mac,lease_begin,lease_end

Building registry and OUI label files are typed-row CSVs with a version header
line ``flames-v1 <kind>``; see :func:`load_building_registry` and
:func:`load_oui_labels`.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from flames.model import (
    ApEvent,
    Building,
    BuildingCategory,
    DeviceType,
    FlowRecord,
    LabelSource,
    MacAddress,
    Protocol,
    validate,
)

FORMAT_VERSION = "flames-v1"


class IngestError(Exception):
    """Base class for ingest faults."""


class MalformedLine(IngestError):
    """Wrong field count for the expected record layout."""


class FieldParse(IngestError):
    """A single field failed to parse; carries the column index."""

    def __init__(self, column: int, message: str):
        super().__init__(f"column {column}: {message}")
        self.column = column


class DuplicateBuilding(IngestError):
    pass


class DanglingRule(IngestError):
    pass


class DuplicateOui(IngestError):
    pass


class BadHeader(IngestError):
    pass


def _parse_ms(text: str, column: int) -> int:
    """Parse a unix timestamp with optional fractional seconds to integer ms.

    Kept in integer arithmetic so that ms fractions survive exactly.
    """
    sec, dot, frac = text.partition(".")
    try:
        ms = int(sec) * 1000
        if dot:
            if not 1 <= len(frac) <= 3 or not frac.isdigit():
                raise ValueError
            ms += int(frac.ljust(3, "0"))
        return ms
    except ValueError:
        raise FieldParse(column, f"bad timestamp {text!r}") from None


def _format_ms(ms: int) -> str:
    return f"{ms // 1000}.{ms % 1000:03d}"


def _parse_int(text: str, column: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise FieldParse(column, f"bad {what} {text!r}") from None


def _parse_mac(text: str, column: int) -> MacAddress:
    try:
        return MacAddress.parse(text)
    except ValueError as exc:
        raise FieldParse(column, str(exc)) from None


_PROTOCOLS = {"TCP": Protocol.TCP, "UDP": Protocol.UDP, "OTHER": Protocol.OTHER}


def parse_netflow_line(line: str, delimiter: str = ",") -> FlowRecord:
    """Parse one NetFlow row; raises MalformedLine / FieldParse on bad input."""
    fields = line.rstrip("\r\n").split(delimiter)
    if len(fields) != 10:
        raise MalformedLine(f"expected 10 fields, got {len(fields)}")
    record = FlowRecord(
        start_ms=_parse_ms(fields[0], 0),
        finish_ms=_parse_ms(fields[1], 1),
        duration_ms=_parse_ms(fields[2], 2),
        src_ip=fields[3],
        dst_ip=fields[4],
        protocol=_PROTOCOLS.get(fields[5].upper(), Protocol.OTHER),
        src_port=_parse_int(fields[6], 6, "port"),
        dst_port=_parse_int(fields[7], 7, "port"),
        packet_count=_parse_int(fields[8], 8, "packet count"),
        flow_bytes=_parse_int(fields[9], 9, "byte count"),
    )
    violations = validate(record)
    if violations:
        raise FieldParse(0, "; ".join(violations))
    return record


def format_netflow_line(record: FlowRecord, delimiter: str = ",") -> str:
    return delimiter.join(
        (
            _format_ms(record.start_ms),
            _format_ms(record.finish_ms),
            _format_ms(record.duration_ms),
            record.src_ip,
            record.dst_ip,
            record.protocol.value,
            str(record.src_port),
            str(record.dst_port),
            str(record.packet_count),
            str(record.flow_bytes),
        )
    )


def parse_ap_event_line(line: str, delimiter: str = ",") -> ApEvent:
    """Parse one AP-log row; MACs are canonicalized, timestamps whole seconds."""
    fields = line.rstrip("\r\n").split(delimiter)
    if len(fields) != 6:
        raise MalformedLine(f"expected 6 fields, got {len(fields)}")
    event = ApEvent(
        user_ip=fields[0],
        user_mac=_parse_mac(fields[1], 1),
        ap_name=fields[2],
        ap_mac=_parse_mac(fields[3], 3),
        lease_begin_ms=_parse_int(fields[4], 4, "timestamp") * 1000,
        lease_end_ms=_parse_int(fields[5], 5, "timestamp") * 1000,
    )
    violations = validate(event)
    if violations:
        raise FieldParse(0, "; ".join(violations))
    return event


def format_ap_event_line(event: ApEvent, delimiter: str = ",") -> str:
    return delimiter.join(
        (
            event.user_ip,
            event.user_mac.text,
            event.ap_name,
            event.ap_mac.text,
            str(event.lease_begin_ms // 1000),
            str(event.lease_end_ms // 1000),
        )
    )


@dataclass
class ParseCounters:
    """Totality bookkeeping: every input line is a record or a counted skip."""

    total: int = 0
    records: int = 0
    skipped: int = 0
    errors: list[str] = field(default_factory=list)

    def note_skip(self, lineno: int, exc: Exception, keep: int = 20) -> None:
        self.skipped += 1
        if len(self.errors) < keep:
            self.errors.append(f"line {lineno}: {exc}")


def _iter_records(lines, parse, delimiter, counters):
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        counters.total += 1
        try:
            record = parse(line, delimiter)
        except IngestError as exc:
            counters.note_skip(lineno, exc)
            continue
        counters.records += 1
        yield record


def read_netflow(lines: Iterable[str], delimiter: str = ",",
                 counters: ParseCounters | None = None) -> Iterator[FlowRecord]:
    """Stream FlowRecords from text lines, skipping and counting bad rows.

    Memory use is bounded by one line: records are yielded, never accumulated.
    """
    return _iter_records(lines, parse_netflow_line, delimiter, counters if counters is not None else ParseCounters())


def read_ap_events(lines: Iterable[str], delimiter: str = ",",
                   counters: ParseCounters | None = None) -> Iterator[ApEvent]:
    """Stream ApEvents from text lines, skipping and counting bad rows."""
    return _iter_records(lines, parse_ap_event_line, delimiter, counters if counters is not None else ParseCounters())


def open_text(path: str | os.PathLike) -> io.TextIOWrapper:
    return open(path, "r", encoding="utf-8", newline="")


def _read_headed_rows(path, kind: str) -> Iterator[list[str]]:
    with open_text(path) as fh:
        header = fh.readline().strip()
        if header != f"{FORMAT_VERSION} {kind}":
            raise BadHeader(f"{path}: expected '{FORMAT_VERSION} {kind}' header, got {header!r}")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield line.split(",")


@dataclass
class BuildingRegistry:
    """Buildings plus longest-prefix rules mapping AP names to buildings."""

    buildings: dict[str, Building]
    rules: dict[str, str]  # ap-name prefix -> building id
    unmapped_ap_names: int = 0

    def building_for_ap(self, ap_name: str) -> Building | None:
        """Longest matching prefix rule wins; None (counted) when no rule fits."""
        best: str | None = None
        for prefix, building_id in self.rules.items():
            if ap_name.startswith(prefix) and (best is None or len(prefix) > len(best)):
                best = prefix
        if best is None:
            self.unmapped_ap_names += 1
            return None
        return self.buildings[self.rules[best]]


def load_building_registry(path: str | os.PathLike) -> BuildingRegistry:
    """Load the building registry.

    Rows: ``building,<id>,<name>,<category>,<lat>,<lon>`` and
    ``rule,<ap_name_prefix>,<building_id>``. Every rule must resolve to a
    declared building; duplicate ids or duplicate rule prefixes are faults.
    """
    buildings: dict[str, Building] = {}
    rules: dict[str, str] = {}
    for row in _read_headed_rows(path, "buildings"):
        if row[0] == "building":
            if len(row) != 6:
                raise MalformedLine(f"building row needs 6 fields: {row}")
            bid = row[1]
            if bid in buildings:
                raise DuplicateBuilding(f"building id {bid!r} declared twice")
            try:
                category = BuildingCategory(row[3].lower())
            except ValueError:
                raise FieldParse(3, f"unknown category {row[3]!r}") from None
            building = Building(id=bid, name=row[2], category=category,
                                lat=float(row[4]), lon=float(row[5]))
            bad = validate(building)
            if bad:
                raise FieldParse(4, "; ".join(bad))
            buildings[bid] = building
        elif row[0] == "rule":
            if len(row) != 3:
                raise MalformedLine(f"rule row needs 3 fields: {row}")
            prefix, bid = row[1], row[2]
            if prefix in rules:
                raise DuplicateBuilding(f"rule prefix {prefix!r} declared twice")
            rules[prefix] = bid
        else:
            raise MalformedLine(f"unknown row kind {row[0]!r}")
    for prefix, bid in rules.items():
        if bid not in buildings:
            raise DanglingRule(f"rule {prefix!r} points at unknown building {bid!r}")
    return BuildingRegistry(buildings=buildings, rules=rules)


def write_building_registry(path: str | os.PathLike, registry: BuildingRegistry) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_VERSION} buildings\n")
        for b in registry.buildings.values():
            fh.write(f"building,{b.id},{b.name},{b.category.value},{b.lat!r},{b.lon!r}\n")
        for prefix, bid in registry.rules.items():
            fh.write(f"rule,{prefix},{bid}\n")


@dataclass(frozen=True)
class OuiLabel:
    """Per-manufacturer-prefix device-type label and its provenance."""

    oui: str
    label: DeviceType | None  # None encodes "both": produces flutes and cellos
    source: LabelSource

    @property
    def is_both(self) -> bool:
        return self.label is None


_LABELS = {
    "flute": DeviceType.FLUTE,
    "cello": DeviceType.CELLO,
    "both": None,
}


def load_oui_labels(path: str | os.PathLike) -> dict[str, OuiLabel]:
    """Load OUI labels; one row per OUI: ``oui,<aa:bb:cc>,<label>,<source>``."""
    labels: dict[str, OuiLabel] = {}
    for row in _read_headed_rows(path, "ouis"):
        if row[0] != "oui" or len(row) != 4:
            raise MalformedLine(f"oui row needs 4 fields: {row}")
        oui = row[1].lower()
        if oui in labels:
            raise DuplicateOui(f"OUI {oui!r} declared twice")
        if row[2].lower() not in _LABELS:
            raise FieldParse(2, f"unknown label {row[2]!r}")
        try:
            source = LabelSource(row[3].lower())
        except ValueError:
            raise FieldParse(3, f"unknown source {row[3]!r}") from None
        labels[oui] = OuiLabel(oui=oui, label=_LABELS[row[2].lower()], source=source)
    return labels


def write_oui_labels(path: str | os.PathLike, labels: dict[str, OuiLabel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_VERSION} ouis\n")
        for oui in sorted(labels):
            entry = labels[oui]
            text = "both" if entry.is_both else entry.label.value
            fh.write(f"oui,{oui},{text},{entry.source.value}\n")


def load_dns_map(path: str | os.PathLike) -> dict[str, str]:
    """Destination-IP to domain map: ``<ip>,<domain>`` rows."""
    mapping: dict[str, str] = {}
    for row in _read_headed_rows(path, "dnsmap"):
        if len(row) != 2:
            raise MalformedLine(f"dnsmap row needs 2 fields: {row}")
        mapping[row[0]] = row[1]
    return mapping


def write_dns_map(path: str | os.PathLike, mapping: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_VERSION} dnsmap\n")
        for ip in sorted(mapping):
            fh.write(f"{ip},{mapping[ip]}\n")

"""Shared domain types for the trace-fusion pipeline.

All timestamps are integer unix milliseconds. NetFlow rows carry millisecond
fractions while association logs are whole seconds; keeping everything in ms
integers makes the interval arithmetic in the fusion stage exact.

Constructors only enforce structural sanity (octet counts, enum membership).
Semantic invariants (interval ordering, coordinate bounds, ...) are checked by
:func:`validate`, which reports violations as data so that dirty input rows can
be counted and skipped instead of aborting a run.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass
from enum import Enum

MS_PER_DAY = 86_400_000
MS_PER_HOUR = 3_600_000

# Local-day bucketing uses one fixed UTC offset per dataset. The campus the
# trace formats were designed around sits at UTC-04:00.
DEFAULT_TZ_OFFSET_MINUTES = -240


class DeviceType(Enum):
    FLUTE = "flute"
    CELLO = "cello"
    UNKNOWN = "unknown"


class Protocol(Enum):
    TCP = "TCP"
    UDP = "UDP"
    OTHER = "OTHER"


class Direction(Enum):
    """Which side of a flow matched the device lease IP."""

    INBOUND = "in"    # device was the destination
    OUTBOUND = "out"  # device was the source


class LabelSource(Enum):
    SURVEY = "survey"
    REGISTRY = "registry"
    HEURISTIC = "heuristic"


class BuildingCategory(Enum):
    ACADEMIC = "academic"
    SOCIAL = "social"
    LIBRARY = "library"
    HOUSING = "housing"
    ADMINISTRATIVE = "administrative"
    SPORTS = "sports"
    POLICE = "police"
    MUSEUM = "museum"
    OTHER = "other"


@dataclass(frozen=True, order=True)
class MacAddress:
    """A 48-bit hardware address, canonically lowercase colon-separated."""

    octets: bytes

    def __post_init__(self) -> None:
        if len(self.octets) != 6:
            raise ValueError(f"MAC needs 6 octets, got {len(self.octets)}")

    @classmethod
    def parse(cls, text: str) -> "MacAddress":
        parts = text.replace("-", ":").split(":")
        if len(parts) != 6:
            raise ValueError(f"bad MAC {text!r}")
        try:
            octets = bytes(int(p, 16) for p in parts)
        except ValueError:
            raise ValueError(f"bad MAC {text!r}") from None
        if any(len(p) != 2 for p in parts):
            raise ValueError(f"bad MAC {text!r}")
        return cls(octets)

    @property
    def text(self) -> str:
        return ":".join(f"{b:02x}" for b in self.octets)

    @property
    def oui(self) -> str:
        """Manufacturer prefix: the first three octets."""
        return ":".join(f"{b:02x}" for b in self.octets[:3])

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class ApEvent:
    """One association row from the AP/DHCP log."""

    user_ip: str
    user_mac: MacAddress
    ap_name: str
    ap_mac: MacAddress
    lease_begin_ms: int
    lease_end_ms: int


@dataclass(frozen=True)
class FlowRecord:
    """One NetFlow row."""

    start_ms: int
    finish_ms: int
    duration_ms: int
    src_ip: str
    dst_ip: str
    protocol: Protocol
    src_port: int
    dst_port: int
    packet_count: int
    flow_bytes: int


@dataclass(frozen=True)
class Lease:
    """A derived MAC-IP-AP interval; the key used to attribute flows."""

    mac: MacAddress
    ip: str
    ap_mac: MacAddress
    building_id: str | None
    start_ms: int
    end_ms: int

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


@dataclass(frozen=True)
class CoreFlow:
    """A flow attributed to a device via lease containment."""

    flow: FlowRecord
    device_mac: MacAddress
    device_type: DeviceType
    ap_mac: MacAddress
    building_id: str | None
    direction: Direction


@dataclass(frozen=True)
class Building:
    id: str
    name: str
    category: BuildingCategory
    lat: float
    lon: float


@dataclass(frozen=True, order=True)
class DayKey:
    """Calendar date in the configured fixed-offset local time."""

    date: datetime.date
    is_weekend: bool

    @classmethod
    def from_ms(cls, ms: int, tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES) -> "DayKey":
        local_ms = ms + tz_offset_minutes * 60_000
        day_index = local_ms // MS_PER_DAY
        date = datetime.date(1970, 1, 1) + datetime.timedelta(days=day_index)
        return cls(date=date, is_weekend=date.weekday() >= 5)


def local_hour(ms: int, tz_offset_minutes: int = DEFAULT_TZ_OFFSET_MINUTES) -> int:
    """Hour of day (0-23) at the configured fixed offset."""
    local_ms = ms + tz_offset_minutes * 60_000
    return (local_ms % MS_PER_DAY) // MS_PER_HOUR


@dataclass(frozen=True)
class MobilityFeatures:
    """Per device per day: trajectory, dispersion and visitation metrics.

    Distances in meters, pdt/dlt in minutes.
    """

    ljm: float  # longest consecutive jump
    dia: float  # diameter: longest distance between any pair of positions
    tjm: float  # total trajectory length
    gyr: float  # radius of gyration
    bld: int    # distinct buildings
    apc: int    # distinct APs
    pdt: float  # session time at the preferred building
    dlt: float  # total session time

    FIELDS = ("ljm", "dia", "tjm", "gyr", "bld", "apc", "pdt", "dlt")


@dataclass(frozen=True)
class TrafficFeatures:
    """Per device per day: flow volume, activity and inter-arrival metrics.

    tby/aby/sby in bytes, tat/aat in minutes, ait/sit in seconds.
    """

    tby: int    # total flow bytes
    aby: float  # mean flow bytes
    sby: float  # std of flow bytes
    tat: float  # total active time
    aat: float  # mean active-period length
    tfc: int    # flow count
    sfc: float  # std of per-hour flow counts
    rub: float  # UDP bytes / total bytes
    ruf: float  # UDP flows / total flows
    ait: float  # mean inter-arrival time of the device's flows
    sit: float  # std of inter-arrival times

    FIELDS = ("tby", "aby", "sby", "tat", "aat", "tfc", "sfc", "rub", "ruf", "ait", "sit")


def _validate_ipv4(text: str) -> bool:
    parts = text.split(".")
    if len(parts) != 4:
        return False
    for p in parts:
        if not p.isdigit() or len(p) > 3:
            return False
        if int(p) > 255:
            return False
    return True


def validate(record: object) -> list[str]:
    """Check every semantic invariant of a core record.

    Returns the list of violated invariants, empty when the record is valid.
    Violations are data, not faults: parsers count them and move on.
    """
    v: list[str] = []
    if isinstance(record, ApEvent):
        if not _validate_ipv4(record.user_ip):
            v.append("user_ip is a dotted-quad IPv4")
        if record.lease_begin_ms > record.lease_end_ms:
            v.append("lease_begin <= lease_end")
    elif isinstance(record, FlowRecord):
        if not _validate_ipv4(record.src_ip):
            v.append("src_ip is a dotted-quad IPv4")
        if not _validate_ipv4(record.dst_ip):
            v.append("dst_ip is a dotted-quad IPv4")
        if record.finish_ms < record.start_ms:
            v.append("finish >= start")
        if abs(record.duration_ms - (record.finish_ms - record.start_ms)) > 1:
            v.append("duration matches finish - start within 1 ms")
        if not 0 <= record.src_port <= 65535:
            v.append("src_port in 0..65535")
        if not 0 <= record.dst_port <= 65535:
            v.append("dst_port in 0..65535")
        if record.packet_count < 0:
            v.append("packet_count >= 0")
        if record.flow_bytes < 0:
            v.append("flow_bytes >= 0")
        if record.flow_bytes > 0 and record.packet_count < 1:
            v.append("packet_count >= 1 when flow_bytes > 0")
    elif isinstance(record, Lease):
        if not _validate_ipv4(record.ip):
            v.append("ip is a dotted-quad IPv4")
        if record.start_ms >= record.end_ms:
            v.append("start < end")
    elif isinstance(record, CoreFlow):
        v.extend(validate(record.flow))
    elif isinstance(record, Building):
        if not abs(record.lat) <= 90:
            v.append("|lat| <= 90")
        if not abs(record.lon) <= 180:
            v.append("|lon| <= 180")
    elif isinstance(record, DayKey):
        if record.is_weekend != (record.date.weekday() >= 5):
            v.append("is_weekend iff Saturday/Sunday")
    elif isinstance(record, MobilityFeatures):
        if not (record.dia >= record.ljm >= 0):
            v.append("dia >= ljm >= 0")
        if record.tjm < record.ljm:
            v.append("tjm >= ljm")
        if min(record.gyr, record.bld, record.apc, record.pdt, record.dlt) < 0:
            v.append("all metrics >= 0")
    elif isinstance(record, TrafficFeatures):
        if not (0 <= record.rub <= 1):
            v.append("0 <= rub <= 1")
        if not (0 <= record.ruf <= 1):
            v.append("0 <= ruf <= 1")
        if record.tfc >= 1 and record.tby <= 0:
            v.append("tfc >= 1 implies tby > 0")
        if record.tby < 0 or record.tfc < 0:
            v.append("tby, tfc >= 0")
    else:
        raise TypeError(f"not a core record: {type(record).__name__}")
    return v

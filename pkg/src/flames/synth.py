"""Seeded synthetic campus traces with planted ground truth.

The generator builds a small campus (buildings on a disc, APs per building),
a device population with vendor prefixes, and a per-device daily routine:
sessions chain through the day (each association opens the next lease), a
departure association closes the last one, and flows are laid out in bursts
strictly inside their session. Every law the analysis recovers downstream is
planted here and recorded, with analytic expectations where they exist, in a
ground-truth manifest.

Devices differ by two latent traits drawn per device: a mobility level and a
traffic level, each in [0, 1], interpolating between a stop-to-use anchor
profile and an on-the-go anchor profile. The trait priors overlap across
device types, which is what keeps the downstream classifiers honest.

All randomness descends from one SeedSequence; each device owns a spawned
child stream, so output is reproducible regardless of generation order.
"""

from __future__ import annotations

import datetime
import json
import math
import os
from bisect import bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sstats

from flames.ingest import (
    BuildingRegistry,
    OuiLabel,
    format_ap_event_line,
    format_netflow_line,
    write_building_registry,
    write_dns_map,
    write_oui_labels,
)
from flames.model import (
    ApEvent,
    Building,
    BuildingCategory,
    DayKey,
    DeviceType,
    FlowRecord,
    LabelSource,
    MacAddress,
    Protocol,
)

TRUTH_FORMAT = "flames-truth-v1"

# Monday 2012-04-02 00:00 at UTC-4
DEFAULT_START_MS = int(datetime.datetime(
    2012, 4, 2, tzinfo=datetime.timezone(datetime.timedelta(minutes=-240))
).timestamp() * 1000)


class SpecInvalid(Exception):
    pass


@dataclass(frozen=True)
class TypeParams:
    """Planted per-type laws and behavior knobs.

    TCP flow sizes, packet counts and runtimes are lognormal; intra-burst
    gaps are scaled beta. Every device runs a UDP keepalive stream whose
    density follows its traffic level; devices far toward the stop-to-use
    end of that level also keep it up through overnight and weekend-bridge
    leases (left-behind laptops), which stretches their daily inter-arrival
    span while keeping the gaps uniform.
    """

    flow_size_mu: float
    flow_size_sigma: float
    packet_mu: float
    packet_sigma: float
    udp_size_mu: float
    udp_size_sigma: float
    iat_alpha: float
    iat_beta: float
    iat_scale_ms: float
    zipf_beta: float
    weekend_presence: float
    weekend_activity: float
    admob_prob: float
    traffic_level_a: float
    traffic_level_b: float
    mobility_level_a: float
    mobility_level_b: float
    device_scale_sigma: float
    trait_correlation: float

    def violations(self) -> list[str]:
        v = []
        for name in ("flow_size_sigma", "packet_sigma", "udp_size_sigma",
                     "iat_alpha", "iat_beta", "iat_scale_ms", "zipf_beta",
                     "traffic_level_a", "traffic_level_b",
                     "mobility_level_a", "mobility_level_b"):
            if getattr(self, name) <= 0:
                v.append(f"{name} must be positive")
        for name in ("weekend_presence", "weekend_activity", "admob_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                v.append(f"{name} must be in [0, 1]")
        if self.device_scale_sigma < 0:
            v.append("device_scale_sigma must be non-negative")
        if not -1.0 < self.trait_correlation < 1.0:
            v.append("trait_correlation must be in (-1, 1)")
        return v


FLUTE_DEFAULTS = TypeParams(
    flow_size_mu=math.log(678.0), flow_size_sigma=1.85,
    packet_mu=math.log(5.0), packet_sigma=0.831,
    udp_size_mu=math.log(297.5), udp_size_sigma=0.8,
    iat_alpha=0.075, iat_beta=12.5, iat_scale_ms=13080.0,
    zipf_beta=1.16,
    weekend_presence=0.80, weekend_activity=0.85,
    admob_prob=0.5,
    traffic_level_a=3.9, traffic_level_b=2.0,
    mobility_level_a=3.8, mobility_level_b=2.6,
    device_scale_sigma=0.3,
    trait_correlation=0.0,
)

CELLO_DEFAULTS = TypeParams(
    flow_size_mu=math.log(500.0), flow_size_sigma=2.25,
    packet_mu=math.log(2.0), packet_sigma=1.094,
    udp_size_mu=math.log(341.5), udp_size_sigma=0.8,
    iat_alpha=0.08, iat_beta=12.5, iat_scale_ms=22490.0,
    zipf_beta=1.36,
    weekend_presence=0.25, weekend_activity=1.0,
    admob_prob=0.0,
    traffic_level_a=2.0, traffic_level_b=3.9,
    mobility_level_a=2.6, mobility_level_b=3.8,
    device_scale_sigma=0.3,
    trait_correlation=0.0,
)

# anchor routine profiles the latent levels interpolate between
# (index 0 = stop-to-use, index 1 = on-the-go). Sessions chain back to back
# from wake to departure, so the duration mixture sets how fragmented a day
# is; a session's tail covers any idle time until the next association.
_ANCHOR = {
    "p_timeout": (0.12, 0.40),       # exact 5-minute sessions
    "p_hour": (0.30, 0.12),          # one-hour block
    "p_twohour": (0.30, 0.03),       # two-hour block
    "rest_mu": (math.log(7200.0), math.log(1500.0)),
    "rest_sigma": (0.8, 1.1),
    "pool": (3.5, 10.5),
    "depart_hour": (16.8, 22.3),
    "wake_hour": (9.0, 9.5),
    "ap_sticky": (0.75, 0.2),
    "tcp_share": (0.785, 0.982),
    "tcp_runtime_sigma": (1.8, 2.0),
}

# burst shape interpolates on a log scale: laptops make few large bursts,
# phones many small ones, and the quantities stay positive at any level
_ANCHOR_LOG = {
    "flows_per_burst": (83.5, 7.79),
    "bursts_per_hour": (0.234, 2.356),
    "tcp_runtime_ms": (850.0, 230.0),
    "trickle_interval_s": (2400.0, 21600.0),
    "trickle_runtime_scale": (1.2, 0.45),
}

# docked devices idle on a short, steady keepalive cadence overnight; the
# odds of staying docked fall steeply as the traffic level moves toward
# the on-the-go end
_NIGHT_TRICKLE_S = 900.0
_BULK_FACTOR = 1.6
_BULK_BASE = 0.5
_BULK_SLOPE = 0.12
_POWERED_MID = 0.5
_POWERED_SCALE = 0.06

_TCP_PORTS = np.array([80, 443, 8080, 22])
_TCP_PORT_W = np.array([0.45, 0.42, 0.08, 0.05])
_UDP_PORTS = np.array([53, 443, 5353])
_UDP_PORT_W = np.array([0.55, 0.3, 0.15])

AD_SERVERS = {
    "173.194.10.1": "media.admob.com",
    "173.194.10.2": "ads.admob.com",
}

# (oui, label, source); label None = deliberately absent from the label file
FLUTE_OUIS = [
    ("a0:11:22", DeviceType.FLUTE, LabelSource.SURVEY),
    ("a0:11:33", DeviceType.FLUTE, LabelSource.REGISTRY),
    ("b4:f0:ab", DeviceType.FLUTE, LabelSource.REGISTRY),
    ("cc:3a:61", DeviceType.FLUTE, LabelSource.REGISTRY),
    ("d0:13:fd", None, None),
    ("d4:61:9d", None, None),
]
CELLO_OUIS = [
    ("00:1e:c2", DeviceType.CELLO, LabelSource.SURVEY),
    ("00:21:6a", DeviceType.CELLO, LabelSource.REGISTRY),
    ("3c:97:0e", DeviceType.CELLO, LabelSource.REGISTRY),
    ("68:b5:99", DeviceType.CELLO, LabelSource.REGISTRY),
    ("f0:de:f1", None, None),
]
BOTH_OUI = "08:00:28"


@dataclass(frozen=True)
class PopulationSpec:
    flutes: int = 120
    cellos: int = 80
    days: int = 14
    buildings: int = 40
    aps_per_building: tuple[int, int] = (2, 6)
    servers: int = 150
    start_ms: int = DEFAULT_START_MS
    tz_offset_minutes: int = -240
    seed: int = 20120402
    campus_lat: float = 43.0
    campus_lon: float = -80.0
    campus_radius_m: float = 1416.0
    flute_params: TypeParams = FLUTE_DEFAULTS
    cello_params: TypeParams = CELLO_DEFAULTS

    def violations(self) -> list[str]:
        v = []
        if self.flutes < 0 or self.cellos < 0 or self.flutes + self.cellos == 0:
            v.append("population must contain at least one device")
        if self.days < 1:
            v.append("days must be >= 1")
        if self.buildings < 1:
            v.append("at least one building required")
        if not (1 <= self.aps_per_building[0] <= self.aps_per_building[1]):
            v.append("aps_per_building must be an increasing positive pair")
        if self.campus_radius_m <= 0:
            v.append("campus_radius_m must be positive")
        v.extend(f"flute_params: {m}" for m in self.flute_params.violations())
        v.extend(f"cello_params: {m}" for m in self.cello_params.violations())
        return v


@dataclass
class CampusMap:
    buildings: list[Building]
    ap_catalog: list[tuple[MacAddress, str, str]]  # (ap_mac, ap_name, building_id)
    rules: dict[str, str]                          # ap-name prefix -> building id
    aps_by_building: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        for i, (_, _, bid) in enumerate(self.ap_catalog):
            self.aps_by_building.setdefault(bid, []).append(i)


@dataclass
class World:
    spec: PopulationSpec
    events: list[ApEvent]
    flows: list[FlowRecord]
    campus: CampusMap
    oui_labels: dict[str, OuiLabel]
    dns_map: dict[str, str]
    truth: dict


def _lerp(pair: tuple[float, float], t: float) -> float:
    return pair[0] + (pair[1] - pair[0]) * t


def _lerp_log(pair: tuple[float, float], t: float) -> float:
    return math.exp(_lerp((math.log(pair[0]), math.log(pair[1])), t))


def _build_campus(spec: PopulationSpec, rng: np.random.Generator) -> CampusMap:
    categories = list(BuildingCategory)
    buildings = []
    ap_catalog: list[tuple[MacAddress, str, str]] = []
    rules: dict[str, str] = {}
    lat0 = math.radians(spec.campus_lat)
    for i in range(spec.buildings):
        r = spec.campus_radius_m * math.sqrt(rng.random())
        theta = 2.0 * math.pi * rng.random()
        lat = spec.campus_lat + math.degrees((r * math.sin(theta)) / 6371000.0)
        lon = spec.campus_lon + math.degrees((r * math.cos(theta)) / (6371000.0 * math.cos(lat0)))
        bid = f"B{i:03d}"
        buildings.append(Building(
            id=bid,
            name=f"Building {i:03d}",
            category=categories[i % len(categories)],
            lat=lat,
            lon=lon,
        ))
        rules[f"b{i:03d}"] = bid
        n_aps = int(rng.integers(spec.aps_per_building[0], spec.aps_per_building[1] + 1))
        for k in range(n_aps):
            mac = MacAddress.parse(f"00:1d:e5:{i % 256:02x}:{k:02x}:01")
            ap_catalog.append((mac, f"b{i:03d}r{k:03d}-ap{k}", bid))
    return CampusMap(buildings=buildings, ap_catalog=ap_catalog, rules=rules)


@dataclass
class _Device:
    index: int
    mac: MacAddress
    ip: str
    kind: DeviceType
    oui: str
    oui_labeled: bool
    params: TypeParams
    seed: np.random.SeedSequence
    size_scale: float = 1.0


def _make_devices(spec: PopulationSpec, root: np.random.SeedSequence) -> list[_Device]:
    devices = []
    flute_pool = FLUTE_OUIS + [(BOTH_OUI, DeviceType.UNKNOWN, LabelSource.REGISTRY)]
    cello_pool = CELLO_OUIS + [(BOTH_OUI, DeviceType.UNKNOWN, LabelSource.REGISTRY)]
    children = root.spawn(spec.flutes + spec.cellos)
    scale_z = []
    for d in range(spec.flutes + spec.cellos):
        is_flute = d < spec.flutes
        pool = flute_pool if is_flute else cello_pool
        oui, label, _ = pool[d % len(pool)]
        timeline_seed, scale_seed = children[d].spawn(2)
        scale_z.append(float(np.random.default_rng(scale_seed).standard_normal()))
        devices.append(_Device(
            index=d,
            mac=MacAddress.parse(f"{oui}:{(d >> 16) & 0xff:02x}:{(d >> 8) & 0xff:02x}:{d & 0xff:02x}"),
            ip=f"10.15.{d // 200}.{d % 200 + 10}",
            kind=DeviceType.FLUTE if is_flute else DeviceType.CELLO,
            oui=oui,
            oui_labeled=label is not None,
            params=spec.flute_params if is_flute else spec.cello_params,
            seed=timeline_seed,
        ))
    # center each cohort's log scale on zero so the pooled size median stays
    # at the planted median regardless of how few devices a run has
    z = np.asarray(scale_z)
    for lo, hi in ((0, spec.flutes), (spec.flutes, len(devices))):
        if hi - lo == 0:
            continue
        centered = z[lo:hi] - np.median(z[lo:hi])
        for j, dev in enumerate(devices[lo:hi]):
            dev.size_scale = math.exp(dev.params.device_scale_sigma * float(centered[j]))
    return devices


def _session_duration(rng: np.random.Generator, mix: dict[str, float]) -> float:
    """One planted session duration in seconds."""
    u = rng.random()
    if u < mix["p_timeout"]:
        return 300.0
    u -= mix["p_timeout"]
    if u < mix["p_hour"]:
        return max(600.0, rng.normal(3600.0, 240.0))
    u -= mix["p_hour"]
    if u < mix["p_twohour"]:
        return max(600.0, rng.normal(7200.0, 420.0))
    return float(np.clip(math.exp(rng.normal(mix["rest_mu"], mix["rest_sigma"])), 30.0, 14400.0))


def _burst_flows(
    rng: np.random.Generator,
    p: TypeParams,
    sess_start_ms: int,
    sess_end_ms: int,
    device_ip: str,
    servers: list[str],
    tcp_share: float,
    size_scale: float,
    size_sigma: float,
    runtime_mu: float,
    runtime_sigma: float,
    flows_per_burst: float,
) -> list[FlowRecord]:
    room_ms = sess_end_ms - sess_start_ms - 2000
    if room_ms <= 0:
        return []
    k = 1 + int(rng.poisson(max(flows_per_burst - 1.0, 0.0)))
    gaps = rng.beta(p.iat_alpha, p.iat_beta, size=k - 1) * p.iat_scale_ms if k > 1 else np.empty(0)
    offsets = np.concatenate([[0.0], np.cumsum(gaps)])
    span = float(offsets[-1])
    if span > room_ms:
        keep = offsets <= room_ms
        offsets = offsets[keep]
        k = offsets.size
        span = float(offsets[-1])
    t0 = sess_start_ms + 1000 + int(rng.random() * max(room_ms - span, 1.0))
    runtimes = np.maximum(np.exp(rng.normal(runtime_mu, runtime_sigma, size=k)), 1.0)
    is_tcp = rng.random(size=k) < tcp_share
    tcp_sizes = np.exp(rng.normal(p.flow_size_mu, size_sigma, size=k)) * size_scale
    udp_sizes = np.exp(rng.normal(p.udp_size_mu, p.udp_size_sigma, size=k)) * size_scale
    packets = np.maximum(np.rint(np.exp(rng.normal(p.packet_mu, p.packet_sigma, size=k))), 1.0)
    inbound = rng.random(size=k) < 0.55
    server_idx = rng.integers(0, len(servers), size=k)
    tcp_ports = rng.choice(_TCP_PORTS, size=k, p=_TCP_PORT_W)
    udp_ports = rng.choice(_UDP_PORTS, size=k, p=_UDP_PORT_W)
    ephemeral = rng.integers(40000, 60000, size=k)
    flows = []
    for j in range(k):
        start = t0 + int(offsets[j])
        finish = start + int(min(runtimes[j], sess_end_ms - 1000 - start))
        proto = Protocol.TCP if is_tcp[j] else Protocol.UDP
        size = int(max(40.0, round(tcp_sizes[j] if is_tcp[j] else udp_sizes[j])))
        service_port = int(tcp_ports[j] if is_tcp[j] else udp_ports[j])
        server = servers[int(server_idx[j])]
        if inbound[j]:
            src_ip, dst_ip = server, device_ip
            src_port, dst_port = service_port, int(ephemeral[j])
        else:
            src_ip, dst_ip = device_ip, server
            src_port, dst_port = int(ephemeral[j]), service_port
        flows.append(FlowRecord(
            start_ms=start,
            finish_ms=finish,
            duration_ms=finish - start,
            src_ip=src_ip,
            dst_ip=dst_ip,
            protocol=proto,
            src_port=src_port,
            dst_port=dst_port,
            packet_count=int(packets[j]),
            flow_bytes=size,
        ))
    return flows


def _ad_flows(
    rng: np.random.Generator,
    sess_start_ms: int,
    sess_end_ms: int,
    device_ip: str,
    ad_ips: list[str],
) -> list[FlowRecord]:
    room = sess_end_ms - sess_start_ms - 3000
    if room <= 0:
        return []
    n = int(rng.integers(1, 4))
    flows = []
    for _ in range(n):
        start = sess_start_ms + 1000 + int(rng.random() * room)
        runtime = int(max(1.0, rng.normal(400.0, 150.0)))
        finish = min(start + runtime, sess_end_ms - 1000)
        flows.append(FlowRecord(
            start_ms=start,
            finish_ms=finish,
            duration_ms=finish - start,
            src_ip=device_ip,
            dst_ip=ad_ips[int(rng.integers(0, len(ad_ips)))],
            protocol=Protocol.TCP,
            src_port=int(rng.integers(40000, 60000)),
            dst_port=80,
            packet_count=int(rng.integers(2, 6)),
            flow_bytes=int(max(120.0, rng.normal(520.0, 160.0))),
        ))
    return flows


def _trickle_flows(
    rng: np.random.Generator,
    p: TypeParams,
    interval_s: float,
    runtime_scale: float,
    size_scale: float,
    windows_s: list[tuple[int, int]],
    assoc_begins_s: list[int],
    device_ip: str,
    servers: list[str],
    tz_offset_minutes: int,
) -> list[FlowRecord]:
    """Keepalive stream over the device's powered windows.

    Every flow is clamped inside the lease interval its start falls in and
    never crosses a local midnight, keeping attribution unambiguous.
    """
    flows = []
    sigma_s = 0.25 * interval_s
    for w_start, w_end in windows_s:
        t = float(w_start) + abs(rng.normal(interval_s, sigma_s))
        while t < w_end - 120:
            start_ms = int(t) * 1000 + int(rng.integers(0, 1000))
            runtime_ms = int(rng.uniform(20_000, 60_000) * runtime_scale)
            local_ms = start_ms + tz_offset_minutes * 60_000
            room_to_midnight = 86_400_000 - local_ms % 86_400_000 - 1000
            j = bisect_right(assoc_begins_s, int(t)) - 1
            room_in_lease = assoc_begins_s[j + 1] * 1000 - 500 - start_ms
            cap_ms = min(room_to_midnight, room_in_lease)
            t += max(120.0, rng.normal(interval_s, sigma_s))
            if cap_ms < 500:
                continue
            flows.append(FlowRecord(
                start_ms=start_ms,
                finish_ms=start_ms + min(runtime_ms, cap_ms),
                duration_ms=min(runtime_ms, cap_ms),
                src_ip=device_ip,
                dst_ip=servers[int(rng.integers(0, len(servers)))],
                protocol=Protocol.UDP,
                src_port=int(rng.integers(40000, 60000)),
                dst_port=int(rng.choice(_UDP_PORTS, p=_UDP_PORT_W)),
                packet_count=int(rng.integers(2, 6)),
                flow_bytes=int(max(40.0, round(math.exp(rng.normal(p.udp_size_mu, p.udp_size_sigma)) * size_scale))),
            ))
    return flows


def _device_timeline(
    dev: _Device,
    spec: PopulationSpec,
    campus: CampusMap,
    servers: list[str],
    ad_ips: list[str],
) -> tuple[list[ApEvent], list[FlowRecord]]:
    rng = np.random.default_rng(dev.seed)
    p = dev.params
    # the two latent levels share a Gaussian copula: marginals stay Beta,
    # but a device that moves a lot also tends to push more traffic
    g_mob = rng.standard_normal()
    g_tr = p.trait_correlation * g_mob \
        + math.sqrt(1.0 - p.trait_correlation ** 2) * rng.standard_normal()
    t_mob = float(sstats.beta.ppf(sstats.norm.cdf(g_mob),
                                  p.mobility_level_a, p.mobility_level_b))
    t_tr = float(sstats.beta.ppf(sstats.norm.cdf(g_tr),
                                 p.traffic_level_a, p.traffic_level_b))
    size_scale = dev.size_scale
    size_sigma = p.flow_size_sigma * rng.uniform(0.85, 1.15)
    runtime_mu = math.log(_lerp_log(_ANCHOR_LOG["tcp_runtime_ms"], t_tr)) \
        + rng.normal(0.0, 1.0)
    runtime_sigma = _lerp(_ANCHOR["tcp_runtime_sigma"], t_tr)
    tcp_mean = _lerp(_ANCHOR["tcp_share"], t_tr)
    kappa = 8.0
    tcp_share = float(rng.beta(tcp_mean * kappa, (1.0 - tcp_mean) * kappa))
    # keepalive habit follows the traffic level, with per-device spread on
    # top: how often it fires and how long each exchange runs
    trickle_interval = _lerp_log(_ANCHOR_LOG["trickle_interval_s"], t_tr) \
        * math.exp(rng.normal(0.0, 0.4))
    trickle_runtime_scale = _lerp_log(_ANCHOR_LOG["trickle_runtime_scale"], t_tr) \
        * math.exp(rng.normal(0.0, 0.4))
    powered = rng.random() < 1.0 / (1.0 + math.exp((t_tr - _POWERED_MID) / _POWERED_SCALE))
    pool_n = max(2, min(int(round(_lerp(_ANCHOR["pool"], t_mob))), len(campus.buildings)))
    pool = rng.choice(len(campus.buildings), size=pool_n, replace=False)
    zipf_w = np.arange(1, pool_n + 1, dtype=float) ** (-p.zipf_beta)
    zipf_w /= zipf_w.sum()
    mix = {
        "p_timeout": _lerp(_ANCHOR["p_timeout"], t_mob),
        "p_hour": _lerp(_ANCHOR["p_hour"], t_mob),
        "p_twohour": _lerp(_ANCHOR["p_twohour"], t_mob),
        "rest_mu": _lerp(_ANCHOR["rest_mu"], t_mob),
        "rest_sigma": _lerp(_ANCHOR["rest_sigma"], t_mob),
    }
    depart_mean = _lerp(_ANCHOR["depart_hour"], t_tr)
    wake_mean = _lerp(_ANCHOR["wake_hour"], t_mob)
    sticky = _lerp(_ANCHOR["ap_sticky"], t_mob)
    flows_per_burst = _lerp_log(_ANCHOR_LOG["flows_per_burst"], t_tr)
    bursts_per_hour = _lerp_log(_ANCHOR_LOG["bursts_per_hour"], t_tr)

    events: list[ApEvent] = []
    flows: list[FlowRecord] = []
    day_windows: list[tuple[int, int]] = []
    prev_ap_idx: int | None = None
    for day in range(spec.days):
        day_start_ms = spec.start_ms + day * 86_400_000
        is_weekend = DayKey.from_ms(day_start_ms, spec.tz_offset_minutes).is_weekend
        if is_weekend and rng.random() > p.weekend_presence:
            continue
        u_day = math.exp(rng.normal(0.0, 0.26))
        intensity = u_day * (p.weekend_activity if is_weekend else 1.0)
        wake_h = float(np.clip(rng.normal(wake_mean, 0.8), 6.0, 13.0))
        depart_h = float(np.clip(rng.normal(depart_mean, 0.7), wake_h + 0.5, 23.5))
        if is_weekend:
            # weekends contract the active window, not the session texture
            depart_h = wake_h + (depart_h - wake_h) * p.weekend_activity
        cursor_s = day_start_ms // 1000 + int(wake_h * 3600)
        depart_limit_s = day_start_ms // 1000 + int(depart_h * 3600)
        sessions: list[tuple[int, int, float]] = []
        while cursor_s < depart_limit_s:
            duration = min(_session_duration(rng, mix), float(depart_limit_s - cursor_s))
            duration = max(duration, 1.0)
            rank = int(rng.choice(pool_n, p=zipf_w))
            bid = campus.buildings[int(pool[rank])].id
            ap_choices = campus.aps_by_building[bid]
            if prev_ap_idx is not None and campus.ap_catalog[prev_ap_idx][2] == bid and rng.random() < sticky:
                ap_idx = prev_ap_idx
            else:
                ap_idx = int(ap_choices[int(rng.integers(0, len(ap_choices)))])
            prev_ap_idx = ap_idx
            ap_mac, ap_name, _ = campus.ap_catalog[ap_idx]
            begin_ms = cursor_s * 1000
            end_ms = (cursor_s + int(rng.integers(2, 6))) * 1000
            events.append(ApEvent(
                user_ip=dev.ip, user_mac=dev.mac, ap_name=ap_name, ap_mac=ap_mac,
                lease_begin_ms=begin_ms, lease_end_ms=end_ms,
            ))
            sess_end_s = cursor_s + int(round(duration))
            sessions.append((begin_ms, sess_end_s * 1000, duration / 3600.0))
            cursor_s = sess_end_s
        # settled days run at a batch tempo: the fewer the sessions, the more
        # likely the day's flows pile into a handful of heavy bursts instead
        # of a steady drip. Expected volume is unchanged.
        p_bulk = min(max(_BULK_BASE - _BULK_SLOPE * (len(sessions) - 1), 0.05), 0.8)
        tempo = _BULK_FACTOR if rng.random() < p_bulk else 1.0
        for begin_ms, sess_end_ms, duration_h in sessions:
            n_bursts = max(1, int(rng.poisson(
                bursts_per_hour / tempo * duration_h * intensity + 0.2)))
            for _ in range(n_bursts):
                flows.extend(_burst_flows(
                    rng, p, begin_ms, sess_end_ms, dev.ip, servers,
                    tcp_share, size_scale, size_sigma, runtime_mu,
                    runtime_sigma, flows_per_burst * tempo,
                ))
            if p.admob_prob > 0 and rng.random() < p.admob_prob / 8.0:
                flows.extend(_ad_flows(rng, begin_ms, sess_end_ms, dev.ip, ad_ips))
        # departure association closes the last intra-day session
        assert prev_ap_idx is not None  # the day loop always emits a session
        ap_mac, ap_name, _ = campus.ap_catalog[prev_ap_idx]
        events.append(ApEvent(
            user_ip=dev.ip, user_mac=dev.mac, ap_name=ap_name, ap_mac=ap_mac,
            lease_begin_ms=cursor_s * 1000,
            lease_end_ms=(cursor_s + int(rng.integers(2, 6))) * 1000,
        ))
        day_windows.append((day_start_ms // 1000 + int(wake_h * 3600), cursor_s))
    if len(events) >= 2:
        # chained leases cover first association .. final departure
        begins = [e.lease_begin_ms // 1000 for e in events]
        flows.extend(_trickle_flows(
            rng, p, trickle_interval, trickle_runtime_scale, size_scale,
            day_windows, begins, dev.ip, servers, spec.tz_offset_minutes,
        ))
        if powered and len(day_windows) >= 2:
            # docked overnight and across absent weekends: steady cadence,
            # so idle stretches stay uniform rather than silent
            nights = [(day_windows[i][1], day_windows[i + 1][0])
                      for i in range(len(day_windows) - 1)]
            flows.extend(_trickle_flows(
                rng, p, _NIGHT_TRICKLE_S, 1.5 * math.exp(rng.normal(0.0, 0.5)),
                size_scale, nights, begins, dev.ip, servers, spec.tz_offset_minutes,
            ))
    return events, flows


def _lognormal_mean(mu: float, sigma: float, extra_sigma: float = 0.0) -> float:
    return math.exp(mu + (sigma * sigma + extra_sigma * extra_sigma) / 2.0)


def _truth(spec: PopulationSpec, devices: list[_Device], campus: CampusMap,
           n_events: int, n_flows: int) -> dict:
    planted = {}
    expected = {}
    for kind, p in (("flute", spec.flute_params), ("cello", spec.cello_params)):
        planted[kind] = {
            "tcp_flow_size": {"family": "lognormal", "mu": p.flow_size_mu,
                              "sigma": p.flow_size_sigma,
                              "sigma_jitter": [0.85, 1.15],
                              "device_scale_sigma": p.device_scale_sigma},
            "tcp_packets": {"family": "lognormal", "mu": p.packet_mu, "sigma": p.packet_sigma},
            "tcp_runtime_ms": {"family": "lognormal",
                               "median_anchor_ms": list(_ANCHOR_LOG["tcp_runtime_ms"]),
                               "sigma_anchor": list(_ANCHOR["tcp_runtime_sigma"]),
                               "device_log_sigma": 1.0},
            "udp_size": {"family": "lognormal", "mu": p.udp_size_mu, "sigma": p.udp_size_sigma},
            "burst_iat_ms": {"family": "beta", "alpha": p.iat_alpha, "beta": p.iat_beta,
                             "scale": p.iat_scale_ms},
            "zipf_beta": p.zipf_beta,
            "weekend_presence": p.weekend_presence,
            "weekend_activity": p.weekend_activity,
            "admob_prob": p.admob_prob,
            "powered_overnight": {"trait_midpoint": _POWERED_MID,
                                  "trait_scale": _POWERED_SCALE},
            "tempo_mode": {"bulk_factor": _BULK_FACTOR,
                           "p_bulk_base": _BULK_BASE,
                           "p_bulk_session_slope": _BULK_SLOPE},
            "trickle": {
                "interval_anchor_s": list(_ANCHOR_LOG["trickle_interval_s"]),
                "runtime_scale_anchor": list(_ANCHOR_LOG["trickle_runtime_scale"]),
                "runtime_base_s": [20.0, 60.0],
                "device_log_sigma": 0.4,
            },
            "traffic_level": [p.traffic_level_a, p.traffic_level_b],
            "mobility_level": [p.mobility_level_a, p.mobility_level_b],
            "trait_correlation": p.trait_correlation,
        }
        t_bar = p.traffic_level_a / (p.traffic_level_a + p.traffic_level_b)
        rt_mu = math.log(_lerp_log(_ANCHOR_LOG["tcp_runtime_ms"], t_bar))
        rt_sig = _lerp(_ANCHOR["tcp_runtime_sigma"], t_bar)
        rt_span = math.log(_ANCHOR_LOG["tcp_runtime_ms"][0] / _ANCHOR_LOG["tcp_runtime_ms"][1])
        rt_var = rt_span * rt_span * (t_bar * (1.0 - t_bar)
                                      / (p.traffic_level_a + p.traffic_level_b + 1.0))
        # device-level size jitter is median preserving, so the population of
        # TCP sizes is lognormal with the same mu and a widened sigma
        expected[kind] = {
            "tcp_size_log_mu": p.flow_size_mu,
            "tcp_size_log_sigma": math.hypot(p.flow_size_sigma, p.device_scale_sigma),
            "tcp_size_median": math.exp(p.flow_size_mu),
            "tcp_size_mean": _lognormal_mean(p.flow_size_mu, p.flow_size_sigma,
                                             p.device_scale_sigma),
            "tcp_packets_log_mu": p.packet_mu,
            "tcp_packets_log_sigma": p.packet_sigma,
            "tcp_runtime_log_mu": rt_mu,
            "tcp_runtime_log_sigma": math.sqrt(rt_sig * rt_sig + 1.0 + rt_var),
        }
    # which type has the larger per-day mean, by construction of the defaults:
    # flutes roam (trajectory and diversity metrics), cellos camp and push
    # volume; cellos keep the longer overnight and weekend-bridge leases
    directions = {
        "ljm": "flute", "dia": "flute", "tjm": "flute", "gyr": "flute",
        "bld": "flute", "apc": "flute", "pdt": "cello", "dlt": "cello",
        "tby": "cello", "aby": "cello", "sby": "cello", "tat": "cello",
        "aat": "cello", "tfc": "cello", "sfc": "cello", "rub": "cello",
        "ruf": "cello", "ait": "cello", "sit": "flute",
    }
    return {
        "format": TRUTH_FORMAT,
        "seed": spec.seed,
        "days": spec.days,
        "start_ms": spec.start_ms,
        "tz_offset_minutes": spec.tz_offset_minutes,
        "counts": {
            "flutes": spec.flutes,
            "cellos": spec.cellos,
            "buildings": len(campus.buildings),
            "aps": len(campus.ap_catalog),
            "events": n_events,
            "flows": n_flows,
        },
        "devices": {
            d.mac.text: {
                "type": d.kind.value,
                "oui": d.oui,
                "ip": d.ip,
                "oui_labeled": d.oui_labeled,
            }
            for d in devices
        },
        "planted": planted,
        "expected": expected,
        "mean_directions": directions,
        "boundary_crossing_flows": 0,
    }


def generate_world(spec: PopulationSpec, threads: int = 1) -> World:
    """Build the full synthetic world in memory.

    Each device's timeline comes from its own spawned seed and touches no
    shared state, so timelines may be computed on `threads` workers; results
    are collected in device order and the output is identical for any count.
    """
    problems = spec.violations()
    if problems:
        raise SpecInvalid("; ".join(problems))
    root = np.random.SeedSequence(spec.seed)
    world_seed, device_root = root.spawn(2)
    world_rng = np.random.default_rng(world_seed)
    campus = _build_campus(spec, world_rng)
    servers = [f"93.184.{j // 250}.{j % 250 + 1}" for j in range(spec.servers)]
    ad_ips = sorted(AD_SERVERS)
    devices = _make_devices(spec, device_root)

    events: list[ApEvent] = []
    flows: list[FlowRecord] = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda dev: _device_timeline(dev, spec, campus, servers, ad_ips),
                devices,
            ))
    else:
        results = [_device_timeline(dev, spec, campus, servers, ad_ips)
                   for dev in devices]
    for ev, fl in results:
        events.extend(ev)
        flows.extend(fl)
    events.sort(key=lambda e: (e.lease_begin_ms, e.user_mac.text, e.ap_mac.text))
    flows.sort(key=lambda f: (f.start_ms, f.src_ip, f.dst_ip, f.src_port, f.dst_port,
                              f.flow_bytes, f.packet_count))

    labels = {
        oui: OuiLabel(oui=oui, label=label, source=source)
        for oui, label, source in FLUTE_OUIS + CELLO_OUIS
        if label is not None
    }
    labels[BOTH_OUI] = OuiLabel(oui=BOTH_OUI, label=None, source=LabelSource.REGISTRY)

    dns_map = dict(AD_SERVERS)
    for j, ip in enumerate(servers):
        if j % 3 == 0:
            dns_map[ip] = f"svc{j:03d}.campus.example.edu"

    truth = _truth(spec, devices, campus, len(events), len(flows))
    return World(
        spec=spec,
        events=events,
        flows=flows,
        campus=campus,
        oui_labels=labels,
        dns_map=dns_map,
        truth=truth,
    )


def write_world(world: World, out_dir: str | os.PathLike) -> dict[str, str]:
    """Emit the raw logs, registries and the ground-truth manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "ap_log": str(out / "ap_log.csv"),
        "netflow": str(out / "netflow.csv"),
        "buildings": str(out / "buildings.csv"),
        "oui": str(out / "oui.csv"),
        "dnsmap": str(out / "dnsmap.csv"),
        "truth": str(out / "truth.json"),
    }
    with open(paths["ap_log"], "w", encoding="utf-8") as fh:
        for e in world.events:
            fh.write(format_ap_event_line(e) + "\n")
    with open(paths["netflow"], "w", encoding="utf-8") as fh:
        for f in world.flows:
            fh.write(format_netflow_line(f) + "\n")
    registry = BuildingRegistry(
        buildings={b.id: b for b in world.campus.buildings},
        rules=dict(world.campus.rules),
    )
    write_building_registry(paths["buildings"], registry)
    write_oui_labels(paths["oui"], world.oui_labels)
    write_dns_map(paths["dnsmap"], world.dns_map)
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(world.truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths


def generate_traces(spec: PopulationSpec, out_dir: str | os.PathLike) -> tuple[dict, dict[str, str]]:
    """Generate and write a world; returns (truth manifest, file paths)."""
    world = generate_world(spec)
    paths = write_world(world, out_dir)
    return world.truth, paths


def synthesize_features(models: dict, n_per_type: int, seed: int = 0) -> dict:
    """Sample daily feature rows from per-type mixture models.

    `models` maps a device-type name to a fitted GmmModel; the result maps
    the same keys to arrays with the model's feature columns.
    """
    from flames.learn import gmm_sample

    out = {}
    for i, (kind, model) in enumerate(sorted(models.items())):
        out[kind] = gmm_sample(model, n_per_type, seed=seed + i)
    return out

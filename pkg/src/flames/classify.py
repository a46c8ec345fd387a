"""Label devices as flutes or cellos from the vendor prefix of their MAC.

Labels attach to OUIs, not to individual MACs. Survey answers outrank the
vendor registry, which outranks the traffic heuristic; an OUI that ships in
both phone and laptop lines stays Unknown no matter what the lower tiers say.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from flames.ingest import OuiLabel
from flames.model import CoreFlow, DeviceType, Direction, LabelSource, MacAddress

_PRIORITY = {
    LabelSource.SURVEY: 3,
    LabelSource.REGISTRY: 2,
    LabelSource.HEURISTIC: 1,
}


def classify_by_oui(labels: Iterable[OuiLabel]) -> dict[str, DeviceType]:
    """Resolve per-OUI labels, highest priority source wins.

    Within one source tier a "both" entry (or contradictory labels) yields
    Unknown. Returns oui text -> device type, Unknown entries included.
    """
    best: dict[str, OuiLabel] = {}
    for label in labels:
        held = best.get(label.oui)
        if held is None or _PRIORITY[label.source] > _PRIORITY[held.source]:
            best[label.oui] = label
        elif _PRIORITY[label.source] == _PRIORITY[held.source]:
            if label.is_both or held.is_both or label.label != held.label:
                best[label.oui] = OuiLabel(oui=label.oui, label=None, source=label.source)
    return {
        oui: DeviceType.UNKNOWN if l.is_both or l.label is None else l.label
        for oui, l in best.items()
    }


def admob_heuristic(
    core: Iterable[CoreFlow],
    resolved: dict[str, DeviceType],
    ad_ips: set[str],
    min_flows: int = 1,
) -> dict[str, DeviceType]:
    """Promote unlabeled OUIs that talk to mobile-ad servers to Flute.

    Only OUIs absent from `resolved` are eligible: the heuristic never
    overrides or demotes an existing label, so applying it twice is a no-op.
    The remote endpoint of a flow is the side opposite the device.
    """
    hits: Counter[str] = Counter()
    for cf in core:
        oui = cf.device_mac.oui
        if oui in resolved:
            continue
        remote = cf.flow.dst_ip if cf.direction is Direction.OUTBOUND else cf.flow.src_ip
        if remote in ad_ips:
            hits[oui] += 1
    out = dict(resolved)
    for oui, n in hits.items():
        if n >= min_flows:
            out[oui] = DeviceType.FLUTE
    return out


def device_types(
    macs: Iterable[MacAddress], resolved: dict[str, DeviceType]
) -> dict[MacAddress, DeviceType]:
    """Expand OUI labels to concrete devices; unlisted OUIs are Unknown."""
    return {mac: resolved.get(mac.oui, DeviceType.UNKNOWN) for mac in macs}


@dataclass
class ClassificationReport:
    devices: int = 0
    flutes: int = 0
    cellos: int = 0
    unknown: int = 0
    by_source: Counter = field(default_factory=Counter)

    @property
    def labeled_fraction(self) -> float:
        return (self.flutes + self.cellos) / self.devices if self.devices else 0.0


def classification_report(
    macs: Iterable[MacAddress],
    resolved: dict[str, DeviceType],
    sources: dict[str, LabelSource] | None = None,
) -> ClassificationReport:
    report = ClassificationReport()
    for mac in macs:
        report.devices += 1
        kind = resolved.get(mac.oui, DeviceType.UNKNOWN)
        if kind is DeviceType.FLUTE:
            report.flutes += 1
        elif kind is DeviceType.CELLO:
            report.cellos += 1
        else:
            report.unknown += 1
        if sources and mac.oui in sources and kind is not DeviceType.UNKNOWN:
            report.by_source[sources[mac.oui].value] += 1
    return report


def label_sources(labels: Iterable[OuiLabel]) -> dict[str, LabelSource]:
    """The winning source tier per OUI, for reporting."""
    best: dict[str, LabelSource] = {}
    for label in labels:
        held = best.get(label.oui)
        if held is None or _PRIORITY[label.source] > _PRIORITY[held]:
            best[label.oui] = label.source
    return best

"""flames: fuse WLAN association logs with NetFlow records, classify devices,
and derive mobility/traffic metrics, distribution fits and mixture models."""

from flames.model import (
    ApEvent,
    Building,
    BuildingCategory,
    CoreFlow,
    DayKey,
    DeviceType,
    Direction,
    FlowRecord,
    LabelSource,
    Lease,
    MacAddress,
    MobilityFeatures,
    Protocol,
    TrafficFeatures,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "ApEvent",
    "Building",
    "BuildingCategory",
    "CoreFlow",
    "DayKey",
    "DeviceType",
    "Direction",
    "FlowRecord",
    "LabelSource",
    "Lease",
    "MacAddress",
    "MobilityFeatures",
    "Protocol",
    "TrafficFeatures",
    "validate",
    "__version__",
]

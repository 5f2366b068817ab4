"""Desk-scale digital-twin platform for a radio access network.

Subsystems: model language (``modeling``), twin engine (``engine``), event
fabric (``events``), RAN emulator (``emulator``), sync bridge (``bridge``),
what-if tooling (``whatif``), cost metering (``costing``), and the
measurement harness (``bench``, ``scenario``, ``cli``).
"""

from .bridge import BridgeConfig, CapacityPlan, RanTwinBridge, plan_capacity
from .costing import PriceTable, UsageMeter, hourly_cost
from .emulator import EmulatorConfig, RanNetwork, create_network
from .engine import Engine, ServiceLimits, create_instance
from .errors import RanTwinError
from .events import EventFabric, RouteFilter, SinkEndpoint, TwinRouteEndpoint
from .modeling import ModelRegistry, builtin_models, parse_model, serialize_model, validate_patch
from .whatif import Deployment, DiffReport, Snapshot, diff, drive_scenario, snapshot, spawn_copies

__all__ = [
    "BridgeConfig",
    "CapacityPlan",
    "Deployment",
    "DiffReport",
    "EmulatorConfig",
    "Engine",
    "EventFabric",
    "ModelRegistry",
    "PriceTable",
    "RanNetwork",
    "RanTwinBridge",
    "RanTwinError",
    "RouteFilter",
    "ServiceLimits",
    "SinkEndpoint",
    "Snapshot",
    "TwinRouteEndpoint",
    "UsageMeter",
    "builtin_models",
    "create_instance",
    "create_network",
    "diff",
    "drive_scenario",
    "hourly_cost",
    "parse_model",
    "plan_capacity",
    "serialize_model",
    "snapshot",
    "spawn_copies",
    "validate_patch",
]

__version__ = "0.1.0"

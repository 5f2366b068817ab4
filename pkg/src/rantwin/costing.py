"""Usage metering and the published-price cost model.

Meter mapping: *messages* are dispatched twin/relationship update calls;
*operations* are queries plus relationship/instance/twin management calls;
event-hub messages count one per routed change event. Query units and
function executions have their own counters, and sink ingestion is metered
in bytes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from .errors import UnknownKind

KINDS = (
    "message",
    "operation",
    "eventhub_message",
    "query_units",
    "function_execution",
    "ingest_bytes",
)


@dataclass
class PriceTable:
    """Unit prices in US dollars."""

    per_million_messages: float = 1.0
    per_million_operations: float = 2.5
    eventhub_hourly_per_tu: float = 0.06
    eventhub_per_million_messages: float = 0.03
    data_explorer_hourly: float = 1.5
    per_million_query_units: float = 0.50
    per_million_function_executions: float = 0.20

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_config(cls, config: dict) -> "PriceTable":
        return cls(**config)


class UsageMeter:
    """Monotone billing counters; safe for concurrent increments."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.counters: dict[str, float] = {k: 0 for k in KINDS}
        self.throughput_units = 0
        self.data_explorer_engaged = False

    def record(self, kind: str, amount: float = 1) -> "UsageMeter":
        if kind not in self.counters:
            raise UnknownKind(kind)
        if amount < 0:
            raise ValueError(f"amount must be >= 0, got {amount}")
        with self._lock:
            self.counters[kind] += amount
        return self

    def engage_event_hub(self, throughput_units: int = 2) -> None:
        self.throughput_units = max(self.throughput_units, throughput_units)

    def engage_data_explorer(self) -> None:
        self.data_explorer_engaged = True

    def snapshot(self) -> dict[str, float]:
        with self._lock:
            return dict(self.counters)

    def window(self, since: dict[str, float]) -> dict[str, float]:
        now = self.snapshot()
        return {k: now[k] - since.get(k, 0) for k in now}


@dataclass
class CostBreakdown:
    twin_platform: float
    event_hub: float
    data_explorer: float
    query_units: float
    function_executions: float

    @property
    def total(self) -> float:
        return (
            self.twin_platform
            + self.event_hub
            + self.data_explorer
            + self.query_units
            + self.function_executions
        )

    def to_dict(self) -> dict[str, float]:
        return {
            "twin_platform": round(self.twin_platform, 6),
            "event_hub": round(self.event_hub, 6),
            "data_explorer": round(self.data_explorer, 6),
            "query_units": round(self.query_units, 6),
            "function_executions": round(self.function_executions, 6),
            "total": round(self.total, 6),
        }


def hourly_cost(
    hourly_counters: dict[str, float],
    prices: PriceTable | None = None,
    throughput_units: int = 0,
    data_explorer: bool = False,
) -> CostBreakdown:
    """Dollars per hour for counters already normalized to one hour.

    Usage-proportional items scale linearly; fixed hourly items (event-hub
    throughput units, data explorer) are added once per engaged service.
    """
    p = prices or PriceTable()
    get = hourly_counters.get
    return CostBreakdown(
        twin_platform=(
            get("message", 0) / 1e6 * p.per_million_messages
            + get("operation", 0) / 1e6 * p.per_million_operations
        ),
        event_hub=(
            throughput_units * p.eventhub_hourly_per_tu
            + get("eventhub_message", 0) / 1e6 * p.eventhub_per_million_messages
        ),
        data_explorer=p.data_explorer_hourly if data_explorer else 0.0,
        query_units=get("query_units", 0) / 1e6 * p.per_million_query_units,
        function_executions=get("function_execution", 0) / 1e6 * p.per_million_function_executions,
    )


def record(meter: UsageMeter, kind: str, amount: float = 1) -> UsageMeter:
    return meter.record(kind, amount)

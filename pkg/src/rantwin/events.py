"""Event fabric: routes per-property change events to endpoints.

Two endpoint families exist. A *sink* deduplicates the stream into
latest-value rows (the data-warehouse path): within each cache interval it
keeps the newest value per (twin, property) key, and appends the flushed rows
to an append-only JSONL file (with a CSV mirror) once per ingest window. The
cache interval is the calibrated reduction knob between the raw event rate
and the stored volume. A *twin route* forwards selected events as
single-property patches onto a twin in another instance, preserving the
original sourceTime; the forwarded update pays a sampled route-hop delay and
obeys every engine limit. Failures of the target update land in the route's
dead-letter JSONL log and never propagate to the producer.

Delivery is FIFO per source twin: a delivery may not overtake an earlier one
from the same twin even when its sampled hop is shorter.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import latency as lat
from .engine import Engine, EventRecord
from .errors import InvalidFilter, RanTwinError, UnknownInstance
from .timebase import Scheduler, s_to_us
from .wire import canonical_json

log = logging.getLogger(__name__)

_FILTER_KEYS = {"twins", "paths", "path_prefixes", "structural"}


@dataclass(frozen=True)
class RouteFilter:
    """Total predicate over event records; None fields mean 'match anything'."""

    twins: frozenset[str] | None = None
    paths: frozenset[str] | None = None
    path_prefixes: tuple[str, ...] | None = None
    structural: bool = True  # whether $twin / $rel: events pass

    @classmethod
    def from_config(cls, config: dict | None) -> "RouteFilter":
        if config is None:
            return cls()
        if not isinstance(config, dict):
            raise InvalidFilter(f"filter must be an object, got {type(config).__name__}")
        unknown = set(config) - _FILTER_KEYS
        if unknown:
            raise InvalidFilter(f"unknown filter keys: {sorted(unknown)}")
        return cls(
            twins=frozenset(config["twins"]) if config.get("twins") is not None else None,
            paths=frozenset(config["paths"]) if config.get("paths") is not None else None,
            path_prefixes=tuple(config["path_prefixes"]) if config.get("path_prefixes") is not None else None,
            structural=bool(config.get("structural", True)),
        )

    def matches(self, record: EventRecord) -> bool:
        if not self.structural and record.path.startswith("$"):
            return False
        if self.twins is not None and record.twin_id not in self.twins:
            return False
        if self.paths is not None and record.path not in self.paths:
            return False
        if self.path_prefixes is not None and not any(
            record.path.startswith(p) for p in self.path_prefixes
        ):
            return False
        return True


class SinkEndpoint:
    """Latest-value cache plus windowed append-only JSONL/CSV storage."""

    def __init__(
        self,
        base_path,
        window_s: float = 300.0,
        cache_interval_s: float = 14.0,
        row_bytes: int = 21,
    ) -> None:
        self.jsonl_path = Path(str(base_path) + ".jsonl")
        self.csv_path = Path(str(base_path) + ".csv")
        self.window_us = s_to_us(window_s)
        self.cache_interval_us = s_to_us(cache_interval_s)
        self.row_bytes = row_bytes
        self.paused = False
        self.alarm: str | None = None
        self.rows_written = 0
        self.ingested_bytes = 0
        # (interval_start_us, rows) per completed cache interval, oldest first.
        self.interval_rows: list[tuple[int, int]] = []
        self._cache: dict[tuple[str, str], tuple[int, str, Any]] = {}
        self._pending: list[tuple[int, str, str, str, Any]] = []
        self._fabric: "EventFabric | None" = None
        self._interval_start = 0
        self._started = False
        self.jsonl_path.parent.mkdir(parents=True, exist_ok=True)
        self.jsonl_path.write_text("")
        self.csv_path.write_text("ts,instance,twin,path,value\r\n")

    def accept(self, record: EventRecord) -> None:
        if self.paused:
            return
        value = record.new_value
        self._cache[(record.twin_id, record.path)] = (
            record.last_updated_us,
            record.instance_id,
            value,
        )

    # -- scheduling ------------------------------------------------------------

    def start(self, fabric: "EventFabric") -> None:
        if self._started:
            return
        self._started = True
        self._fabric = fabric
        now = fabric.scheduler.clock.now_us()
        self._interval_start = now
        fabric.scheduler.at(now + self.cache_interval_us, self._on_cache_tick)
        fabric.scheduler.at(now + self.window_us, self._on_window_tick)

    def _on_cache_tick(self) -> None:
        self.flush_cache()
        assert self._fabric is not None
        self._fabric.scheduler.after(self.cache_interval_us, self._on_cache_tick)

    def _on_window_tick(self) -> None:
        self.flush_window()
        assert self._fabric is not None
        self._fabric.scheduler.after(self.window_us, self._on_window_tick)

    def flush_cache(self) -> None:
        """Close the current dedup interval and stage its rows for ingestion."""
        rows = [
            (ts, instance, twin, path, value)
            for (twin, path), (ts, instance, value) in self._cache.items()
        ]
        rows.sort()
        self._pending.extend(rows)
        self.interval_rows.append((self._interval_start, len(rows)))
        if self._fabric is not None:
            self._interval_start = self._fabric.scheduler.clock.now_us()
        self._cache.clear()

    def flush_window(self) -> None:
        """Batch-ingest staged rows into the JSONL file and its CSV mirror."""
        if not self._pending:
            return
        rows, self._pending = self._pending, []
        try:
            with self.jsonl_path.open("a", encoding="utf-8") as fh:
                for ts, instance, twin, path, value in rows:
                    fh.write(canonical_json(
                        {"ts": ts, "instance": instance, "twin": twin, "path": path,
                         "value": _plain(value)}
                    ))
                    fh.write("\n")
            with self.csv_path.open("a", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                for row in rows:
                    ts, instance, twin, path, value = row
                    writer.writerow([ts, instance, twin, path, _plain(value)])
        except OSError as exc:
            self.paused = True
            self.alarm = f"sink storage failure: {exc}"
            log.error("%s; route paused", self.alarm)
            return
        self.rows_written += len(rows)
        ingested = len(rows) * self.row_bytes
        self.ingested_bytes += ingested
        if self._fabric is not None and self._fabric.meter is not None:
            self._fabric.meter.record("ingest_bytes", ingested)

    def finalize(self) -> None:
        self.flush_cache()
        self.flush_window()

    def rows_per_second(self, start_us: int | None = None, end_us: int | None = None) -> float:
        """Steady-state row rate over completed dedup intervals in [start, end]."""
        usable = [
            (t0, n)
            for t0, n in self.interval_rows
            if (start_us is None or t0 >= start_us)
            and (end_us is None or t0 + self.cache_interval_us <= end_us)
        ]
        if not usable:
            return 0.0
        total = sum(n for _, n in usable)
        return total / (len(usable) * self.cache_interval_us / 1e6)


class TwinRouteEndpoint:
    """Forwards matched events as single-property patches on another twin."""

    def __init__(
        self,
        target_instance: str,
        twin_map: dict[str, str],
        path_map: dict[str, str],
        dead_letter_path=None,
        keep_delivery_log: bool = False,
    ) -> None:
        self.target_instance = target_instance
        self.twin_map = dict(twin_map)
        self.path_map = dict(path_map)
        self.dead_letter_path = Path(dead_letter_path) if dead_letter_path else None
        self.dead_letters = 0
        self.delivered = 0
        self.delivery_log: list[tuple[int, int]] | None = [] if keep_delivery_log else None
        self._route: "Route | None" = None
        self._last_delivery: dict[str, int] = {}
        if self.dead_letter_path is not None:
            self.dead_letter_path.parent.mkdir(parents=True, exist_ok=True)
            self.dead_letter_path.write_text("")

    def accept(self, record: EventRecord) -> None:
        route = self._route
        assert route is not None
        target_twin = self.twin_map.get(record.twin_id)
        target_path = self.path_map.get(record.path)
        if target_twin is None or target_path is None:
            route.filtered_out += 1  # endpoint-level selection, still conserved
            return
        fabric = route.fabric
        hop_us = fabric.engine.latency.sample_us(lat.ROUTE)
        due = record.last_updated_us + hop_us
        # FIFO per source twin: never overtake an earlier delivery.
        due = max(due, self._last_delivery.get(record.twin_id, 0))
        self._last_delivery[record.twin_id] = due
        route.in_flight += 1
        fabric.scheduler.at(
            due,
            lambda: self._deliver(record, target_twin, target_path, due),
        )

    def _deliver(self, record: EventRecord, target_twin: str, target_path: str, at_us: int) -> None:
        route = self._route
        assert route is not None
        fabric = route.fabric
        route.in_flight -= 1
        patch = [(target_path, record.new_value, record.source_us)]
        try:
            fabric.engine.update_twin(self.target_instance, target_twin, patch, at=at_us)
        except RanTwinError as exc:
            route.dead_lettered += 1
            self.dead_letters += 1
            self._dead_letter(record, at_us, exc)
            return
        route.delivered += 1
        self.delivered += 1
        if self.delivery_log is not None and record.source_us is not None:
            tw = fabric.engine.instance(self.target_instance).twins[target_twin]
            self.delivery_log.append(
                (record.source_us, tw.properties[target_path].last_updated_us)
            )

    def _dead_letter(self, record: EventRecord, at_us: int, exc: Exception) -> None:
        if self.dead_letter_path is None:
            return
        entry = {
            "ts": at_us,
            "error": f"{type(exc).__name__}: {exc}",
            "event": record.to_wire(),
        }
        try:
            with self.dead_letter_path.open("a", encoding="utf-8") as fh:
                fh.write(canonical_json(entry))
                fh.write("\n")
        except OSError as io_exc:  # never disturb the producer
            log.error("dead-letter write failed: %s", io_exc)


@dataclass
class Route:
    id: str
    source_instance: str
    filter: RouteFilter
    endpoint: Any
    fabric: "EventFabric"
    seen: int = 0
    filtered_out: int = 0
    delivered: int = 0
    dead_lettered: int = 0
    in_flight: int = 0


class EventFabric:
    """Per-instance route table fed synchronously by the engine."""

    def __init__(self, engine: Engine, scheduler: Scheduler, meter=None) -> None:
        self.engine = engine
        self.scheduler = scheduler
        self.meter = meter
        self.routes: dict[str, Route] = {}
        self._by_instance: dict[str, list[Route]] = {}
        self._ids = itertools.count(1)
        engine.attach_event_sink(self.publish)

    def create_route(
        self,
        source_instance: str,
        filter: RouteFilter | dict | None,
        endpoint,
    ) -> str:
        if source_instance not in self.engine.instances:
            raise UnknownInstance(source_instance)
        if isinstance(endpoint, TwinRouteEndpoint) and endpoint.target_instance not in self.engine.instances:
            raise UnknownInstance(endpoint.target_instance)
        rf = filter if isinstance(filter, RouteFilter) else RouteFilter.from_config(filter)
        route_id = f"route-{next(self._ids)}"
        route = Route(route_id, source_instance, rf, endpoint, self)
        self.routes[route_id] = route
        self._by_instance.setdefault(source_instance, []).append(route)
        if isinstance(endpoint, SinkEndpoint):
            endpoint.start(self)
        if isinstance(endpoint, TwinRouteEndpoint):
            endpoint._route = route
        return route_id

    def publish(self, record: EventRecord) -> None:
        routes = self._by_instance.get(record.instance_id)
        if not routes:
            return
        meter = self.meter
        for route in routes:
            route.seen += 1
            if meter is not None:
                meter.record("eventhub_message", 1)
            if route.filter.matches(record):
                route.endpoint.accept(record)
                if isinstance(route.endpoint, SinkEndpoint):
                    route.delivered += 1
            else:
                route.filtered_out += 1

    def finalize(self) -> None:
        for route in self.routes.values():
            if isinstance(route.endpoint, SinkEndpoint):
                route.endpoint.finalize()


def load_route_config(fabric: EventFabric, config: dict, base_dir=".") -> str:
    """Create a route from its JSON config form (see docs/wire.md)."""
    kind = config.get("endpoint", {}).get("kind")
    ep_cfg = config.get("endpoint", {})
    base = Path(base_dir)
    if kind == "sink":
        endpoint: Any = SinkEndpoint(
            base / ep_cfg.get("path", "sink"),
            window_s=ep_cfg.get("window_s", 300.0),
            cache_interval_s=ep_cfg.get("cache_interval_s", 14.0),
            row_bytes=ep_cfg.get("row_bytes", 21),
        )
    elif kind == "twin-route":
        endpoint = TwinRouteEndpoint(
            ep_cfg["target_instance"],
            ep_cfg.get("twin_map", {}),
            ep_cfg.get("path_map", {}),
            dead_letter_path=base / ep_cfg.get("dead_letter", "dead-letter.jsonl"),
        )
    else:
        raise InvalidFilter(f"unknown endpoint kind {kind!r}")
    return fabric.create_route(config["source"], config.get("filter"), endpoint)


def _plain(value):
    return list(value) if isinstance(value, tuple) else value

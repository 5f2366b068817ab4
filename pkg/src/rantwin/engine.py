"""Twin engine: instances, twins, relationships, limits, latency, events.

The engine executes against a shared monotonic clock (simulated by default).
Every API call is dispatched at an explicit instant -- ``at`` when given,
otherwise the clock's current time -- and its effects carry timestamps
derived from that instant plus sampled latencies:

  * an accepted update stores each patched property with
    ``lastUpdatedTime = dispatch + lag`` (one lag draw per update; measurement
    showed no per-parameter ordering effect) and answers with
    ``responseTime = dispatch + service``;
  * a created twin becomes visible to queries and updates only at
    ``admission + creation latency``, with admissions paced at the bulk
    creation throughput cap per instance.

When callers stamp ``sourceTime`` with the dispatch instant (the normal
telemetry path), ``lastUpdatedTime - sourceTime`` equals the lag draw exactly.
A forwarded patch that carries an older sourceTime accumulates the upstream
delays in that difference instead, which is what end-to-end lag measures.

Rate limiting uses exact sliding one-second windows over dispatch instants,
per twin and per instance; rejected calls still consume a window slot
(conservative reading of the service limits). In simulated-clock mode the
engine is single-threaded and event-ordered: results depend only on the seed
and submission order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from . import latency as lat
from .errors import (
    CrossInstance,
    DuplicateInstance,
    DuplicateRelationship,
    DuplicateTwin,
    PayloadTooLarge,
    RateLimitExceeded,
    UnknownInstance,
    UnknownModel,
    UnknownRelationship,
    UnknownTwin,
    ValidationFailed,
)
from .modeling import ModelInterface, ModelRegistry, PatchVerdict, RelationshipDef, Violation
from .timebase import RealTimeClock, SimClock, US_PER_SECOND, ms_to_us
from .wire import PatchEntry, patch_size_bytes, patch_size_upper_bound

TWIN_EVENT_PATH = "$twin"
REL_EVENT_PREFIX = "$rel:"


@dataclass
class ServiceLimits:
    max_updates_per_twin_per_second: int = 10
    max_updates_per_instance_per_second: int = 1000
    max_patch_bytes: int = 32768


@dataclass(slots=True)
class PropertyValue:
    value: Any
    last_updated_us: int
    source_us: int | None = None


@dataclass(slots=True)
class Twin:
    id: str
    model_id: str
    properties: dict[str, PropertyValue]
    visible_at_us: int


@dataclass(slots=True)
class Relationship:
    id: str
    source: str
    target: str
    name: str
    payload: dict[str, PropertyValue] = field(default_factory=dict)


@dataclass(slots=True)
class UpdateReceipt:
    status: str
    response_time_us: int

    def to_wire(self) -> dict[str, Any]:
        return {"status": self.status, "responseTime": self.response_time_us}


@dataclass(slots=True)
class EventRecord:
    instance_id: str
    twin_id: str
    path: str
    old_value: Any
    new_value: Any
    last_updated_us: int
    source_us: int | None

    def to_wire(self) -> dict[str, Any]:
        return {
            "instance": self.instance_id,
            "twin": self.twin_id,
            "path": self.path,
            "old": _wire_value(self.old_value),
            "new": _wire_value(self.new_value),
            "lastUpdatedTime": self.last_updated_us,
            "sourceTime": self.source_us,
        }


def _wire_value(value):
    return list(value) if isinstance(value, tuple) else value


@dataclass
class QueryResult:
    twin_id: str
    model_id: str
    properties: dict[str, PropertyValue]
    relationships: list[Relationship]
    completed_at_us: int
    query_units: int


@dataclass
class InstanceDump:
    instance_id: str
    models: list[ModelInterface]
    twins: dict[str, Twin]
    relationships: dict[str, Relationship]
    completed_at_us: int
    query_units: int


class Instance:
    """One isolated twin graph with its own rate windows and event stream."""

    def __init__(self, engine: "Engine", instance_id: str) -> None:
        self.engine = engine
        self.id = instance_id
        self.registry = ModelRegistry()
        self.twins: dict[str, Twin] = {}
        self.relationships: dict[str, Relationship] = {}
        self.rels_by_source: dict[str, set[str]] = {}
        self.rels_by_target: dict[str, set[str]] = {}
        self._twin_windows: dict[str, deque[int]] = {}
        self._instance_window: deque[int] = deque()
        self._busy_until: dict[str, int] = {}
        self._next_admission_us = 0
        self._payload_probes: dict[tuple[str, str], ModelRegistry] = {}
        self.stats = {
            "updates_accepted": 0,
            "updates_rejected": 0,
            "events_emitted": 0,
            "property_events": 0,
        }
        self.dispatch_log: list[tuple[int, str]] | None = None

    @property
    def twin_count(self) -> int:
        return len(self.twins)

    def record_dispatches(self, enabled: bool = True) -> None:
        self.dispatch_log = [] if enabled else None


class Engine:
    """Hosts instances against one clock, one latency model, one meter."""

    def __init__(
        self,
        seed: int = 0,
        clock: SimClock | RealTimeClock | None = None,
        latency_config: lat.LatencyConfig | None = None,
        limits: ServiceLimits | None = None,
        meter=None,
    ) -> None:
        self.clock = clock if clock is not None else SimClock()
        self.latency = lat.LatencyModel(latency_config, seed=seed)
        self.limits = limits if limits is not None else ServiceLimits()
        self.meter = meter
        self.instances: dict[str, Instance] = {}
        self._event_sink: Callable[[EventRecord], None] | None = None
        self._creation_gap_us = round(US_PER_SECOND / self.latency.config.bulk_create_per_s)

    # -- wiring ---------------------------------------------------------------

    def attach_event_sink(self, sink: Callable[[EventRecord], None] | None) -> None:
        self._event_sink = sink

    def now_us(self) -> int:
        return self.clock.now_us()

    def sample_latency(self, kind: str, m: int = 0, u: int = 0) -> int:
        """Public draw from the calibrated model, in microseconds."""
        return self.latency.sample_us(kind, m=m, u=u)

    # -- instance and model management -----------------------------------------

    def create_instance(self, instance_id: str) -> Instance:
        if instance_id in self.instances:
            raise DuplicateInstance(instance_id)
        inst = Instance(self, instance_id)
        self.instances[instance_id] = inst
        self._meter_op(1)
        return inst

    def instance(self, instance_id: str) -> Instance:
        try:
            return self.instances[instance_id]
        except KeyError:
            raise UnknownInstance(instance_id) from None

    def delete_instance(self, instance_id: str) -> None:
        if instance_id not in self.instances:
            raise UnknownInstance(instance_id)
        del self.instances[instance_id]
        self._meter_op(1)

    def upload_models(self, instance: Instance | str, interfaces: Iterable[ModelInterface], at: int | None = None) -> UpdateReceipt:
        inst = self._resolve(instance)
        start = self._at(at)
        for itf in interfaces:
            inst.registry.add(itf)
        self._meter_op(1)
        done = start + self.latency.aux_sample_us("model_upload_ms")
        return UpdateReceipt("accepted", done)

    # -- twin lifecycle ---------------------------------------------------------

    def create_twin(
        self,
        instance: Instance | str,
        twin_id: str,
        model_id: str,
        initial_properties: dict[str, Any] | None = None,
        at: int | None = None,
    ) -> UpdateReceipt:
        """Create a twin; it becomes visible after the sampled creation latency."""
        inst = self._resolve(instance)
        if twin_id in inst.twins:
            raise DuplicateTwin(f"{inst.id}/{twin_id}")
        if model_id not in inst.registry:
            raise UnknownModel(model_id)
        initial = initial_properties or {}
        verdict = inst.registry.validate_patch(model_id, [(p, v) for p, v in initial.items()])
        if not verdict.accepted:
            raise ValidationFailed(verdict.violations)

        dispatch = self._at(at)
        admission = max(dispatch, inst._next_admission_us)
        inst._next_admission_us = admission + self._creation_gap_us
        m = inst.registry.parameter_count(model_id)
        visible_at = admission + self.latency.sample_us(lat.CREATE, m=m)

        props = {
            path: PropertyValue(_normalize(value), visible_at, None)
            for path, value in initial.items()
        }
        inst.twins[twin_id] = Twin(twin_id, model_id, props, visible_at)
        self._meter_op(1)
        self._emit(inst, EventRecord(inst.id, twin_id, TWIN_EVENT_PATH, None, model_id, visible_at, None))
        return UpdateReceipt("accepted", visible_at)

    def delete_twin(self, instance: Instance | str, twin_id: str, at: int | None = None) -> UpdateReceipt:
        """Remove a twin; its relationships must have been deleted first."""
        inst = self._resolve(instance)
        now = self._at(at)
        twin = inst.twins.get(twin_id)
        if twin is None:
            raise UnknownTwin(f"{inst.id}/{twin_id}")
        incident = inst.rels_by_source.get(twin_id) or inst.rels_by_target.get(twin_id)
        if incident:
            raise ValidationFailed(
                [Violation(twin_id, "twin still has relationships", sorted(incident))]
            )
        del inst.twins[twin_id]
        inst._twin_windows.pop(twin_id, None)
        inst._busy_until.pop(twin_id, None)
        inst.rels_by_source.pop(twin_id, None)
        inst.rels_by_target.pop(twin_id, None)
        self._meter_op(1)
        self._emit(inst, EventRecord(inst.id, twin_id, TWIN_EVENT_PATH, twin.model_id, None, now, None))
        return UpdateReceipt("accepted", now)

    def update_twin(
        self,
        instance: Instance | str,
        twin_id: str,
        patch: list[PatchEntry],
        at: int | None = None,
    ) -> UpdateReceipt:
        """Apply a validated patch; see module docstring for timing semantics."""
        inst = self._resolve(instance)
        now = self._at(at)
        self._meter_msg(1)
        twin = inst.twins.get(twin_id)
        if twin is None or now < twin.visible_at_us:
            raise UnknownTwin(f"{inst.id}/{twin_id}" + ("" if twin is None else " (not yet visible)"))

        self._rate_gate(inst, twin_id, now)

        if patch_size_upper_bound(patch) > self.limits.max_patch_bytes:
            if patch_size_bytes(patch) > self.limits.max_patch_bytes:
                inst.stats["updates_rejected"] += 1
                raise PayloadTooLarge(f"patch exceeds {self.limits.max_patch_bytes} bytes")

        verdict: PatchVerdict = inst.registry.validate_patch(twin.model_id, patch)
        if not verdict.accepted:
            inst.stats["updates_rejected"] += 1
            raise ValidationFailed(verdict.violations)

        penalized = now < inst._busy_until.get(twin_id, 0)
        m = inst.registry.parameter_count(twin.model_id)
        service_us = self.latency.sample_us(lat.SERVICE, m=m, u=len(patch), penalized=penalized)
        lag_us = self.latency.sample_us(lat.LAG, u=len(patch), penalized=penalized)

        updated_at = now + lag_us
        response_at = now + service_us
        props = twin.properties
        emit = self._event_sink
        for path, value, source_us in patch:
            value = _normalize(value)
            prev = props.get(path)
            old = prev.value if prev is not None else None
            props[path] = PropertyValue(value, updated_at, source_us)
            inst.stats["property_events"] += 1
            if emit is not None:
                inst.stats["events_emitted"] += 1
                emit(EventRecord(inst.id, twin_id, path, old, value, updated_at, source_us))

        inst._busy_until[twin_id] = max(inst._busy_until.get(twin_id, 0), response_at)
        inst.stats["updates_accepted"] += 1
        return UpdateReceipt("accepted", response_at)

    # -- relationships -----------------------------------------------------------

    def create_relationship(
        self,
        instance: Instance | str,
        source: str,
        target: str,
        name: str,
        payload: dict[str, Any] | None = None,
        rel_id: str | None = None,
        at: int | None = None,
    ) -> UpdateReceipt:
        inst = self._resolve(instance)
        now = self._at(at)
        src = inst.twins.get(source)
        if src is None or now < src.visible_at_us:
            self._guard_cross_instance(inst, source)
            raise UnknownTwin(f"{inst.id}/{source}")
        tgt = inst.twins.get(target)
        if tgt is None or now < tgt.visible_at_us:
            self._guard_cross_instance(inst, target)
            raise UnknownTwin(f"{inst.id}/{target}")
        rel_id = rel_id or f"{source}|{name}|{target}"
        if rel_id in inst.relationships:
            raise DuplicateRelationship(rel_id)
        rel_def = self._relationship_def(inst, src.model_id, name)
        payload = payload or {}
        verdict = self._payload_probe(inst, src.model_id, name, rel_def).validate_patch(
            "$payload", list(payload.items())
        )
        if not verdict.accepted:
            raise ValidationFailed(verdict.violations)

        admission = max(now, inst._next_admission_us)
        inst._next_admission_us = admission + self._creation_gap_us
        response_at = admission + self._relationship_duration_us(inst, src, payload_size=len(payload), now=now)

        values = {k: PropertyValue(_normalize(v), response_at, None) for k, v in payload.items()}
        rel = Relationship(rel_id, source, target, name, values)
        inst.relationships[rel_id] = rel
        inst.rels_by_source.setdefault(source, set()).add(rel_id)
        inst.rels_by_target.setdefault(target, set()).add(rel_id)
        self._meter_op(1)
        self._emit(
            inst,
            EventRecord(inst.id, source, f"{REL_EVENT_PREFIX}{rel_id}", None,
                        {k: _wire_value(v.value) for k, v in values.items()}, response_at, None),
        )
        return UpdateReceipt("accepted", response_at)

    def update_relationship(
        self,
        instance: Instance | str,
        rel_id: str,
        patch: list[PatchEntry],
        at: int | None = None,
    ) -> UpdateReceipt:
        """Relationship update: twin-update timing of the same size plus a surcharge."""
        inst = self._resolve(instance)
        now = self._at(at)
        self._meter_msg(1)
        rel = inst.relationships.get(rel_id)
        if rel is None:
            raise UnknownRelationship(f"{inst.id}/{rel_id}")
        src = inst.twins[rel.source]
        self._rate_gate(inst, rel.source, now)
        rel_def = self._relationship_def(inst, src.model_id, rel.name)
        verdict = self._payload_probe(inst, src.model_id, rel.name, rel_def).validate_patch(
            "$payload", [(p, v) for p, v, _ in patch]
        )
        if not verdict.accepted:
            inst.stats["updates_rejected"] += 1
            raise ValidationFailed(verdict.violations)

        response_at = now + self._relationship_duration_us(inst, src, payload_size=len(patch), now=now)
        lag_us = self.latency.sample_us(lat.LAG, u=len(patch), penalized=now < inst._busy_until.get(rel.source, 0))
        updated_at = now + lag_us
        for path, value, source_us in patch:
            value = _normalize(value)
            prev = rel.payload.get(path)
            old = prev.value if prev is not None else None
            rel.payload[path] = PropertyValue(value, updated_at, source_us)
            inst.stats["property_events"] += 1
            self._emit(inst, EventRecord(inst.id, rel.source, f"{REL_EVENT_PREFIX}{rel_id}.{path}",
                                         old, value, updated_at, source_us))
        inst._busy_until[rel.source] = max(inst._busy_until.get(rel.source, 0), response_at)
        inst.stats["updates_accepted"] += 1
        return UpdateReceipt("accepted", response_at)

    def delete_relationship(self, instance: Instance | str, rel_id: str, at: int | None = None) -> UpdateReceipt:
        inst = self._resolve(instance)
        now = self._at(at)
        rel = inst.relationships.get(rel_id)
        if rel is None:
            raise UnknownRelationship(f"{inst.id}/{rel_id}")
        src = inst.twins[rel.source]
        response_at = now + self._relationship_duration_us(inst, src, payload_size=0, now=now)
        del inst.relationships[rel_id]
        inst.rels_by_source[rel.source].discard(rel_id)
        inst.rels_by_target[rel.target].discard(rel_id)
        self._meter_op(1)
        self._emit(inst, EventRecord(inst.id, rel.source, f"{REL_EVENT_PREFIX}{rel_id}",
                                     {k: _wire_value(v.value) for k, v in rel.payload.items()}, None,
                                     response_at, None))
        inst._busy_until[rel.source] = max(inst._busy_until.get(rel.source, 0), response_at)
        return UpdateReceipt("accepted", response_at)

    # -- queries -----------------------------------------------------------------

    def query_twin(self, instance: Instance | str, twin_id: str, at: int | None = None) -> QueryResult:
        inst = self._resolve(instance)
        now = self._at(at)
        twin = inst.twins.get(twin_id)
        if twin is None or now < twin.visible_at_us:
            raise UnknownTwin(f"{inst.id}/{twin_id}")
        penalized = now < inst._busy_until.get(twin_id, 0)
        m = inst.registry.parameter_count(twin.model_id)
        done = now + self.latency.sample_us(lat.QUERY, m=m, penalized=penalized)
        inst._busy_until[twin_id] = max(inst._busy_until.get(twin_id, 0), done)
        incident = [
            inst.relationships[r]
            for r in sorted(
                inst.rels_by_source.get(twin_id, set()) | inst.rels_by_target.get(twin_id, set())
            )
        ]
        self._meter_op(1)
        self._meter_query_units(1)
        return QueryResult(twin_id, twin.model_id, dict(twin.properties), incident, done, 1)

    def query_instance(self, instance: Instance | str, at: int | None = None) -> InstanceDump:
        """Enumerate a whole instance; charges one query unit per visible twin."""
        inst = self._resolve(instance)
        now = self._at(at)
        visible = {tid: twin for tid, twin in inst.twins.items() if twin.visible_at_us <= now}
        m = max((inst.registry.parameter_count(t.model_id) for t in visible.values()), default=0)
        done = now + self.latency.sample_us(lat.QUERY, m=m)
        units = max(1, len(visible))
        self._meter_op(1)
        self._meter_query_units(units)
        return InstanceDump(
            inst.id,
            list(inst.registry),
            {tid: Twin(tid, t.model_id, dict(t.properties), t.visible_at_us) for tid, t in visible.items()},
            dict(inst.relationships),
            done,
            units,
        )

    # -- internals ----------------------------------------------------------------

    def _resolve(self, instance: Instance | str) -> Instance:
        if isinstance(instance, Instance):
            return instance
        return self.instance(instance)

    def _at(self, at: int | None) -> int:
        return self.clock.now_us() if at is None else at

    def _rate_gate(self, inst: Instance, twin_id: str, now: int) -> None:
        """Sliding 1 s windows; the attempt consumes a slot even when rejected."""
        horizon = now - US_PER_SECOND
        tw = inst._twin_windows.get(twin_id)
        if tw is None:
            tw = inst._twin_windows[twin_id] = deque()
        while tw and tw[0] <= horizon:
            tw.popleft()
        iw = inst._instance_window
        while iw and iw[0] <= horizon:
            iw.popleft()
        twin_full = len(tw) >= self.limits.max_updates_per_twin_per_second
        inst_full = len(iw) >= self.limits.max_updates_per_instance_per_second
        tw.append(now)
        iw.append(now)
        if inst.dispatch_log is not None:
            inst.dispatch_log.append((now, twin_id))
        if twin_full:
            inst.stats["updates_rejected"] += 1
            raise RateLimitExceeded(f"{inst.id}/{twin_id}: more than "
                                    f"{self.limits.max_updates_per_twin_per_second} updates/s")
        if inst_full:
            inst.stats["updates_rejected"] += 1
            raise RateLimitExceeded(f"{inst.id}: more than "
                                    f"{self.limits.max_updates_per_instance_per_second} updates/s")

    def _relationship_duration_us(self, inst: Instance, src: Twin, payload_size: int, now: int) -> int:
        m = inst.registry.parameter_count(src.model_id)
        penalized = now < inst._busy_until.get(src.id, 0)
        dur = self.latency.sample_us(lat.SERVICE, m=m, u=payload_size, penalized=penalized)
        return dur + ms_to_us(self.latency.config.relationship_extra_ms)

    def _payload_probe(self, inst: Instance, model_id: str, name: str, rel_def: RelationshipDef) -> ModelRegistry:
        key = (model_id, name)
        probe = inst._payload_probes.get(key)
        if probe is None:
            probe = ModelRegistry([ModelInterface(id="$payload", properties=rel_def.payload)])
            inst._payload_probes[key] = probe
        return probe

    def _relationship_def(self, inst: Instance, model_id: str, name: str) -> RelationshipDef:
        for rel in inst.registry.get(model_id).relationships:
            if rel.name == name:
                return rel
        raise UnknownRelationship(f"model {model_id} defines no relationship {name!r}")

    def _guard_cross_instance(self, inst: Instance, twin_id: str) -> None:
        for other in self.instances.values():
            if other is not inst and twin_id in other.twins:
                raise CrossInstance(
                    f"{twin_id} lives in {other.id}; relationships cannot span instances"
                )

    def _emit(self, inst: Instance, record: EventRecord) -> None:
        if self._event_sink is not None:
            inst.stats["events_emitted"] += 1
            self._event_sink(record)

    def _meter_msg(self, n: int) -> None:
        if self.meter is not None:
            self.meter.record("message", n)

    def _meter_op(self, n: int) -> None:
        if self.meter is not None:
            self.meter.record("operation", n)

    def _meter_query_units(self, n: int) -> None:
        if self.meter is not None:
            self.meter.record("query_units", n)


def _normalize(value):
    return tuple(value) if isinstance(value, list) else value


def create_instance(instance_id: str, clock_mode: str = "simulated", seed: int = 0) -> Instance:
    """Standalone helper: a fresh single-instance engine with its own clock."""
    if clock_mode == "simulated":
        clock: SimClock | RealTimeClock = SimClock()
    elif clock_mode == "real-time":
        clock = RealTimeClock()
    else:
        raise ValueError(f"unknown clock mode {clock_mode!r}")
    engine = Engine(seed=seed, clock=clock)
    return engine.create_instance(instance_id)

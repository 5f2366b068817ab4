"""What-if tooling: snapshot a deployment, spawn copies, drive them, diff them.

A snapshot captures every twin and edge of a bridge-managed deployment. The
per-cell instances are read with whole-instance queries (one query unit per
twin). The overview instance is not queried at all: at quiescence its content
is a pure function of state the snapshotter already holds -- static setup
facts (PLMN, ARFCN, neighbour edges) plus the bridge's last-dispatched slot
values, which the engine's validation gate guarantees equal the stored twin
state. Skipping that query is what prices a full 8x99 deployment snapshot at
exactly 800 query units; tests cross-check the reconstruction against a
direct (separately charged) enumeration.

Spawning replays a snapshot onto fresh instances. Copies run in parallel;
inside one copy the orchestrating function walks the instances serially
(create instance, upload the model set, bulk-create twins at the engine's
admission cap, wait for visibility, then recreate edges). Function
executions are metered per the configurable decomposition; wall time is
dominated by the per-instance bulk-creation throughput.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .bridge import RanTwinBridge
from .engine import Engine, InstanceDump
from .errors import RanTwinError
from .modeling import parse_model_set, serialize_model
from .timebase import us_to_s
from .wire import canonical_json

SNAPSHOT_VERSION = 1

MULTI_ROLE = "multi"


@dataclass
class Deployment:
    """A live bridge-managed deployment addressed by role names."""

    engine: Engine
    bridge: RanTwinBridge
    emulator_config: dict[str, Any] = field(default_factory=dict)

    @property
    def prefix(self) -> str:
        return self.bridge.config.instance_prefix

    def roles(self) -> dict[str, str]:
        mapping = {MULTI_ROLE: self.bridge.multi_instance_id}
        for cell_id in sorted(self.bridge.cells):
            mapping[cell_id] = self.bridge.cell_instance_id(cell_id)
        return mapping


@dataclass
class Snapshot:
    version: int
    captured_at_us: int
    roles: dict[str, dict[str, Any]]
    bookkeeping: dict[str, Any]
    emulator_config: dict[str, Any]
    query_units: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "captured_at": self.captured_at_us,
            "roles": self.roles,
            "bookkeeping": self.bookkeeping,
            "emulator_config": self.emulator_config,
            "query_units": self.query_units,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Snapshot":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            version=raw["version"],
            captured_at_us=raw["captured_at"],
            roles=raw["roles"],
            bookkeeping=raw["bookkeeping"],
            emulator_config=raw["emulator_config"],
            query_units=raw["query_units"],
        )


def snapshot(deployment: Deployment) -> Snapshot:
    """Capture models, twins and edges for every role of the deployment."""
    engine = deployment.engine
    bridge = deployment.bridge
    roles: dict[str, dict[str, Any]] = {}
    units = 0
    for role, instance_id in deployment.roles().items():
        if role == MULTI_ROLE:
            continue
        dump = engine.query_instance(instance_id)
        roles[role] = _role_state_from_dump(dump)
        units += dump.query_units
    roles[MULTI_ROLE] = _reconstruct_multi(bridge)
    return Snapshot(
        version=SNAPSHOT_VERSION,
        captured_at_us=engine.now_us(),
        roles=roles,
        bookkeeping=bridge.export_bookkeeping() | {"setup": _setup_facts(bridge)},
        emulator_config=dict(deployment.emulator_config),
        query_units=units,
    )


def snapshot_instances(engine: Engine, instance_ids: dict[str, str]) -> Snapshot:
    """Plain snapshot of arbitrary instances (no bridge reconstruction)."""
    roles = {}
    units = 0
    for role, instance_id in sorted(instance_ids.items()):
        dump = engine.query_instance(instance_id)
        roles[role] = _role_state_from_dump(dump)
        units += dump.query_units
    return Snapshot(SNAPSHOT_VERSION, engine.now_us(), roles, {}, {}, units)


def _role_state_from_dump(dump: InstanceDump) -> dict[str, Any]:
    twins = {
        twin_id: {
            "model": twin.model_id,
            "properties": {p: _plain(pv.value) for p, pv in sorted(twin.properties.items())},
        }
        for twin_id, twin in sorted(dump.twins.items())
    }
    rels = {
        rel_id: {
            "source": rel.source,
            "target": rel.target,
            "name": rel.name,
            "payload": {p: _plain(pv.value) for p, pv in sorted(rel.payload.items())},
        }
        for rel_id, rel in sorted(dump.relationships.items())
    }
    return {
        "models": sorted(serialize_model(m) for m in dump.models),
        "twins": twins,
        "relationships": rels,
    }


def _reconstruct_multi(bridge: RanTwinBridge) -> dict[str, Any]:
    """Overview-instance state from setup facts plus last-dispatched values."""
    from .modeling import MULTI_GNB_MODEL, MULTI_UE_MODEL, NEIGHBOR_RELATIONSHIP, UE_SLOT_COUNT
    from .bridge import VACANT_LOCATION, VACANT_RSRP

    twins: dict[str, Any] = {}
    rels: dict[str, Any] = {}
    for cell_id, runtime in sorted(bridge.cells.items()):
        props: dict[str, Any] = {
            "PLMN": runtime.info.plmn,
            "ARFCN": runtime.info.arfcn,
        }
        for slot in range(UE_SLOT_COUNT):
            if runtime.slot_sent_valid[slot]:
                loc = runtime.slot_sent_loc[slot]
                props[f"UE{slot + 1}.Location"] = [float(loc[0]), float(loc[1])]
                props[f"UE{slot + 1}.RSRP"] = float(runtime.slot_sent_rsrp[slot])
            else:
                props[f"UE{slot + 1}.Location"] = list(VACANT_LOCATION)
                props[f"UE{slot + 1}.RSRP"] = VACANT_RSRP
        twins[runtime.multi_twin] = {
            "model": MULTI_GNB_MODEL,
            "properties": dict(sorted(props.items())),
        }
    for cell_id, runtime in sorted(bridge.cells.items()):
        for other in bridge._adjacent_cells(cell_id):
            rel_id = f"{cell_id}|{NEIGHBOR_RELATIONSHIP}|{other}"
            rels[rel_id] = {
                "source": cell_id,
                "target": other,
                "name": NEIGHBOR_RELATIONSHIP,
                "payload": {"Received Power": bridge._neighbor_power(cell_id, other)},
            }
    registry = bridge.registry
    return {
        "models": sorted(
            serialize_model(registry.get(m)) for m in (MULTI_UE_MODEL, MULTI_GNB_MODEL)
        ),
        "twins": twins,
        "relationships": dict(sorted(rels.items())),
    }


def _setup_facts(bridge: RanTwinBridge) -> dict[str, Any]:
    return {
        cell_id: {
            "plmn": rt.info.plmn,
            "arfcn": rt.info.arfcn,
            "tx_power_dbm": rt.info.tx_power_dbm,
            "position_m": list(rt.info.position_m),
        }
        for cell_id, rt in sorted(bridge.cells.items())
    }


# -- spawning ------------------------------------------------------------------


@dataclass
class SpawnPolicy:
    """Function-execution decomposition; defaults sum to the measured total."""

    trigger_executions: int = 1
    per_instance_executions: int = 2
    per_copy_executions: int = 3
    finalize_executions: int = 1

    def total(self, copies: int, instances: int) -> int:
        return (
            self.trigger_executions
            + copies * instances * self.per_instance_executions
            + copies * self.per_copy_executions
            + self.finalize_executions
        )


@dataclass
class CopyDeployment:
    prefix: str
    roles: dict[str, str]
    engine: Engine


@dataclass
class SpawnResult:
    copies: list[CopyDeployment]
    started_us: int
    finished_us: int
    copy_finished_us: list[int]
    function_executions: int

    @property
    def duration_s(self) -> float:
        return us_to_s(self.finished_us - self.started_us)


def spawn_copies(
    snap: Snapshot,
    n: int,
    engine: Engine,
    policy: SpawnPolicy | None = None,
    prefix: str = "copy",
) -> SpawnResult:
    """Deploy ``n`` live copies of the snapshot; see module docstring."""
    if n < 1:
        raise ValueError("need n >= 1 copies")
    policy = policy or SpawnPolicy()
    meter = engine.meter
    t0 = engine.now_us()
    trigger_done = t0 + engine.latency.aux_sample_us("function_exec_ms")

    copies: list[CopyDeployment] = []
    copy_done: list[int] = []
    role_names = sorted(snap.roles)
    created: list[str] = []
    try:
        for k in range(n):
            t = trigger_done
            mapping: dict[str, str] = {}
            for role in role_names:
                state = snap.roles[role]
                instance_id = f"{prefix}{k}:{role}"
                inst = engine.create_instance(instance_id)
                created.append(instance_id)
                mapping[role] = instance_id
                t += engine.latency.aux_sample_us("instance_create_ms")
                registry = parse_model_set(state["models"])
                receipt = engine.upload_models(inst, list(registry), at=t)
                t = receipt.response_time_us
                twin_done = t
                for twin_id, twin_state in state["twins"].items():
                    r = engine.create_twin(
                        inst, twin_id, twin_state["model"], twin_state["properties"], at=t
                    )
                    twin_done = max(twin_done, r.response_time_us)
                t = twin_done  # edges need the twins visible
                rel_done = t
                for rel_id, rel in state["relationships"].items():
                    r = engine.create_relationship(
                        inst, rel["source"], rel["target"], rel["name"],
                        payload=rel["payload"], rel_id=rel_id, at=t,
                    )
                    rel_done = max(rel_done, r.response_time_us)
                t = rel_done
            copy_done.append(t)
            copies.append(CopyDeployment(f"{prefix}{k}", mapping, engine))
    except RanTwinError:
        for instance_id in created:  # partial spawn: roll back this batch
            engine.delete_instance(instance_id)
        raise
    finished = max(copy_done) + engine.latency.aux_sample_us("function_exec_ms")
    executions = policy.total(n, len(role_names))
    if meter is not None:
        meter.record("function_execution", executions)
    engine.clock.advance_to(max(finished, engine.now_us()))
    return SpawnResult(copies, t0, finished, copy_done, executions)


# -- driving copies ---------------------------------------------------------------


@dataclass
class DriveScenario:
    seed: int = 1
    duration_s: float = 30.0
    speed_multiplier: float = 1.0
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass
class DriveResult:
    copy: CopyDeployment
    handovers: int
    completed_transcripts: int
    bridge: RanTwinBridge
    network: Any


def drive_scenario(copy: CopyDeployment, snap: Snapshot, scenario: DriveScenario) -> DriveResult:
    """Feed a spawned copy from an independent emulator/bridge pair.

    The emulator resumes from the copy's captured UE state (positions from
    the twins' Location values, attachments from the bookkeeping) under the
    scenario's seed and parameter overrides; a fresh bridge adopts the copy's
    instances and keeps them synchronized while the scenario runs.
    """
    from .bridge import BridgeConfig
    from .emulator import EmulatorConfig, RanNetwork, geo_to_meters
    from .scenario import ScenarioDriver
    from .timebase import Scheduler, s_to_us

    engine = copy.engine
    raw = dict(snap.emulator_config)
    raw["seed"] = scenario.seed
    raw["speed_mps"] = raw.get("speed_mps", 14.0) * scenario.speed_multiplier
    raw.update(scenario.overrides)
    config = EmulatorConfig(**raw)

    bookkeeping = snap.bookkeeping
    attachment = bookkeeping["attachment"]
    cell_index = {cell_id: i for i, cell_id in enumerate(sorted(bookkeeping["setup"]))}
    rntis = sorted(int(r) for r in attachment)
    serving = np.array([cell_index[attachment[str(r)]] for r in rntis])
    positions = np.zeros((len(rntis), 2))
    for row, rnti in enumerate(rntis):
        cell_id = attachment[str(rnti)]
        instance = engine.instance(f"{copy.prefix}:{cell_id}")
        latlon = instance.twins[f"ue-{rnti}"].properties["Location"].value
        positions[row] = geo_to_meters(latlon)

    # Align to the dispatch-frame grid so equal scenarios see identical
    # aggregation windows regardless of when the drive begins.
    frame_us = s_to_us(0.2)
    t0 = ((engine.now_us() // frame_us) + 1) * frame_us
    engine.clock.advance_to(t0)

    network = RanNetwork.from_state(config, positions, serving, np.array(rntis))
    network.t_us = t0

    bridge = RanTwinBridge.adopt(
        engine,
        BridgeConfig(
            granularity_s=config.granularity_s,
            hysteresis_db=config.hysteresis_db,
            instance_prefix=f"{copy.prefix}:",
        ),
        bookkeeping["setup"],
        bookkeeping,
    )
    for cell_id in network.cell_ids:
        network.subscribe(cell_id, "all", config.granularity_s)

    scheduler = Scheduler(engine.clock)
    driver = ScenarioDriver(engine, scheduler, network, bridge)
    if scenario.duration_s > 0:
        driver.start()
        scheduler.run_until(engine.now_us() + s_to_us(scenario.duration_s))
        driver.stop()
        driver.settle()
    return DriveResult(
        copy=copy,
        handovers=network.handover_count,
        completed_transcripts=sum(1 for t in bridge.transcripts if t.complete),
        bridge=bridge,
        network=network,
    )


# -- diffing -------------------------------------------------------------------


@dataclass
class DiffReport:
    added_twins: list[tuple[str, str]] = field(default_factory=list)
    removed_twins: list[tuple[str, str]] = field(default_factory=list)
    changed_properties: list[tuple[str, str, str, Any, Any]] = field(default_factory=list)
    added_relationships: list[tuple[str, str]] = field(default_factory=list)
    removed_relationships: list[tuple[str, str]] = field(default_factory=list)
    changed_payloads: list[tuple[str, str, str, Any, Any]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (
            self.added_twins
            or self.removed_twins
            or self.changed_properties
            or self.added_relationships
            or self.removed_relationships
            or self.changed_payloads
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "added_twins": [list(x) for x in self.added_twins],
            "removed_twins": [list(x) for x in self.removed_twins],
            "changed_properties": [list(x) for x in self.changed_properties],
            "added_relationships": [list(x) for x in self.added_relationships],
            "removed_relationships": [list(x) for x in self.removed_relationships],
            "changed_payloads": [list(x) for x in self.changed_payloads],
            "empty": self.empty,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def render_text(self) -> str:
        if self.empty:
            return "deployments identical\n"
        lines = []
        for role, twin in self.added_twins:
            lines.append(f"+ twin {role}/{twin}")
        for role, twin in self.removed_twins:
            lines.append(f"- twin {role}/{twin}")
        for role, twin, path, a, b in self.changed_properties:
            lines.append(f"~ {role}/{twin}.{path}: {a!r} -> {b!r}")
        for role, rel in self.added_relationships:
            lines.append(f"+ edge {role}/{rel}")
        for role, rel in self.removed_relationships:
            lines.append(f"- edge {role}/{rel}")
        for role, rel, path, a, b in self.changed_payloads:
            lines.append(f"~ edge {role}/{rel}.{path}: {a!r} -> {b!r}")
        return "\n".join(lines) + "\n"


def _view(subject) -> dict[str, dict[str, Any]]:
    """Normalize a Snapshot or live deployment into comparable role state."""
    if isinstance(subject, Snapshot):
        return subject.roles
    if isinstance(subject, CopyDeployment):
        return {
            role: _live_role_state(subject.engine, instance_id)
            for role, instance_id in sorted(subject.roles.items())
        }
    if isinstance(subject, Deployment):
        return {
            role: _live_role_state(subject.engine, instance_id)
            for role, instance_id in sorted(subject.roles().items())
        }
    raise TypeError(f"cannot diff {type(subject).__name__}")


def _live_role_state(engine: Engine, instance_id: str) -> dict[str, Any]:
    inst = engine.instance(instance_id)
    return {
        "models": sorted(serialize_model(m) for m in inst.registry),
        "twins": {
            twin_id: {
                "model": twin.model_id,
                "properties": {p: _plain(v.value) for p, v in sorted(twin.properties.items())},
            }
            for twin_id, twin in sorted(inst.twins.items())
        },
        "relationships": {
            rel_id: {
                "source": rel.source,
                "target": rel.target,
                "name": rel.name,
                "payload": {p: _plain(v.value) for p, v in sorted(rel.payload.items())},
            }
            for rel_id, rel in sorted(inst.relationships.items())
        },
    }


def diff(a, b) -> DiffReport:
    """Symmetric difference keyed by (role, twin id, path); empty iff identical."""
    va, vb = _view(a), _view(b)
    report = DiffReport()
    for role in sorted(set(va) | set(vb)):
        ta = va.get(role, {}).get("twins", {})
        tb = vb.get(role, {}).get("twins", {})
        for twin in sorted(set(ta) - set(tb)):
            report.removed_twins.append((role, twin))
        for twin in sorted(set(tb) - set(ta)):
            report.added_twins.append((role, twin))
        for twin in sorted(set(ta) & set(tb)):
            pa, pb = ta[twin]["properties"], tb[twin]["properties"]
            for path in sorted(set(pa) | set(pb)):
                if _plain(pa.get(path)) != _plain(pb.get(path)):
                    report.changed_properties.append(
                        (role, twin, path, pa.get(path), pb.get(path))
                    )
        ra = va.get(role, {}).get("relationships", {})
        rb = vb.get(role, {}).get("relationships", {})
        for rel in sorted(set(ra) - set(rb)):
            report.removed_relationships.append((role, rel))
        for rel in sorted(set(rb) - set(ra)):
            report.added_relationships.append((role, rel))
        for rel in sorted(set(ra) & set(rb)):
            qa, qb = ra[rel]["payload"], rb[rel]["payload"]
            for path in sorted(set(qa) | set(qb)):
                if _plain(qa.get(path)) != _plain(qb.get(path)):
                    report.changed_payloads.append((role, rel, path, qa.get(path), qb.get(path)))
    return report


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value

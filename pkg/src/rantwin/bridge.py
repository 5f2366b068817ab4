"""Sync bridge (the xApp): indications in, paced twin updates out.

The bridge maintains two graphs at once. Each cell gets its own instance
holding one gNB twin and the attached UE twins (gNB linked to each UE by a
relationship); a single overview instance holds one twin per cell whose 99
pre-allocated UE component slots carry Location and the latest serving-cell
RSRP. Telemetry samples collected between dispatches are averaged per
(twin, property) -- except RNTI, Location and the connected-UE count, which
are latest-value -- and a property is dispatched only when its windowed value
differs from what the twin already holds. Averages destined for integer
properties are rounded half-to-even.

Dispatching is paced: cell-instance twins at 10/s, overview cell twins at
5/s, each twin on a fixed offset inside its frame so instance load stays
uniform and the engine's per-twin/per-instance limits are never exceeded by
construction. Every patch entry is stamped with sourceTime = dispatch time.

Handover migrates a UE with create-at-target before delete-at-source; any
step that cannot complete yet (typically target-twin visibility) is retried
on subsequent ticks until the transcript converges. The bridge's own
bookkeeping never counts a UE attached to two cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import emulator as emu
from .engine import Engine, Instance
from .errors import (
    BelowServiceLimit,
    DuplicateRelationship,
    PayloadTooLarge,
    RanTwinError,
    RateLimitExceeded,
    UnknownTwin,
)
from .modeling import (
    CELL_GNB_MODEL,
    CELL_UE_MODEL,
    MULTI_GNB_MODEL,
    MULTI_UE_MODEL,
    NEIGHBOR_RELATIONSHIP,
    SERVES_RELATIONSHIP,
    UE_SLOT_COUNT,
    builtin_models,
)
from .timebase import s_to_us

MAX_RNTI_SPACE = 1000

# Empty-slot sentinels keep cleared overview components model-conformant.
VACANT_LOCATION = (0.0, 0.0)
VACANT_RSRP = 30.0

_INT_METRIC_COLS = tuple(
    i for i, name in enumerate(emu.NUMERIC_METRICS)
    if name in ("Buffer", "UL CQI", "DL CQI", "UL MCS", "DL MCS")
)
_N_METRICS = len(emu.NUMERIC_METRICS)


@dataclass(frozen=True)
class CapacityPlan:
    update_period_s: float
    max_twins: int


def plan_capacity(update_period_s: float) -> CapacityPlan:
    """Twins an instance can sustain when each updates every R seconds."""
    if update_period_s < 0.1:
        raise BelowServiceLimit(
            f"update period {update_period_s} s is below the 0.1 s per-twin floor"
        )
    return CapacityPlan(update_period_s, math.floor(1000 * update_period_s))


@dataclass
class BridgeConfig:
    granularity_s: float = 0.01
    cell_rate_hz: float = 10.0
    multi_rate_hz: float = 5.0
    hysteresis_db: float = 3.0
    seed: int = 0
    instance_prefix: str = ""
    # neighbour edges connect cells within this multiple of the closest pair
    neighbor_factor: float = 1.05

    @classmethod
    def from_config(cls, config: dict) -> "BridgeConfig":
        return cls(**config)


@dataclass
class Migration:
    rnti: int
    source: str | None
    target: str
    started_us: int
    twin_created: bool = False
    rel_created: bool = False
    rel_deleted: bool = False
    slot_moved: bool = False
    old_rel: tuple[str, str] | None = None
    steps: list[tuple[int, str]] = field(default_factory=list)
    complete: bool = False

    def mark(self, t_us: int, step: str) -> None:
        self.steps.append((t_us, step))

    def to_wire(self) -> dict[str, Any]:
        return {
            "rnti": self.rnti,
            "source": self.source,
            "target": self.target,
            "started": self.started_us,
            "steps": [{"t": t, "step": s} for t, s in self.steps],
            "complete": self.complete,
        }


@dataclass
class UEBinding:
    rnti: int
    twin_id: str
    cell: str  # bookkeeping attachment (exactly one)
    twins: dict[str, int] = field(default_factory=dict)  # cell id -> visible_at_us
    rel: tuple[str, str] | None = None  # (cell id, relationship id)
    slot: tuple[str, int] | None = None  # (cell id, slot index 1..99)
    migration: Migration | None = None


class _CellRuntime:
    def __init__(self, info: emu.E2SetupInfo, instance: Instance, gnb_twin: str, multi_twin: str) -> None:
        self.info = info
        self.instance = instance
        self.gnb_twin = gnb_twin
        self.gnb_visible_us = 0
        self.multi_twin = multi_twin
        self.multi_offset = 0
        self.slots: list[int | None] = [None] * UE_SLOT_COUNT  # slot -> rnti
        # Sticky per-twin frame offsets: a twin keeps its offset for the whole
        # run so consecutive dispatches stay exactly one frame apart.
        self.offsets: dict[str, int] = {gnb_twin: 0}
        self._next_offset = 0
        # change-detection memory, indexed by rnti
        self.sent_metrics = np.zeros((MAX_RNTI_SPACE, _N_METRICS))
        self.sent_loc = np.zeros((MAX_RNTI_SPACE, 2))
        self.sent_valid = np.zeros(MAX_RNTI_SPACE, dtype=bool)
        self.sent_rnti = np.zeros(MAX_RNTI_SPACE, dtype=bool)
        # overview-slot change-detection memory, indexed by slot
        self.slot_sent_loc = np.zeros((UE_SLOT_COUNT, 2))
        self.slot_sent_rsrp = np.zeros(UE_SLOT_COUNT)
        self.slot_sent_valid = np.zeros(UE_SLOT_COUNT, dtype=bool)
        self.pending_slot_clears: set[int] = set()
        self.gnb_sent: dict[str, Any] = {}

    def offset_of(self, twin_id: str) -> int:
        offset = self.offsets.get(twin_id)
        if offset is None:
            offset = 1 + (self._next_offset % UE_SLOT_COUNT)
            self._next_offset += 1
            self.offsets[twin_id] = offset
        return offset

    def free_slot(self) -> int:
        for i, holder in enumerate(self.slots):
            if holder is None:
                return i
        raise RuntimeError(f"{self.info.cell_id}: no free overview slot")


class RanTwinBridge:
    """Keeps the twin graphs synchronized with the emulated network."""

    def __init__(self, engine: Engine, config: BridgeConfig | None = None) -> None:
        self.engine = engine
        self.config = config or BridgeConfig()
        plan = plan_capacity(1.0 / self.config.cell_rate_hz)
        if plan.max_twins < UE_SLOT_COUNT + 1:
            raise BelowServiceLimit(
                f"cell rate {self.config.cell_rate_hz}/s cannot sustain a full cell"
            )
        self.registry = builtin_models()
        self.multi_instance: Instance | None = None
        self.cells: dict[str, _CellRuntime] = {}
        self.ues: dict[int, UEBinding] = {}
        self.transcripts: list[Migration] = []
        self._migrating: set[int] = set()
        self.incidents: dict[str, int] = {"rate_limited": 0, "too_large": 0, "deferred": 0}
        self.dispatch_log: list[tuple[int, str, str, tuple]] | None = None
        self._multi_visible_us = 0
        self._pending_neighbor_edges: list[tuple[str, str]] = []
        self._last_dispatch_us: dict[tuple[str, str], int] = {}
        # aggregation windows, indexed by rnti
        self._sums = np.zeros((MAX_RNTI_SPACE, _N_METRICS))
        self._counts = np.zeros(MAX_RNTI_SPACE, dtype=np.int64)
        self._latest_metrics = np.zeros((MAX_RNTI_SPACE, _N_METRICS))
        self._latest_loc = np.zeros((MAX_RNTI_SPACE, 2))
        self._gnb_window: dict[str, dict[str, Any]] = {}
        self._frame_us = s_to_us(1.0 / self.config.cell_rate_hz)
        self._multi_frame_us = s_to_us(1.0 / self.config.multi_rate_hz)

    # -- identifiers -------------------------------------------------------------

    def _iid(self, name: str) -> str:
        return f"{self.config.instance_prefix}{name}"

    @property
    def multi_instance_id(self) -> str:
        return self._iid("multi")

    def cell_instance_id(self, cell_id: str) -> str:
        return self._iid(cell_id)

    @staticmethod
    def ue_twin_id(rnti: int) -> str:
        return f"ue-{rnti}"

    @staticmethod
    def gnb_twin_id(cell_id: str) -> str:
        return f"gnb-{cell_id}"

    def record_dispatches(self, enabled: bool = True) -> None:
        self.dispatch_log = [] if enabled else None

    # -- setup ---------------------------------------------------------------------

    def on_e2_setup(self, info: emu.E2SetupInfo, at: int | None = None) -> _CellRuntime:
        """Admit a cell: overview twin, fresh cell instance, neighbour edges."""
        existing = self.cells.get(info.cell_id)
        if existing is not None:
            return existing
        t = self.engine.clock.now_us() if at is None else at

        if self.multi_instance is None:
            self.multi_instance = self.engine.create_instance(self.multi_instance_id)
            self.engine.upload_models(
                self.multi_instance,
                [self.registry.get(MULTI_UE_MODEL), self.registry.get(MULTI_GNB_MODEL)],
                at=t,
            )
        multi_twin = info.cell_id
        initial: dict[str, Any] = {"PLMN": info.plmn, "ARFCN": info.arfcn}
        for slot in range(1, UE_SLOT_COUNT + 1):
            initial[f"UE{slot}.Location"] = VACANT_LOCATION
            initial[f"UE{slot}.RSRP"] = VACANT_RSRP
        receipt = self.engine.create_twin(self.multi_instance, multi_twin, MULTI_GNB_MODEL, initial, at=t)
        self._multi_visible_us = max(self._multi_visible_us, receipt.response_time_us)

        instance = self.engine.create_instance(self.cell_instance_id(info.cell_id))
        self.engine.upload_models(
            instance,
            [self.registry.get(CELL_UE_MODEL), self.registry.get(CELL_GNB_MODEL)],
            at=t,
        )
        gnb = self.gnb_twin_id(info.cell_id)
        g_receipt = self.engine.create_twin(
            instance, gnb, CELL_GNB_MODEL,
            {"Tx Power": info.tx_power_dbm, "Connected UEs": 0},
            at=t,
        )
        runtime = _CellRuntime(info, instance, gnb, multi_twin)
        runtime.gnb_visible_us = g_receipt.response_time_us
        runtime.multi_offset = len(self.cells)
        self.cells[info.cell_id] = runtime
        self._gnb_window[info.cell_id] = {}

        for other_id in self._adjacent_cells(info.cell_id):
            self._pending_neighbor_edges.append((info.cell_id, other_id))
            self._pending_neighbor_edges.append((other_id, info.cell_id))
        return runtime

    def _adjacent_cells(self, cell_id: str) -> list[str]:
        me = self.cells[cell_id].info
        others = [c.info for c in self.cells.values() if c.info.cell_id != cell_id]
        if not others:
            return []
        all_infos = [c.info for c in self.cells.values()]
        dmin = min(
            _distance(a.position_m, b.position_m)
            for i, a in enumerate(all_infos)
            for b in all_infos[i + 1:]
        )
        limit = dmin * self.config.neighbor_factor
        return [o.cell_id for o in others if _distance(me.position_m, o.position_m) <= limit]

    def _flush_neighbor_edges(self, t_us: int) -> None:
        if t_us < self._multi_visible_us or not self._pending_neighbor_edges:
            return
        remaining = []
        for src, dst in self._pending_neighbor_edges:
            power = self._neighbor_power(src, dst)
            try:
                self.engine.create_relationship(
                    self.multi_instance_id, src, dst, NEIGHBOR_RELATIONSHIP,
                    payload={"Received Power": power},
                    at=t_us,
                )
            except UnknownTwin:
                remaining.append((src, dst))
            except DuplicateRelationship:
                pass
        self._pending_neighbor_edges = remaining

    def _neighbor_power(self, at_cell: str, from_cell: str) -> float:
        """Received power at one cell site from a neighbouring gNB."""
        cfg_a = self.cells[at_cell].info
        cfg_b = self.cells[from_cell].info
        d = max(_distance(cfg_a.position_m, cfg_b.position_m), 1.0)
        pl = 40.0 + 30.0 * math.log10(d)
        return float(np.clip(cfg_b.tx_power_dbm - pl + 160.0, 30.0, 160.0))

    # -- indication ingestion ---------------------------------------------------------

    def ingest_indication(self, report: emu.IndicationReport) -> None:
        if report.kind == emu.INSERT:
            event = report.event or {}
            if event.get("event") == "handover":
                self.handle_handover(
                    event["RNTI"], event["source_cell"], event["target_cell"], report.t_us
                )
            return
        if report.cell_id not in self.cells:
            self.incidents["deferred"] += 1  # unknown cell: dropped with counter
            return
        rntis = report.rntis
        if rntis is None or len(rntis) == 0:
            self._record_gnb_sample(report)
            return
        metric_matrix = np.column_stack(
            [report.metrics[name] for name in emu.NUMERIC_METRICS]
        )
        self._sums[rntis] += metric_matrix
        self._counts[rntis] += 1
        self._latest_metrics[rntis] = metric_matrix
        if report.locations is not None:
            self._latest_loc[rntis] = report.locations
        self._record_gnb_sample(report)
        for r in rntis:
            rnti = int(r)
            if rnti not in self.ues:
                self._admit_ue(rnti, report.cell_id, report.t_us)

    def _record_gnb_sample(self, report: emu.IndicationReport) -> None:
        window = self._gnb_window[report.cell_id]
        cv = report.cell_values
        if "Tx Power" in cv:
            window.setdefault("tx_sum", 0.0)
            window.setdefault("tx_n", 0)
            window["tx_sum"] += cv["Tx Power"]
            window["tx_n"] += 1
        if "Connected UEs" in cv:
            window["connected"] = cv["Connected UEs"]

    def _admit_ue(self, rnti: int, cell_id: str, t_us: int) -> None:
        binding = UEBinding(rnti, self.ue_twin_id(rnti), cell_id)
        binding.migration = Migration(rnti, None, cell_id, t_us)
        self.ues[rnti] = binding
        self._migrating.add(rnti)

    # -- handover ---------------------------------------------------------------------

    def handle_handover(self, rnti: int, source_cell: str, target_cell: str, at_us: int) -> Migration:
        binding = self.ues.get(rnti)
        if binding is None:
            self._admit_ue(rnti, target_cell, at_us)
            return self.ues[rnti].migration  # type: ignore[return-value]
        migration = Migration(rnti, source_cell, target_cell, at_us)
        if source_cell == target_cell:
            migration.complete = True
            migration.mark(at_us, "noop")
            self.transcripts.append(migration)
            return migration
        if binding.migration is not None and not binding.migration.complete:
            # Chained handover: finish bookkeeping against the newest target.
            binding.migration.mark(at_us, f"superseded->{target_cell}")
            binding.migration.complete = True
            self.transcripts.append(binding.migration)
            migration.source = binding.migration.source if not binding.migration.rel_created else source_cell
        binding.cell = target_cell
        binding.migration = migration
        self._migrating.add(rnti)
        return migration

    def _process_migrations(self, t_us: int) -> None:
        for rnti in sorted(self._migrating):
            binding = self.ues[rnti]
            mig = binding.migration
            if mig is None or mig.complete:
                self._migrating.discard(rnti)
                continue
            self._advance_migration(binding, mig, t_us)
            if mig.complete:
                self._migrating.discard(rnti)

    def _advance_migration(self, binding: UEBinding, mig: Migration, t_us: int) -> None:
        target = self.cells.get(mig.target)
        if target is None:
            return
        # 1. ensure the UE twin exists in the target instance
        if mig.target not in binding.twins:
            receipt = self.engine.create_twin(
                target.instance, binding.twin_id, CELL_UE_MODEL, {}, at=t_us
            )
            binding.twins[mig.target] = receipt.response_time_us
            mig.twin_created = True
            mig.mark(t_us, "twin-created")
        # 2. relationship at the target (needs twin visibility)
        if not mig.rel_created:
            if t_us < binding.twins[mig.target] or t_us < target.gnb_visible_us:
                return  # not visible yet; retry next tick
            rsrp = int(np.clip(round(self._latest_metrics[binding.rnti, 0]), 30, 160))
            try:
                self.engine.create_relationship(
                    target.instance, target.gnb_twin, binding.twin_id,
                    SERVES_RELATIONSHIP, payload={"RSRP": rsrp}, at=t_us,
                )
            except DuplicateRelationship:
                pass
            except UnknownTwin:
                return
            mig.old_rel = binding.rel
            binding.rel = (mig.target, f"{target.gnb_twin}|{SERVES_RELATIONSHIP}|{binding.twin_id}")
            mig.rel_created = True
            mig.mark(t_us, "rel-created")
        # 3. delete the source relationship
        if not mig.rel_deleted:
            if mig.old_rel is not None:
                cell_id, rel_id = mig.old_rel
                try:
                    self.engine.delete_relationship(self.cells[cell_id].instance, rel_id, at=t_us)
                except RanTwinError:
                    pass
                mig.mark(t_us, "rel-deleted")
            mig.rel_deleted = True
        # 4. move the overview component slot (bookkeeping; values ride the
        #    next paced overview frame so the multi twin never exceeds budget)
        if not mig.slot_moved:
            self._move_slot(binding, mig, t_us)
            mig.slot_moved = True
        # 5. retire the orphaned source twin
        if mig.source is not None and mig.source in binding.twins and mig.source != mig.target:
            try:
                self.engine.delete_twin(self.cells[mig.source].instance, binding.twin_id, at=t_us)
            except RanTwinError:
                return  # e.g. relationship still pending deletion; retry
            del binding.twins[mig.source]
            mig.mark(t_us, "twin-retired")
        mig.complete = True
        mig.mark(t_us, "complete")
        self.transcripts.append(mig)

    def _move_slot(self, binding: UEBinding, mig: Migration, t_us: int) -> None:
        rnti = binding.rnti
        if binding.slot is not None and binding.slot[0] != mig.target:
            cell_id, slot = binding.slot
            runtime = self.cells[cell_id]
            runtime.slots[slot] = None
            runtime.pending_slot_clears.add(slot)
            binding.slot = None
            mig.mark(t_us, "slot-cleared")
        if binding.slot is None:
            runtime = self.cells[mig.target]
            slot = runtime.free_slot()
            runtime.slots[slot] = rnti
            runtime.slot_sent_valid[slot] = False
            runtime.pending_slot_clears.discard(slot)
            binding.slot = (mig.target, slot)
            mig.mark(t_us, "slot-set")

    # -- paced dispatching ----------------------------------------------------------

    def on_tick(self, t_us: int) -> None:
        """Drive pending work and any frames due exactly at this tick."""
        self._flush_neighbor_edges(t_us)
        self._process_migrations(t_us)
        if t_us % self._frame_us == 0:
            for cell_id in sorted(self.cells):
                self._dispatch_cell_frame(cell_id, t_us)
        if t_us % self._multi_frame_us == 0:
            for cell_id in sorted(self.cells):
                self._dispatch_overview_frame(cell_id, t_us)

    def _dispatch_cell_frame(self, cell_id: str, frame_us: int) -> None:
        runtime = self.cells[cell_id]
        # gNB twin first (offset 0), then UEs in stable rnti order.
        gnb_patch = self._gnb_patch(runtime, frame_us)
        if gnb_patch:
            self._dispatch(runtime.instance, runtime.gnb_twin, gnb_patch, frame_us, 0)
        members = sorted(r for r, b in self.ues.items() if b.cell == cell_id)
        for rnti in members:
            binding = self.ues[rnti]
            offset = runtime.offset_of(binding.twin_id)
            visible_at = binding.twins.get(cell_id)
            at = frame_us + offset * 1000
            if visible_at is None or at < visible_at:
                continue  # twin not (yet) usable; window keeps accumulating
            if self._counts[rnti] == 0:
                continue
            patch, means = self._ue_patch(runtime, rnti, at)
            if patch:
                if not self._dispatch(runtime.instance, binding.twin_id, patch, frame_us, offset):
                    continue  # deferred: window intact
            self._clear_window(rnti, runtime, means if patch else None)

    def _ue_patch(self, runtime: _CellRuntime, rnti: int, source_us: int) -> tuple[list, np.ndarray]:
        n = self._counts[rnti]
        means = self._sums[rnti] / n
        for col in _INT_METRIC_COLS:
            means[col] = np.rint(means[col])
        entries = []
        if not runtime.sent_rnti[rnti]:
            entries.append(("RNTI", rnti, source_us))
        loc = self._latest_loc[rnti]
        if not runtime.sent_valid[rnti] or loc[0] != runtime.sent_loc[rnti, 0] or loc[1] != runtime.sent_loc[rnti, 1]:
            entries.append(("Location", (float(loc[0]), float(loc[1])), source_us))
        sent = runtime.sent_metrics[rnti]
        valid = runtime.sent_valid[rnti]
        for col, name in enumerate(emu.NUMERIC_METRICS):
            value = means[col]
            if valid and value == sent[col]:
                continue
            if col in _INT_METRIC_COLS:
                entries.append((name, int(value), source_us))
            else:
                entries.append((name, float(value), source_us))
        return entries, means

    def _clear_window(self, rnti: int, runtime: _CellRuntime, sent_means: np.ndarray | None) -> None:
        if sent_means is not None:
            runtime.sent_metrics[rnti] = sent_means
            runtime.sent_loc[rnti] = self._latest_loc[rnti]
            runtime.sent_valid[rnti] = True
            runtime.sent_rnti[rnti] = True
        self._sums[rnti] = 0.0
        self._counts[rnti] = 0

    def _gnb_patch(self, runtime: _CellRuntime, source_us: int) -> list:
        window = self._gnb_window[runtime.info.cell_id]
        entries = []
        if window.get("tx_n"):
            tx = window["tx_sum"] / window["tx_n"]
            if runtime.gnb_sent.get("Tx Power") != tx:
                entries.append(("Tx Power", float(tx), source_us))
                runtime.gnb_sent["Tx Power"] = tx
        if "connected" in window:
            connected = window["connected"]
            if runtime.gnb_sent.get("Connected UEs") != connected:
                entries.append(("Connected UEs", int(connected), source_us))
                runtime.gnb_sent["Connected UEs"] = connected
        window.clear()
        return entries

    def _dispatch_overview_frame(self, cell_id: str, frame_us: int) -> None:
        runtime = self.cells[cell_id]
        at = frame_us + runtime.multi_offset * 1000
        if at < self._multi_visible_us:
            return
        entries = []
        commits: list[tuple[int, tuple[float, float] | None, float | None]] = []
        cleared = sorted(runtime.pending_slot_clears)
        for slot in cleared:
            entries.append((f"UE{slot + 1}.Location", VACANT_LOCATION, at))
            entries.append((f"UE{slot + 1}.RSRP", VACANT_RSRP, at))
        for slot, rnti in enumerate(runtime.slots):
            if rnti is None:
                continue
            loc = self._latest_loc[rnti]
            rsrp = float(np.clip(self._latest_metrics[rnti, 0], 30.0, 160.0))
            new_loc = None
            if (
                not runtime.slot_sent_valid[slot]
                or loc[0] != runtime.slot_sent_loc[slot, 0]
                or loc[1] != runtime.slot_sent_loc[slot, 1]
            ):
                new_loc = (float(loc[0]), float(loc[1]))
                entries.append((f"UE{slot + 1}.Location", new_loc, at))
            new_rsrp = None
            if not runtime.slot_sent_valid[slot] or rsrp != runtime.slot_sent_rsrp[slot]:
                new_rsrp = rsrp
                entries.append((f"UE{slot + 1}.RSRP", rsrp, at))
            if new_loc is not None or new_rsrp is not None:
                commits.append((slot, new_loc, new_rsrp))
        if not entries:
            return
        at = self._monotone_at(self.multi_instance_id, runtime.multi_twin, at)
        try:
            self.engine.update_twin(self.multi_instance_id, runtime.multi_twin, entries, at=at)
        except (RateLimitExceeded, PayloadTooLarge) as exc:
            self._count_incident(exc)
            return
        self._log_dispatch(at, self.multi_instance_id, runtime.multi_twin, entries)
        for slot in cleared:
            runtime.pending_slot_clears.discard(slot)
            runtime.slot_sent_loc[slot] = VACANT_LOCATION
            runtime.slot_sent_rsrp[slot] = VACANT_RSRP
            runtime.slot_sent_valid[slot] = False
        for slot, new_loc, new_rsrp in commits:
            if new_loc is not None:
                runtime.slot_sent_loc[slot] = new_loc
            if new_rsrp is not None:
                runtime.slot_sent_rsrp[slot] = new_rsrp
            runtime.slot_sent_valid[slot] = True

    def _dispatch(self, instance: Instance, twin: str, patch: list, frame_us: int, offset: int) -> bool:
        at = self._monotone_at(instance.id, twin, frame_us + offset * 1000)
        try:
            if len(patch) > 0:
                self._split_safe_update(instance, twin, patch, at)
        except RateLimitExceeded as exc:
            self._count_incident(exc)
            return False
        except UnknownTwin:
            return False
        self._log_dispatch(at, instance.id, twin, patch)
        return True

    def _split_safe_update(self, instance: Instance, twin: str, patch: list, at: int) -> None:
        try:
            self.engine.update_twin(instance, twin, patch, at=at)
        except PayloadTooLarge as exc:
            self._count_incident(exc)
            half = len(patch) // 2
            if half == 0:
                raise
            self.engine.update_twin(instance, twin, patch[:half], at=at)
            self.engine.update_twin(
                instance, twin, patch[half:],
                at=self._monotone_at(instance.id, twin, at + 1000),
            )

    def _monotone_at(self, instance_id: str, twin: str, at: int) -> int:
        # Per-twin dispatch instants must never regress: the engine's sliding
        # windows assume monotone timestamps per twin.
        key = (instance_id, twin)
        at = max(at, self._last_dispatch_us.get(key, 0) + 1)
        self._last_dispatch_us[key] = at
        return at

    def _count_incident(self, exc: Exception) -> None:
        if isinstance(exc, RateLimitExceeded):
            self.incidents["rate_limited"] += 1
        elif isinstance(exc, PayloadTooLarge):
            self.incidents["too_large"] += 1
        self.incidents["deferred"] += 1

    def _log_dispatch(self, at: int, instance_id: str, twin: str, patch: list) -> None:
        if self.dispatch_log is not None:
            self.dispatch_log.append((at, instance_id, twin, tuple(patch)))

    # -- adoption of an existing deployment ------------------------------------------------

    @classmethod
    def adopt(
        cls,
        engine: Engine,
        config: BridgeConfig,
        setup_facts: dict[str, dict],
        bookkeeping: dict[str, Any],
    ) -> "RanTwinBridge":
        """Bind a fresh bridge to already-populated instances (a spawned copy).

        Change-detection baselines are primed from the twins' current values
        so the first dispatches only carry real changes.
        """
        bridge = cls(engine, config)
        bridge.multi_instance = engine.instance(bridge.multi_instance_id)
        for cell_id, facts in sorted(setup_facts.items()):
            info = emu.E2SetupInfo(
                cell_id=cell_id,
                plmn=facts["plmn"],
                arfcn=facts["arfcn"],
                tx_power_dbm=facts["tx_power_dbm"],
                position_m=tuple(facts["position_m"]),
            )
            instance = engine.instance(bridge.cell_instance_id(cell_id))
            runtime = _CellRuntime(info, instance, cls.gnb_twin_id(cell_id), cell_id)
            runtime.multi_offset = len(bridge.cells)
            bridge.cells[cell_id] = runtime
            bridge._gnb_window[cell_id] = {}
        for cell_id, slots in bookkeeping.get("slots", {}).items():
            runtime = bridge.cells[cell_id]
            for slot_str, rnti in slots.items():
                runtime.slots[int(slot_str)] = rnti
        for rnti_str, cell_id in bookkeeping.get("attachment", {}).items():
            rnti = int(rnti_str)
            binding = UEBinding(rnti, cls.ue_twin_id(rnti), cell_id)
            for c, runtime in bridge.cells.items():
                if binding.twin_id in runtime.instance.twins:
                    binding.twins[c] = runtime.instance.twins[binding.twin_id].visible_at_us
            rel = bookkeeping.get("relationships", {}).get(rnti_str)
            if rel is not None:
                binding.rel = (rel[0], rel[1])
            bridge.ues[rnti] = binding
        for cell_id, runtime in bridge.cells.items():
            bridge._prime_sent_state(runtime)
        for rnti, binding in bridge.ues.items():
            for cell_id, runtime in bridge.cells.items():
                for slot, holder in enumerate(runtime.slots):
                    if holder == rnti:
                        binding.slot = (cell_id, slot)
        return bridge

    def _prime_sent_state(self, runtime: _CellRuntime) -> None:
        instance = runtime.instance
        gnb = instance.twins.get(runtime.gnb_twin)
        if gnb is not None:
            for name in ("Tx Power", "Connected UEs"):
                pv = gnb.properties.get(name)
                if pv is not None:
                    runtime.gnb_sent[name] = pv.value
        for rnti, binding in self.ues.items():
            twin = instance.twins.get(binding.twin_id)
            if twin is None or binding.cell != runtime.info.cell_id:
                continue
            for col, metric in enumerate(emu.NUMERIC_METRICS):
                pv = twin.properties.get(metric)
                if pv is not None:
                    runtime.sent_metrics[rnti, col] = pv.value
            loc = twin.properties.get("Location")
            if loc is not None:
                runtime.sent_loc[rnti] = loc.value
                self._latest_loc[rnti] = loc.value
            rsrp = twin.properties.get("RSRP")
            if rsrp is not None:
                self._latest_metrics[rnti, 0] = rsrp.value
            runtime.sent_valid[rnti] = "RSRP" in twin.properties
            runtime.sent_rnti[rnti] = "RNTI" in twin.properties
        multi = self.engine.instance(self.multi_instance_id).twins.get(runtime.multi_twin)
        if multi is not None:
            for slot in range(UE_SLOT_COUNT):
                loc = multi.properties.get(f"UE{slot + 1}.Location")
                rsrp = multi.properties.get(f"UE{slot + 1}.RSRP")
                if loc is not None:
                    runtime.slot_sent_loc[slot] = loc.value
                if rsrp is not None:
                    runtime.slot_sent_rsrp[slot] = rsrp.value
                runtime.slot_sent_valid[slot] = runtime.slots[slot] is not None

    # -- verification hooks -------------------------------------------------------------

    def attachment_map(self) -> dict[str, str]:
        return {b.twin_id: b.cell for b in self.ues.values()}

    def pending_migrations(self) -> int:
        return sum(1 for b in self.ues.values() if b.migration and not b.migration.complete)

    def quiescent(self) -> bool:
        return self.pending_migrations() == 0 and not self._pending_neighbor_edges

    def slot_occupancy(self) -> dict[str, dict[int, int]]:
        return {
            cell_id: {slot: rnti for slot, rnti in enumerate(rt.slots) if rnti is not None}
            for cell_id, rt in self.cells.items()
        }

    def export_bookkeeping(self) -> dict[str, Any]:
        """Snapshot-ready bridge state (attachments, slots, relationships)."""
        return {
            "attachment": {str(r): b.cell for r, b in sorted(self.ues.items())},
            "slots": {
                cell_id: {str(slot): rnti for slot, rnti in enumerate(rt.slots) if rnti is not None}
                for cell_id, rt in sorted(self.cells.items())
            },
            "relationships": {
                str(r): list(b.rel) for r, b in sorted(self.ues.items()) if b.rel is not None
            },
        }


def _distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])

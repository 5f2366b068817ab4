import numpy as np
import pytest

from rantwin.bridge import BridgeConfig, RanTwinBridge, plan_capacity
from rantwin.emulator import E2SetupInfo, EmulatorConfig, IndicationReport, NUMERIC_METRICS, RanNetwork, REPORT
from rantwin.engine import Engine
from rantwin.errors import BelowServiceLimit
from rantwin.modeling import MULTI_GNB_MODEL, SERVES_RELATIONSHIP
from rantwin.scenario import ScenarioDriver
from rantwin.timebase import Scheduler, s_to_us

from oracles import FRAME_US, WindowOracle, grid_adjacency, sliding_window_violations
from rigs import drive_rig

S = s_to_us(1.0)
MS = 1000


class TestCapacityPlan:
    def test_fastest_rate_gives_100_twins(self):
        assert plan_capacity(0.1).max_twins == 100

    def test_one_second_gives_1000(self):
        assert plan_capacity(1.0).max_twins == 1000

    def test_below_service_limit(self):
        with pytest.raises(BelowServiceLimit):
            plan_capacity(0.05)


def setup_infos(n, spacing=500.0):
    return [
        E2SetupInfo(f"cell-{i}", 26201, 620_000 + i, 30.0, ((i % 3 + 0.5) * spacing, (i // 3 + 0.5) * spacing))
        for i in range(n)
    ]


def mk_report(cell_id, t_us, rntis, cqi=5, rsrp=100.0, connected=None):
    k = len(rntis)
    metrics = {
        "RSRP": np.full(k, float(rsrp)),
        "Buffer": np.full(k, 10.0),
        "UL BLER": np.full(k, 0.25),
        "UL CQI": np.full(k, float(cqi)),
        "DL BLER": np.full(k, 0.25),
        "DL CQI": np.full(k, float(cqi)),
        "UL MCS": np.full(k, 9.0),
        "DL MCS": np.full(k, 9.0),
    }
    return IndicationReport(
        kind=REPORT,
        cell_id=cell_id,
        t_us=t_us,
        granularity_s=0.01,
        rntis=np.array(rntis),
        locations=np.tile([0.001, 0.002], (k, 1)),
        metrics=metrics,
        cell_values={"Connected UEs": connected if connected is not None else k, "Tx Power": 30.0},
    )


class ManualRig:
    """Bridge driven by hand-built reports on a 10 ms tick grid."""

    def __init__(self, n_cells=1, seed=7):
        self.engine = Engine(seed=seed)
        self.bridge = RanTwinBridge(self.engine, BridgeConfig())
        self.bridge.record_dispatches()
        self.infos = setup_infos(n_cells)
        for info in self.infos:
            self.bridge.on_e2_setup(info, at=0)
        self.t = 0

    def run(self, seconds, report_fn=None):
        for _ in range(round(seconds * 100)):
            self.t += 10 * MS
            self.engine.clock.advance_to(self.t)
            if report_fn is not None:
                for report in report_fn(self.t):
                    self.bridge.ingest_indication(report)
            self.bridge.on_tick(self.t)

    def patches_for(self, twin_id):
        return [
            (at, {p: v for p, v, _ in patch})
            for at, inst, twin, patch in self.bridge.dispatch_log or []
            if twin == twin_id
        ]


class TestSetup:
    def test_first_cell_structures(self):
        rig = ManualRig(n_cells=1)
        engine, bridge = rig.engine, rig.bridge
        assert bridge.multi_instance_id in engine.instances
        assert "cell-0" in engine.instances
        multi = engine.instances["multi"]
        assert list(multi.twins) == ["cell-0"]
        assert multi.twins["cell-0"].model_id == MULTI_GNB_MODEL
        assert list(engine.instances["cell-0"].twins) == ["gnb-cell-0"]

    def test_idempotent_setup(self):
        rig = ManualRig(n_cells=2)
        before = {i: set(inst.twins) for i, inst in rig.engine.instances.items()}
        rig.bridge.on_e2_setup(rig.infos[0], at=0)
        after = {i: set(inst.twins) for i, inst in rig.engine.instances.items()}
        assert before == after

    def test_neighbor_edges_match_adjacency_oracle(self):
        rig = ManualRig(n_cells=8)
        rig.run(4.0)  # let the multi twins become visible and edges flush
        assert not rig.bridge._pending_neighbor_edges
        expected = grid_adjacency({i.cell_id: i.position_m for i in rig.infos})
        actual = {
            (rel.source, rel.target)
            for rel in rig.engine.instances["multi"].relationships.values()
        }
        assert actual == expected

    def test_neighbor_edge_payload_is_received_power(self):
        rig = ManualRig(n_cells=2)
        rig.run(4.0)
        rels = rig.engine.instances["multi"].relationships
        for rel in rels.values():
            d = np.hypot(
                rig.infos[0].position_m[0] - rig.infos[1].position_m[0],
                rig.infos[0].position_m[1] - rig.infos[1].position_m[1],
            )
            expected = 30.0 - (40.0 + 30.0 * np.log10(d)) + 160.0
            assert rel.payload["Received Power"].value == pytest.approx(expected)


class TestAggregation:
    def bootstrap_ue(self, rig):
        """Feed constant reports until the UE twin dispatched once."""
        rig.run(3.0, lambda t: [mk_report("cell-0", t, [0])])
        patches = rig.patches_for("ue-0")
        assert patches, "UE twin should have dispatched during bootstrap"
        return patches

    def test_first_dispatch_contains_full_state(self):
        rig = ManualRig()
        first = self.bootstrap_ue(rig)[0][1]
        assert first["RNTI"] == 0
        assert first["Location"] == (0.001, 0.002)
        assert first["UL CQI"] == 5
        assert first["RSRP"] == 100.0

    def test_window_mean_of_6_and_8_dispatches_7(self):
        rig = ManualRig()
        self.bootstrap_ue(rig)
        values = iter([6, 8] * 5)

        def feeder(t):
            return [mk_report("cell-0", t, [0], cqi=next(values, 8))]

        rig.run(0.1, feeder)
        last = rig.patches_for("ue-0")[-1][1]
        assert last["UL CQI"] == 7  # exact arithmetic mean of the window

    def test_constant_window_mean(self):
        rig = ManualRig()
        self.bootstrap_ue(rig)
        rig.run(0.1, lambda t: [mk_report("cell-0", t, [0], cqi=7)])
        last = rig.patches_for("ue-0")[-1][1]
        assert last["UL CQI"] == 7

    def test_unchanged_metric_excluded(self):
        rig = ManualRig()
        self.bootstrap_ue(rig)
        n_before = len(rig.patches_for("ue-0"))
        rig.run(0.1, lambda t: [mk_report("cell-0", t, [0], rsrp=133.0)])
        patches = rig.patches_for("ue-0")
        assert len(patches) == n_before + 1
        last = patches[-1][1]
        assert last == {"RSRP": 133.0}  # only the changed value travels

    def test_no_change_no_patch(self):
        rig = ManualRig()
        self.bootstrap_ue(rig)
        n_before = len(rig.patches_for("ue-0"))
        rig.run(0.3, lambda t: [mk_report("cell-0", t, [0])])
        assert len(rig.patches_for("ue-0")) == n_before

    def test_float_mean_exact(self):
        rig = ManualRig()
        self.bootstrap_ue(rig)
        values = iter([100.5, 101.5] * 5)
        rig.run(0.1, lambda t: [mk_report("cell-0", t, [0], rsrp=next(values, 101.5))])
        assert rig.patches_for("ue-0")[-1][1]["RSRP"] == 101.0

    def test_source_time_is_dispatch_time(self):
        rig = ManualRig()
        self.bootstrap_ue(rig)
        rig.run(0.1, lambda t: [mk_report("cell-0", t, [0], cqi=11)])
        at, _, twin, patch = [
            e for e in rig.bridge.dispatch_log if e[2] == "ue-0"
        ][-1]
        assert all(entry[2] == at for entry in patch)

    def test_connected_ues_latest_value_on_gnb(self):
        rig = ManualRig()
        self.bootstrap_ue(rig)
        counts = iter([3, 4] * 6)
        rig.run(0.1, lambda t: [mk_report("cell-0", t, [0], connected=next(counts, 4))])
        last = rig.patches_for("gnb-cell-0")[-1][1]
        assert last["Connected UEs"] == 4  # latest, never averaged

    def test_unknown_cell_report_dropped_with_counter(self):
        rig = ManualRig()
        before = rig.bridge.incidents["deferred"]
        rig.bridge.ingest_indication(mk_report("cell-9", 10 * MS, [0]))
        assert rig.bridge.incidents["deferred"] == before + 1


def mig_slot_index(bridge, rnti):
    cell, slot = bridge.ues[rnti].slot
    return slot


def drive_scenario_rig(cells=2, ues=8, seconds=20.0, seed=7, speed=3.0, tap=None):
    engine, _, bridge, emulator, driver = drive_rig(
        cells=cells, ues=ues, seconds=seconds, seed=seed, speed=speed, tap=tap,
    )
    return engine, bridge, emulator, driver


class TestWindowDiffOracle:
    def test_dispatches_equal_brute_force_oracle(self):
        oracle = WindowOracle()
        end_us = s_to_us(20.0)
        engine, bridge, emulator, _ = drive_scenario_rig(tap=oracle.tap)
        assert emulator.handover_count == 0, "oracle scenario must stay handover-free"

        offsets = {}
        visible = {}
        for rnti, binding in bridge.ues.items():
            runtime = bridge.cells[binding.cell]
            offsets[rnti] = runtime.offsets[binding.twin_id]
            visible[rnti] = binding.twins[binding.cell]

        def dispatchable(frame, rnti):
            return frame + offsets[rnti] * 1000 >= visible[rnti]

        expected = oracle.expected_patches(end_us, dispatchable)

        actual = {}
        for at, inst, twin, patch in bridge.dispatch_log:
            if not twin.startswith("ue-"):
                continue
            frame = (at // FRAME_US) * FRAME_US
            if frame > end_us:
                continue
            rnti = int(twin.split("-")[1])
            actual[(frame, rnti)] = {p: v for p, v, _ in patch}

        assert actual == expected

    def test_pacing_counters_within_limits(self):
        engine, bridge, emulator, _ = drive_scenario_rig(seconds=15.0)
        per_twin: dict[tuple[str, str], list[int]] = {}
        per_instance: dict[str, list[int]] = {}
        for at, inst, twin, _ in bridge.dispatch_log:
            per_twin.setdefault((inst, twin), []).append(at)
            per_instance.setdefault(inst, []).append(at)
        for times in per_twin.values():
            assert sliding_window_violations(times, 10) == 0
        for times in per_instance.values():
            assert sliding_window_violations(times, 1000) == 0
        assert sum(i.stats["updates_rejected"] for i in engine.instances.values()) == 0


class TestHandoverMigration:
    def test_single_handover_transcript(self):
        engine = Engine(seed=3)
        scheduler = Scheduler(engine.clock)
        emulator = RanNetwork(EmulatorConfig(
            cells=2, ues_per_cell=2, area_m=1000.0, speed_mps=0.0, seed=3, noise_free=True,
        ))
        bridge = RanTwinBridge(engine, BridgeConfig())
        bridge.record_dispatches()
        for cell_id in emulator.cell_ids:
            bridge.on_e2_setup(emulator.e2_setup(cell_id), at=0)
            emulator.subscribe(cell_id, "all", 0.01)
        driver = ScenarioDriver(engine, scheduler, emulator, bridge)
        driver.start()
        scheduler.run_until(s_to_us(4.0))
        # teleport UE 0 next to cell-1; A3 fires after the time-to-trigger
        emulator.pos[0] = emulator.cell_pos[1] + np.array([3.0, 0.0])
        mark = len(bridge.dispatch_log)
        scheduler.run_until(s_to_us(10.0))
        driver.stop()
        driver.settle()

        migrations = [t for t in bridge.transcripts if t.source == "cell-0" and t.rnti == 0]
        assert len(migrations) == 1
        mig = migrations[0]
        steps = [s for _, s in mig.steps]
        assert steps[-1] == "complete"
        for needed in ("rel-created", "rel-deleted", "slot-cleared", "slot-set", "twin-retired"):
            assert needed in steps

        # graph state: one serves edge, at the target only; orphan retired
        cell0, cell1 = engine.instances["cell-0"], engine.instances["cell-1"]
        assert "ue-0" not in cell0.twins
        assert "ue-0" in cell1.twins
        serves = [r for r in cell1.relationships.values() if r.target == "ue-0"]
        assert len(serves) == 1 and not [
            r for r in cell0.relationships.values() if r.target == "ue-0"
        ]

        # the migration lands as exactly two overview twin patches: the source
        # slot vacated (sentinel values) and the target slot populated
        from rantwin.bridge import VACANT_RSRP

        multi_patches = [
            (twin, {p: v for p, v, _ in patch})
            for at, inst, twin, patch in bridge.dispatch_log[mark:]
            if inst == "multi"
        ]
        clears = [
            (twin, d) for twin, d in multi_patches
            if twin == "cell-0" and any(p.endswith(".RSRP") and v == VACANT_RSRP for p, v in d.items())
        ]
        target_slot = f"UE{mig_slot_index(bridge, 0) + 1}"
        sets = [
            (twin, d) for twin, d in multi_patches
            if twin == "cell-1" and any(p.startswith(target_slot + ".") for p in d)
        ]
        assert len(clears) == 1
        assert len(sets) == 1

    def test_same_cell_handover_noop(self):
        rig = ManualRig()
        rig.run(3.0, lambda t: [mk_report("cell-0", t, [0])])
        before = rig.engine.instances["cell-0"].stats["updates_accepted"]
        mig = rig.bridge.handle_handover(0, "cell-0", "cell-0", rig.t)
        assert mig.complete and [s for _, s in mig.steps] == ["noop"]
        rig.run(0.5, lambda t: [mk_report("cell-0", t, [0])])
        assert rig.bridge.ues[0].cell == "cell-0"

    def test_many_handovers_converge_to_ground_truth(self):
        engine, bridge, emulator, driver = drive_scenario_rig(
            cells=3, ues=12, seconds=30.0, seed=11, speed=40.0,
        )
        assert emulator.handover_count >= 20
        assert bridge.quiescent()
        truth = {
            ue: emulator.cell_ids[idx] for ue, idx in emulator.attachment_map().items()
        }
        assert bridge.attachment_map() == truth

        # exactly one serves relationship per UE across all cell instances
        rel_targets: dict[str, int] = {}
        for inst in engine.instances.values():
            if inst.id == "multi":
                continue
            for rel in inst.relationships.values():
                if rel.name == SERVES_RELATIONSHIP:
                    rel_targets[rel.target] = rel_targets.get(rel.target, 0) + 1
        assert rel_targets == {ue: 1 for ue in truth}

        # exactly one overview slot per UE
        slot_holders: dict[int, int] = {}
        for cell_id, slots in bridge.slot_occupancy().items():
            for slot, rnti in slots.items():
                slot_holders[rnti] = slot_holders.get(rnti, 0) + 1
        assert slot_holders == {int(ue.split("-")[1]): 1 for ue in truth}

        # orphan twins are retired: each UE twin lives only in its serving cell
        for ue, cell in truth.items():
            for inst in engine.instances.values():
                if inst.id == "multi":
                    continue
                assert (ue in inst.twins) == (inst.id == cell)

        # the gNB connected counters settled to the emulator's counts
        for idx, cell_id in enumerate(emulator.cell_ids):
            gnb = engine.instances[cell_id].twins[f"gnb-{cell_id}"]
            assert gnb.properties["Connected UEs"].value == emulator.attached_per_cell()[idx]

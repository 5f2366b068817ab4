import numpy as np
import pytest

from rantwin.costing import UsageMeter
from rantwin.engine import Engine
from rantwin.errors import DuplicateInstance
from rantwin.modeling import CELL_UE_MODEL, builtin_models
from rantwin.scenario import ScenarioProfile, build_quiesced_deployment
from rantwin.timebase import s_to_us
from rantwin import whatif
from rantwin.whatif import (
    DriveScenario,
    SpawnPolicy,
    diff,
    drive_scenario,
    snapshot,
    snapshot_instances,
    spawn_copies,
)

S = s_to_us(1.0)

SMALL = dict(cells=2, ues_per_cell=6, area_m=800.0, warmup_s=4.0, seed=7,
             use_data_warehouse=False, use_location_route=False, query_rate_hz=0.0)


@pytest.fixture(scope="module")
def small_deployment():
    profile = ScenarioProfile(**SMALL)
    engine, meter, deployment = build_quiesced_deployment(profile)
    return engine, meter, deployment


class TestSnapshot:
    def test_empty_instance_snapshot(self):
        engine = Engine(seed=1)
        engine.create_instance("lonely")
        snap = snapshot_instances(engine, {"lonely": "lonely"})
        assert snap.roles["lonely"]["twins"] == {}
        assert snap.query_units > 0  # enumeration itself is charged

    def test_snapshot_twice_byte_identical(self, small_deployment):
        engine, meter, deployment = small_deployment
        a = snapshot(deployment)
        b = snapshot(deployment)
        assert a.to_json() == b.to_json()

    def test_snapshot_charges_cell_twins_only(self, small_deployment):
        engine, meter, deployment = small_deployment
        before = meter.snapshot()["query_units"]
        snap = snapshot(deployment)
        charged = meter.snapshot()["query_units"] - before
        cell_twins = sum(
            len(engine.instances[i].twins) for i in ("cell-0", "cell-1")
        )
        assert charged == snap.query_units == cell_twins

    def test_multi_reconstruction_matches_direct_enumeration(self, small_deployment):
        # The overview instance is rebuilt from bridge state instead of being
        # queried; it must equal what a (separately charged) enumeration sees.
        engine, meter, deployment = small_deployment
        snap = snapshot(deployment)
        direct = snapshot_instances(engine, {"multi": "multi"})
        assert snap.roles["multi"] == direct.roles["multi"]

    def test_save_load_round_trip(self, small_deployment, tmp_path):
        engine, _, deployment = small_deployment
        snap = snapshot(deployment)
        snap.save(tmp_path / "snap.json")
        loaded = whatif.Snapshot.load(tmp_path / "snap.json")
        assert loaded.to_json() == snap.to_json()


class TestSpawn:
    def test_copies_are_faithful(self, small_deployment):
        engine, meter, deployment = small_deployment
        snap = snapshot(deployment)
        result = spawn_copies(snap, 2, engine, prefix="faith")
        for copy in result.copies:
            assert diff(copy, snap).empty
        for copy in result.copies:
            for iid in copy.roles.values():
                engine.delete_instance(iid)

    def test_spawn_requires_at_least_one(self, small_deployment):
        engine, _, deployment = small_deployment
        snap = snapshot(deployment)
        with pytest.raises(ValueError):
            spawn_copies(snap, 0, engine)

    def test_single_empty_copy_near_instant(self):
        engine = Engine(seed=2)
        engine.create_instance("src")
        snap = snapshot_instances(engine, {"src": "src"})
        result = spawn_copies(snap, 1, engine, prefix="e")
        assert result.duration_s < 1.0

    def test_function_execution_decomposition(self, small_deployment):
        engine, meter, deployment = small_deployment
        snap = snapshot(deployment)
        before = meter.snapshot()["function_execution"]
        result = spawn_copies(snap, 5, engine, prefix="exec")
        charged = meter.snapshot()["function_execution"] - before
        roles = len(snap.roles)  # 3 at this scale
        assert charged == result.function_executions == SpawnPolicy().total(5, roles)
        # the published decomposition reaches 107 at full deployment shape
        assert SpawnPolicy().total(5, 9) == 107
        for copy in result.copies:
            for iid in copy.roles.values():
                engine.delete_instance(iid)

    def test_partial_spawn_rolls_back(self, small_deployment):
        engine, meter, deployment = small_deployment
        snap = snapshot(deployment)
        engine.create_instance("boom1:multi")  # collide with the second copy
        instances_before = set(engine.instances)
        with pytest.raises(DuplicateInstance):
            spawn_copies(snap, 2, engine, prefix="boom")
        assert set(engine.instances) == instances_before


class TestDiff:
    def test_identical_copies_empty(self, small_deployment):
        engine, _, deployment = small_deployment
        snap = snapshot(deployment)
        result = spawn_copies(snap, 2, engine, prefix="dd")
        a, b = result.copies
        assert diff(a, b).empty
        for copy in result.copies:
            for iid in copy.roles.values():
                engine.delete_instance(iid)

    def test_one_change_one_entry(self, small_deployment):
        engine, _, deployment = small_deployment
        snap = snapshot(deployment)
        result = spawn_copies(snap, 1, engine, prefix="ch")
        copy = result.copies[0]
        inst = copy.roles["cell-0"]
        twin = sorted(engine.instances[inst].twins)[0]
        at = engine.now_us() + S
        engine.update_twin(inst, twin, [("Connected UEs", 2, at)], at=at)
        report = diff(copy, snap)
        assert len(report.changed_properties) == 1
        role, tw, path, a_val, b_val = report.changed_properties[0]
        assert (role, tw, path) == ("cell-0", twin, "Connected UEs")
        assert not report.empty
        assert "Connected UEs" in report.render_text()
        for iid in copy.roles.values():
            engine.delete_instance(iid)

    def test_diff_report_json_shape(self):
        report = whatif.DiffReport()
        assert report.empty
        assert "identical" in report.render_text()
        assert '"empty":true' in report.to_json()


class TestDrive:
    def test_zero_duration_drive_is_identity(self, small_deployment):
        engine, _, deployment = small_deployment
        snap = snapshot(deployment)
        result = spawn_copies(snap, 1, engine, prefix="z")
        copy = result.copies[0]
        drive_scenario(copy, snap, DriveScenario(duration_s=0.0))
        assert diff(copy, snap).empty
        for iid in copy.roles.values():
            engine.delete_instance(iid)

    def test_doubled_speed_yields_more_handovers(self):
        profile = ScenarioProfile(cells=3, ues_per_cell=8, area_m=700.0, speed_mps=18.0,
                                  warmup_s=4.0, seed=13,
                                  use_data_warehouse=False, use_location_route=False,
                                  query_rate_hz=0.0)
        engine, meter, deployment = build_quiesced_deployment(profile)
        snap = snapshot(deployment)
        result = spawn_copies(snap, 2, engine, prefix="sp")
        slow = drive_scenario(result.copies[0], snap,
                              DriveScenario(seed=5, duration_s=25.0, speed_multiplier=1.0))
        fast = drive_scenario(result.copies[1], snap,
                              DriveScenario(seed=5, duration_s=25.0, speed_multiplier=3.0))
        assert fast.handovers > slow.handovers
        assert fast.completed_transcripts >= fast.handovers  # admissions + handovers

    def test_same_scenario_identical_diffs_and_isolation(self):
        profile = ScenarioProfile(**SMALL)
        engine, meter, deployment = build_quiesced_deployment(profile)
        snap = snapshot(deployment)
        live_before = snapshot(deployment)
        result = spawn_copies(snap, 2, engine, prefix="tw")
        a, b = result.copies
        drive_scenario(a, snap, DriveScenario(seed=3, duration_s=8.0))
        drive_scenario(b, snap, DriveScenario(seed=3, duration_s=8.0))
        da = diff(a, snap)
        db = diff(b, snap)
        # role-keyed diffs are identical because the drives are deterministic
        assert da.to_json() == db.to_json()
        assert not da.empty
        # driving copies never touches the live deployment (content-wise; the
        # capture timestamp naturally advances)
        live_after = snapshot(deployment)
        assert live_after.roles == live_before.roles
        assert live_after.bookkeeping == live_before.bookkeeping

    def test_drive_event_log_replay_oracle(self):
        # replaying the copy's change events over the snapshot reproduces the
        # diff's changed-property values
        profile = ScenarioProfile(**SMALL)
        engine, meter, deployment = build_quiesced_deployment(profile)
        snap = snapshot(deployment)
        result = spawn_copies(snap, 1, engine, prefix="rp")
        copy = result.copies[0]

        events = []
        engine.attach_event_sink(events.append)
        drive_scenario(copy, snap, DriveScenario(seed=9, duration_s=8.0))
        engine.attach_event_sink(None)

        prefix = copy.prefix + ":"
        final = {}
        for e in events:
            if e.instance_id.startswith(prefix) and not e.path.startswith("$"):
                role = e.instance_id[len(prefix):]
                final[(role, e.twin_id, e.path)] = e.new_value

        report = diff(snap, copy)
        changed = {(role, twin, path): b for role, twin, path, a, b in report.changed_properties}
        for key, value in changed.items():
            assert key in final
            replayed = final[key]
            if isinstance(replayed, tuple):
                replayed = list(replayed)
            assert replayed == value

"""End-to-end scenario runner: emulated network, bridge, routes, KPIs, cost.

A scenario run has up to four phases on one simulated clock:

  A. operational sync -- the emulator steps at the report granularity, the
     bridge paces twin updates, routed events feed the warehouse sink, and an
     optional query workload exercises the instances. Meters are read over
     the post-warmup window and normalized to one hour.
  B. location-route measurement -- an external "fleet" twin is patched at
     5/s and each change is forwarded through a twin route onto a UE twin;
     end-to-end lag is sourceTime to the UE property's lastUpdatedTime.
  C. what-if -- snapshot the deployment, then repeatedly spawn five live
     copies to time the spawn pipeline.

The "max-rate" profile runs the sync at full pacing; "billing-calibrated"
adds the query workload that reproduces the published operations volume.
"""

from __future__ import annotations

import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .bridge import BridgeConfig, RanTwinBridge
from .costing import PriceTable, UsageMeter, hourly_cost
from .emulator import EmulatorConfig, IndicationReport, RanNetwork
from .engine import Engine
from .errors import UnknownTwin
from .events import EventFabric, SinkEndpoint, TwinRouteEndpoint
from .modeling import ModelInterface, PropertyDef, Schema
from .timebase import Scheduler, SimClock, s_to_us, us_to_s
from .wire import canonical_json
from . import whatif

FLEET_MODEL = ModelInterface(
    id="fleet/vehicle;1",
    properties=(
        PropertyDef("Location", Schema.GEOSPATIAL),
        PropertyDef("Battery", Schema.FLOAT, range=(0.0, 100.0)),
    ),
)


@dataclass
class ScenarioProfile:
    name: str = "billing-calibrated"
    cells: int = 8
    ues_per_cell: int = 99
    area_m: float = 2000.0
    speed_mps: float = 14.0
    granularity_s: float = 0.01
    cell_rate_hz: float = 10.0
    multi_rate_hz: float = 5.0
    query_rate_hz: float = 1111.0
    hysteresis_db: float = 3.0
    seed: int = 7
    duration_s: float = 60.0
    warmup_s: float = 6.0
    sink_window_s: float = 300.0
    sink_cache_interval_s: float = 14.0
    sink_row_bytes: int = 21
    route_events: int = 10000
    route_rate_hz: float = 5.0
    spawn_trials: int = 100
    spawn_copy_count: int = 5
    use_data_warehouse: bool = True
    use_location_route: bool = True
    use_whatif: bool = True

    @classmethod
    def from_config(cls, config: dict) -> "ScenarioProfile":
        return cls(**config)


def max_rate_profile(**overrides) -> ScenarioProfile:
    return ScenarioProfile(name="max-rate", query_rate_hz=0.0, **overrides)


def billing_calibrated_profile(**overrides) -> ScenarioProfile:
    return ScenarioProfile(name="billing-calibrated", **overrides)


PROFILES: dict[str, Callable[..., ScenarioProfile]] = {
    "max-rate": max_rate_profile,
    "billing-calibrated": billing_calibrated_profile,
}


class ScenarioDriver:
    """One recurring tick: step the emulator, feed the bridge, run queries."""

    def __init__(
        self,
        engine: Engine,
        scheduler: Scheduler,
        emulator: RanNetwork,
        bridge: RanTwinBridge,
        query_rate_hz: float = 0.0,
        query_start_us: int = 0,
        report_tap: Callable[[IndicationReport], None] | None = None,
    ) -> None:
        self.engine = engine
        self.scheduler = scheduler
        self.emulator = emulator
        self.bridge = bridge
        self.tick_us = s_to_us(emulator.config.granularity_s)
        self.query_rate_hz = query_rate_hz
        self.query_start_us = query_start_us
        self.report_tap = report_tap
        self.stopped = False
        self.queries_run = 0
        self.queries_skipped = 0
        self._query_seq = 0

    def start(self) -> None:
        now = self.scheduler.clock.now_us()
        first = ((now // self.tick_us) + 1) * self.tick_us
        self.scheduler.at(first, self._tick)

    def stop(self) -> None:
        self.stopped = True

    def _tick(self) -> None:
        if self.stopped:
            return
        t = self.scheduler.clock.now_us()
        self.emulator.step(us_to_s(self.tick_us))
        for indication in self.emulator.poll_indications(self.emulator.t_us):
            if self.report_tap is not None:
                self.report_tap(indication)
            self.bridge.ingest_indication(indication)
        self.bridge.on_tick(t)
        if self.query_rate_hz > 0 and t >= self.query_start_us:
            self._run_queries(t)
        self.scheduler.after(self.tick_us, self._tick)

    def _run_queries(self, t: int) -> None:
        rntis = sorted(self.bridge.ues)
        if not rntis:
            return
        period = 1e6 / self.query_rate_hz
        while self.query_start_us + round(self._query_seq * period) <= t:
            at = self.query_start_us + round(self._query_seq * period)
            self._query_seq += 1
            rnti = rntis[self._query_seq % len(rntis)]
            binding = self.bridge.ues[rnti]
            instance = self.bridge.cell_instance_id(binding.cell)
            try:
                self.engine.query_twin(instance, binding.twin_id, at=at)
                self.queries_run += 1
            except UnknownTwin:
                self.queries_skipped += 1

    def settle(self, max_s: float = 30.0) -> None:
        """Run bridge-only ticks until migrations/pending work converge."""
        clock = self.scheduler.clock
        deadline = clock.now_us() + s_to_us(max_s)
        quiet = 0
        t = clock.now_us()
        while quiet < 2 and t < deadline:
            t += self.tick_us
            self.scheduler.run_until(t)
            self.bridge.on_tick(t)
            quiet = quiet + 1 if self.bridge.quiescent() else 0


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class ScenarioReport:
    profile: dict[str, Any]
    kpis: dict[str, Any]
    checks: list[Check] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict[str, Any]:
        return {
            "profile": self.profile,
            "kpis": self.kpis,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks
            ],
            "all_passed": self.all_passed,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def render_table(self) -> str:
        k = self.kpis
        volume = k.get("data_volume_mb_per_hour")
        route = k.get("route_lag_ms", {}).get("mean")
        spawn = k.get("whatif", {}).get("spawn_mean_s")
        copies = k.get("whatif", {}).get("spawn_copies", "n")
        cost = k["cost"]
        rows = [
            ("Use case", "KPI", "Value", "Cost of running"),
            ("1 data warehouse", "data volume",
             f"{volume:.1f} MB/hour" if volume is not None else "n/a",
             f"${cost['use_case_1_total']:.2f}/hour"),
            ("2 location route", "twin-twin update latency",
             f"{route:.0f} ms" if route is not None else "n/a",
             f"${cost['use_case_2_total']:.2f}/hour"),
            (f"3 what-if copies", f"spawn time for {copies} copies",
             f"{spawn:.0f} s" if spawn is not None else "n/a",
             f"${cost['base']:.2f}/hour/copy"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
        lines.insert(1, "-" * (sum(widths) + 6))
        return "\n".join(lines) + "\n"


def _emulator_config(profile: ScenarioProfile) -> EmulatorConfig:
    return EmulatorConfig(
        cells=profile.cells,
        ues_per_cell=profile.ues_per_cell,
        area_m=profile.area_m,
        speed_mps=profile.speed_mps,
        granularity_s=profile.granularity_s,
        seed=profile.seed,
        hysteresis_db=profile.hysteresis_db,
    )


def _bootstrap(profile: ScenarioProfile) -> tuple[Engine, UsageMeter, Scheduler, RanNetwork, RanTwinBridge]:
    meter = UsageMeter()
    clock = SimClock()
    engine = Engine(seed=profile.seed, clock=clock, meter=meter)
    scheduler = Scheduler(clock)
    emulator = RanNetwork(_emulator_config(profile))
    bridge = RanTwinBridge(
        engine,
        BridgeConfig(
            granularity_s=profile.granularity_s,
            cell_rate_hz=profile.cell_rate_hz,
            multi_rate_hz=profile.multi_rate_hz,
            hysteresis_db=profile.hysteresis_db,
            seed=profile.seed,
        ),
    )
    for cell_id in emulator.cell_ids:
        bridge.on_e2_setup(emulator.e2_setup(cell_id), at=0)
        emulator.subscribe(cell_id, "all", profile.granularity_s)
    return engine, meter, scheduler, emulator, bridge


def build_quiesced_deployment(profile: ScenarioProfile):
    """Bootstrap, run through warmup, settle; for standalone what-if work."""
    engine, meter, scheduler, emulator, bridge = _bootstrap(profile)
    driver = ScenarioDriver(engine, scheduler, emulator, bridge)
    driver.start()
    scheduler.run_until(s_to_us(profile.warmup_s))
    driver.stop()
    driver.settle()
    deployment = whatif.Deployment(engine, bridge, emulator_config=asdict(_emulator_config(profile)))
    return engine, meter, deployment


def run_scenario(profile: ScenarioProfile, out_dir=None) -> ScenarioReport:
    out = Path(out_dir) if out_dir is not None else Path(tempfile.mkdtemp(prefix="rantwin-"))
    out.mkdir(parents=True, exist_ok=True)

    engine, meter, scheduler, emulator, bridge = _bootstrap(profile)
    emu_config = _emulator_config(profile)

    fabric = EventFabric(engine, scheduler, meter=meter)
    sink = None
    if profile.use_data_warehouse:
        sink = SinkEndpoint(
            out / "sink",
            window_s=min(profile.sink_window_s, profile.warmup_s + profile.duration_s),
            cache_interval_s=profile.sink_cache_interval_s,
            row_bytes=profile.sink_row_bytes,
        )
        for instance_id in sorted(engine.instances):
            fabric.create_route(instance_id, None, sink)
        meter.engage_event_hub(2)
        meter.engage_data_explorer()
    elif profile.use_location_route:
        meter.engage_event_hub(2)

    warm_us = s_to_us(profile.warmup_s)
    end_us = warm_us + s_to_us(profile.duration_s)
    driver = ScenarioDriver(
        engine, scheduler, emulator, bridge,
        query_rate_hz=profile.query_rate_hz, query_start_us=warm_us,
    )
    driver.start()
    scheduler.run_until(warm_us)
    meter_at_warm = meter.snapshot()
    scheduler.run_until(end_us)
    meter_at_end = meter.snapshot()
    driver.stop()
    driver.settle()

    window = {k: meter_at_end[k] - meter_at_warm.get(k, 0) for k in meter_at_end}
    hours = profile.duration_s / 3600.0
    hourly = {k: v / hours for k, v in window.items()}
    kpis: dict[str, Any] = {
        "duration_s": profile.duration_s,
        "messages_per_hour": hourly["message"],
        "operations_per_hour": hourly["operation"],
        "events_per_second": window["eventhub_message"] / profile.duration_s,
        "handovers": emulator.handover_count,
        "bridge_incidents": dict(bridge.incidents),
        "updates_rejected": sum(i.stats["updates_rejected"] for i in engine.instances.values()),
    }

    if sink is not None:
        rows_per_s = sink.rows_per_second(warm_us, end_us)
        kpis["sink_rows_per_second"] = rows_per_s
        kpis["data_volume_mb_per_hour"] = rows_per_s * profile.sink_row_bytes * 3600 / 1e6
        kpis["data_volume_mb_per_5min"] = rows_per_s * profile.sink_row_bytes * 300 / 1e6

    cost = hourly_cost(
        hourly,
        PriceTable(),
        throughput_units=meter.throughput_units,
        data_explorer=meter.data_explorer_engaged,
    )
    base = cost.twin_platform
    kpis["cost"] = {
        "base": base,
        "use_case_1_total": base + cost.event_hub + cost.data_explorer,
        "use_case_2_total": base + cost.event_hub,
        "query_unit_dollars": cost.query_units,
        "per_user": base / max(1, emulator.n_ues),
        "breakdown": cost.to_dict(),
    }

    if profile.use_location_route:
        kpis["route_lag_ms"] = _measure_location_route(
            engine, scheduler, fabric, bridge, profile, out
        )

    deployment = whatif.Deployment(engine, bridge, emulator_config=asdict(emu_config))
    if profile.use_whatif:
        kpis["whatif"] = _measure_whatif(engine, meter, deployment, profile)

    fabric.finalize()
    report = ScenarioReport(profile=asdict(profile), kpis=_rounded(kpis))
    report.checks = _build_checks(profile, report.kpis)
    return report


def _measure_location_route(
    engine: Engine,
    scheduler: Scheduler,
    fabric: EventFabric,
    bridge: RanTwinBridge,
    profile: ScenarioProfile,
    out: Path,
) -> dict[str, Any]:
    # Cool-down so phase-A dispatches age out of the target's rate window.
    scheduler.run_until(scheduler.clock.now_us() + s_to_us(2.0))
    t0 = scheduler.clock.now_us()

    fleet = engine.create_instance("fleet")
    engine.upload_models(fleet, [FLEET_MODEL], at=t0)
    receipt = engine.create_twin(fleet, "vehicle-0", FLEET_MODEL.id, {"Battery": 80.0}, at=t0)
    start = ((receipt.response_time_us // 1000) + 1) * 1000

    target_rnti = min(bridge.ues)
    binding = bridge.ues[target_rnti]
    endpoint = TwinRouteEndpoint(
        bridge.cell_instance_id(binding.cell),
        twin_map={"vehicle-0": binding.twin_id},
        path_map={"Location": "Location"},
        dead_letter_path=out / "route-dead-letter.jsonl",
        keep_delivery_log=True,
    )
    fabric.create_route("fleet", {"paths": ["Location"]}, endpoint)

    rng = np.random.Generator(np.random.PCG64(profile.seed + 1000))
    period_us = round(1e6 / profile.route_rate_hz)
    for k in range(profile.route_events):
        at = start + k * period_us
        lat = round(0.009 + 1e-6 * rng.standard_normal(), 9)
        lon = round(0.009 + 1e-6 * rng.standard_normal(), 9)

        def send(at=at, lat=lat, lon=lon):
            engine.update_twin("fleet", "vehicle-0", [("Location", (lat, lon), at)], at=at)

        scheduler.at(at, send)
    scheduler.run_until(start + profile.route_events * period_us + s_to_us(3.0))

    log = endpoint.delivery_log or []
    lags_ms = [(lu - src) / 1000.0 for src, lu in log]
    return {
        "n": len(lags_ms),
        "mean": float(np.mean(lags_ms)) if lags_ms else 0.0,
        "max": float(np.max(lags_ms)) if lags_ms else 0.0,
        "dead_letters": endpoint.dead_letters,
    }


def _measure_whatif(
    engine: Engine,
    meter: UsageMeter,
    deployment: whatif.Deployment,
    profile: ScenarioProfile,
) -> dict[str, Any]:
    units_before = meter.snapshot()["query_units"]
    snap = whatif.snapshot(deployment)
    snapshot_units = meter.snapshot()["query_units"] - units_before

    durations: list[float] = []
    executions = 0
    fidelity_ok = True
    for trial in range(profile.spawn_trials):
        result = whatif.spawn_copies(snap, profile.spawn_copy_count, engine, prefix=f"t{trial}c")
        durations.append(result.duration_s)
        executions = result.function_executions
        if trial == 0:
            for copy in result.copies:
                if not whatif.diff(copy, snap).empty:
                    fidelity_ok = False
        for copy in result.copies:
            for instance_id in copy.roles.values():
                engine.delete_instance(instance_id)
    return {
        "snapshot_query_units": snapshot_units,
        "spawn_trials": profile.spawn_trials,
        "spawn_copies": profile.spawn_copy_count,
        "spawn_mean_s": float(np.mean(durations)) if durations else 0.0,
        "spawn_max_s": float(np.max(durations)) if durations else 0.0,
        "function_executions_per_spawn": executions,
        "copy_fidelity_ok": fidelity_ok,
    }


def _build_checks(profile: ScenarioProfile, kpis: dict[str, Any]) -> list[Check]:
    checks: list[Check] = []

    def band(name: str, value: float, lo: float, hi: float, unit: str = "") -> None:
        checks.append(
            Check(name, lo <= value <= hi, f"{value:.4g}{unit} in [{lo:.4g}, {hi:.4g}]")
        )

    full_scale = profile.cells == 8 and profile.ues_per_cell == 99
    checks.append(
        Check(
            "pacing.no_rejections",
            kpis["updates_rejected"] == 0,
            f"engine rejected {kpis['updates_rejected']} updates",
        )
    )
    if full_scale:
        if profile.use_data_warehouse:
            band("volume.hourly_mb", kpis["data_volume_mb_per_hour"], 43.2, 52.8, " MB/h")
            band("events.per_second", kpis["events_per_second"], 57600.0, 70400.0, "/s")
        if profile.query_rate_hz > 0:
            band("meters.messages", kpis["messages_per_hour"], 28.5e6, 31.5e6, "/h")
            band("meters.operations", kpis["operations_per_hour"], 3.8e6, 4.2e6, "/h")
            band("cost.base", kpis["cost"]["base"], 38.0, 42.0, " $/h")
            if profile.use_data_warehouse:
                band("cost.use_case_1", kpis["cost"]["use_case_1_total"], 46.075, 50.925, " $/h")
            band("cost.per_user", kpis["cost"]["per_user"], 0.04, 0.06, " $/user/h")
    if profile.use_location_route and "route_lag_ms" in kpis:
        band("route.lag_mean_ms", kpis["route_lag_ms"]["mean"], 125.0, 155.0, " ms")
        band("route.lag_max_ms", kpis["route_lag_ms"]["max"], 0.0, 600.0, " ms")
        checks.append(
            Check(
                "route.dead_letters",
                kpis["route_lag_ms"]["dead_letters"] == 0,
                f"{kpis['route_lag_ms']['dead_letters']} dead-lettered",
            )
        )
    if profile.use_whatif and "whatif" in kpis:
        w = kpis["whatif"]
        if full_scale and profile.spawn_copy_count == 5:
            band("spawn.mean_s", w["spawn_mean_s"], 19.0, 25.0, " s")
            band("spawn.max_s", w["spawn_max_s"], 0.0, 34.0, " s")
        if full_scale:
            checks.append(
                Check(
                    "snapshot.query_units",
                    w["snapshot_query_units"] == 800,
                    f"charged {w['snapshot_query_units']} units",
                )
            )
        if profile.spawn_copy_count == 5:
            checks.append(
                Check(
                    "spawn.function_executions",
                    w["function_executions_per_spawn"] == 107,
                    f"{w['function_executions_per_spawn']} executions",
                )
            )
        checks.append(Check("spawn.fidelity", w["copy_fidelity_ok"], "diff(copy, snapshot)"))
    return checks


def _rounded(obj):
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_rounded(v) for v in obj]
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, (np.floating, np.integer)):
        return _rounded(obj.item())
    return obj

"""Command-line harness: latency campaign, scenario KPIs, spawn timing, KS test.

Every subcommand writes CSV/JSON artifacts under --out, prints one PASS/FAIL
line per built-in assertion, and exits 0 only when all assertions hold.
Outputs are byte-identical across runs with equal seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .bench import BenchConfig, BenchResult, ks_test, run_latency_bench
from .scenario import (
    Check,
    PROFILES,
    billing_calibrated_profile,
    build_quiesced_deployment,
)
from . import scenario as scenario_mod
from .wire import canonical_json


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Measurement and scenario harness for the twin platform",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("latency", help="run the latency measurement campaign")
    _common(p)
    p.add_argument("--reps", type=int, default=None, help="repetitions per cell")

    p = sub.add_parser("scenario", help="run an end-to-end scenario and report KPIs")
    _common(p)
    p.add_argument("--profile", choices=sorted(PROFILES), default="billing-calibrated")
    p.add_argument("--duration", type=float, default=None, help="measured window, seconds")
    p.add_argument("--spawn-trials", type=int, default=None)
    p.add_argument("--route-events", type=int, default=None)

    p = sub.add_parser("spawn", help="time spawning N copies of a quiesced deployment")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--copies", type=int, default=5)

    p = sub.add_parser("kstest", help="lag model-independence Kolmogorov-Smirnov check")
    _common(p)
    p.add_argument("--reps", type=int, default=10000)

    args = parser.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = {
        "latency": _cmd_latency,
        "scenario": _cmd_scenario,
        "spawn": _cmd_spawn,
        "kstest": _cmd_kstest,
    }[args.command]
    checks = handler(args, out)
    for check in checks:
        print(check.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config overrides")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, default=Path("bench-out"))


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _cmd_latency(args, out: Path) -> list[Check]:
    overrides = _load_config(args.config)
    overrides.setdefault("seed", args.seed)
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    config = BenchConfig.from_config(overrides)
    t0 = time.monotonic()
    result = run_latency_bench(config)
    wall_s = time.monotonic() - t0
    result.write(out)
    checks = latency_checks(result)
    checks.append(Check("latency.wall_time", wall_s < 60.0, f"{wall_s:.1f} s < 60 s"))
    return checks


def latency_checks(result: BenchResult) -> list[Check]:
    s = result.summary
    checks: list[Check] = []

    def band(name, value, lo, hi, unit=""):
        checks.append(Check(name, lo <= value <= hi, f"{value:.4g}{unit} in [{lo}, {hi}]"))

    band("service.mean_25_10", s["service_ms"]["25/10"]["mean"], 43.0, 47.0, " ms")
    band("service.max", s["service_max_ms"], 0.0, 200.0, " ms")
    lag10 = [v["mean"] for k, v in s["lag_ms"].items() if k.endswith("/10")]
    band("lag.mean_update10", sum(lag10) / len(lag10), 9.0, 12.0, " ms")
    band("lag.max", s["lag_max_ms"], 0.0, 100.0, " ms")
    band("query.mean_model25", s["query_ms"]["25"]["mean"], 58.0, 62.0, " ms")
    band("slope.service_vs_update", s["slopes"]["service_vs_update_params"], 0.25, 0.31, " ms/param")
    band("slope.lag_vs_update", s["slopes"]["lag_vs_update_params"], 0.25, 0.31, " ms/param")
    band("slope.query_vs_model", s["slopes"]["query_vs_model_params"], 0.35, 0.45, " ms/param")
    band("patch.bytes_100_param", s["canonical_patch_bytes_100"], 6000, 6600, " B")
    ks = s["ks_lag_model50_vs_model100_at_update25"]
    if ks is not None:
        checks.append(
            Check("ks.lag_model_independence", not ks["reject"], f"p={ks['p_value']:.3f} >= 0.05")
        )
    return checks


def _cmd_scenario(args, out: Path) -> list[Check]:
    overrides = _load_config(args.config)
    overrides.setdefault("seed", args.seed)
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.spawn_trials is not None:
        overrides["spawn_trials"] = args.spawn_trials
    if args.route_events is not None:
        overrides["route_events"] = args.route_events
    profile = PROFILES[args.profile](**overrides)
    report = scenario_mod.run_scenario(profile, out_dir=out / "artifacts")
    (out / "scenario_kpis.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "scenario_table.txt").write_text(report.render_table(), encoding="utf-8")
    return report.checks


def _cmd_spawn(args, out: Path) -> list[Check]:
    overrides = _load_config(args.config)
    overrides.setdefault("seed", args.seed)
    overrides.setdefault("spawn_trials", args.trials)
    overrides.setdefault("spawn_copy_count", args.copies)
    overrides.setdefault("use_data_warehouse", False)
    overrides.setdefault("use_location_route", False)
    overrides.setdefault("query_rate_hz", 0.0)
    profile = billing_calibrated_profile(**overrides)
    engine, meter, deployment = build_quiesced_deployment(profile)
    kpis = scenario_mod._measure_whatif(engine, meter, deployment, profile)

    rows = [{"trial": "mean", "seconds": round(kpis["spawn_mean_s"], 3)},
            {"trial": "max", "seconds": round(kpis["spawn_max_s"], 3)}]
    (out / "spawn_summary.json").write_text(
        canonical_json({"kpis": kpis, "headline": rows}) + "\n", encoding="utf-8"
    )
    checks = []
    full_scale = profile.cells == 8 and profile.ues_per_cell == 99
    if full_scale and profile.spawn_copy_count == 5:
        checks.append(Check("spawn.mean_s", 19.0 <= kpis["spawn_mean_s"] <= 25.0,
                            f"{kpis['spawn_mean_s']:.2f} s in [19, 25]"))
        checks.append(Check("spawn.max_s", kpis["spawn_max_s"] <= 34.0,
                            f"{kpis['spawn_max_s']:.2f} s <= 34"))
        checks.append(Check("snapshot.query_units", kpis["snapshot_query_units"] == 800,
                            f"{kpis['snapshot_query_units']} units"))
        checks.append(Check("spawn.function_executions",
                            kpis["function_executions_per_spawn"] == 107,
                            f"{kpis['function_executions_per_spawn']} executions"))
    checks.append(Check("spawn.fidelity", kpis["copy_fidelity_ok"], "diff(copy, snapshot) empty"))
    return checks


def _cmd_kstest(args, out: Path) -> list[Check]:
    overrides = _load_config(args.config)
    overrides.setdefault("seed", args.seed)
    overrides.setdefault("repetitions", args.reps)
    overrides.setdefault("model_sizes", (50, 100))
    overrides.setdefault("update_sizes", (25,))
    config = BenchConfig.from_config(overrides)
    result = run_latency_bench(config)
    ks = ks_test(result.lag_ms[(50, 25)], result.lag_ms[(100, 25)])
    (out / "kstest.json").write_text(
        canonical_json({"seed": config.seed, "reps": config.repetitions, **ks.to_dict()}) + "\n",
        encoding="utf-8",
    )
    return [
        Check("ks.no_reject", not ks.reject, f"p={ks.p_value:.4f} vs alpha={ks.alpha}"),
    ]


if __name__ == "__main__":
    sys.exit(main())

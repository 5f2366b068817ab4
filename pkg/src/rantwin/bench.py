"""Latency measurement campaign and the statistics used to judge it.

The campaign mirrors the calibration method: synthetic models of 25/50/100
parameters, each updated and queried 10,000 times in seeded batches of 500
with updates five seconds apart (batches live in disjoint simulated-time
blocks; time of day was shown not to matter, so blocks only separate the
batches). Service time is receipt.responseTime - sourceTime, lag is the
patched property's lastUpdatedTime - sourceTime, and queries run against a
twin of their own so they never contend with updates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .engine import Engine
from .errors import DegenerateX, EmptySample
from .modeling import ModelInterface, PropertyDef, Schema
from .timebase import SimClock, s_to_us
from .wire import canonical_json, patch_size_bytes


@dataclass
class BenchConfig:
    model_sizes: tuple[int, ...] = (25, 50, 100)
    update_sizes: tuple[int, ...] = (10, 25, 50, 100)
    repetitions: int = 10000
    batch_size: int = 500
    gap_s: float = 5.0
    seed: int = 7

    def __post_init__(self) -> None:
        if self.repetitions < 1 or self.batch_size < 1:
            raise ValueError("repetitions and batch_size must be positive")
        if not any(u <= m for m in self.model_sizes for u in self.update_sizes):
            raise ValueError("no update size fits any model size")

    def pairs(self) -> list[tuple[int, int]]:
        return [(m, u) for m in self.model_sizes for u in self.update_sizes if u <= m]

    @classmethod
    def from_config(cls, config: dict) -> "BenchConfig":
        cfg = dict(config)
        for key in ("model_sizes", "update_sizes"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(**cfg)


def bench_model(size: int) -> ModelInterface:
    return ModelInterface(
        id=f"bench/model-{size};1",
        properties=tuple(
            PropertyDef(f"param-{i:03d}", Schema.FLOAT) for i in range(size)
        ),
    )


def canonical_patch(size: int, source_us: int) -> list:
    """Deterministic patch whose canonical wire form is byte-stable."""
    return [
        (f"param-{i:03d}", round(10.0 + (i * 37) % 89 + 0.123456, 6), source_us)
        for i in range(size)
    ]


def canonical_patch_bytes(size: int, source_us: int = 1_000_000_000) -> int:
    return patch_size_bytes(canonical_patch(size, source_us))


# -- statistics ----------------------------------------------------------------


def fit_linear(points: Iterable[tuple[float, float]]) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, sum of squared residuals)."""
    pts = list(points)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    if len(set(xs)) < 2:
        raise DegenerateX(f"need >= 2 distinct x values, got {sorted(set(xs))}")
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in pts)
    slope = sxy / sxx
    intercept = my - slope * mx
    residual = sum((y - (slope * x + intercept)) ** 2 for x, y in pts)
    return slope, intercept, residual


@dataclass
class KsResult:
    statistic: float
    p_value: float
    reject: bool
    alpha: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "reject": self.reject,
            "alpha": self.alpha,
        }


def ks_test(sample_a: Sequence[float], sample_b: Sequence[float], alpha: float = 0.05) -> KsResult:
    """Two-sample Kolmogorov-Smirnov test with the asymptotic p-value."""
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise EmptySample("both samples must be non-empty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    statistic = float(np.max(np.abs(cdf_a - cdf_b)))
    n_eff = len(a) * len(b) / (len(a) + len(b))
    p = _kolmogorov_sf(math.sqrt(n_eff) * statistic)
    return KsResult(statistic, p, p < alpha, alpha)


def _kolmogorov_sf(lam: float) -> float:
    """Survival function of the Kolmogorov distribution (series form)."""
    if lam <= 0:
        return 1.0
    total = 0.0
    for k in range(1, 101):
        term = (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
        total += term
        if abs(term) < 1e-12:
            break
    return float(min(max(2.0 * total, 0.0), 1.0))


# -- the campaign ----------------------------------------------------------------


@dataclass
class BenchResult:
    config: BenchConfig
    service_ms: dict[tuple[int, int], np.ndarray]
    lag_ms: dict[tuple[int, int], np.ndarray]
    query_ms: dict[int, np.ndarray]
    summary: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return canonical_json(self.summary)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "service.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "update", "rep", "ms"])
            for (m, u), xs in sorted(self.service_ms.items()):
                w.writerows((m, u, i, f"{x:.3f}") for i, x in enumerate(xs))
        with (out / "lag.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "update", "rep", "ms"])
            for (m, u), xs in sorted(self.lag_ms.items()):
                w.writerows((m, u, i, f"{x:.3f}") for i, x in enumerate(xs))
        with (out / "query.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "rep", "ms"])
            for m, xs in sorted(self.query_ms.items()):
                w.writerows((m, i, f"{x:.3f}") for i, x in enumerate(xs))
        (out / "summary.json").write_text(self.to_json() + "\n", encoding="utf-8")


def run_latency_bench(config: BenchConfig | None = None) -> BenchResult:
    config = config or BenchConfig()
    engine = Engine(seed=config.seed, clock=SimClock())
    instance = engine.create_instance("bench")
    models = {m: bench_model(m) for m in config.model_sizes}
    engine.upload_models(instance, models.values(), at=0)
    for m in config.model_sizes:
        engine.create_twin(instance, f"upd-{m}", models[m].id, at=0)
        engine.create_twin(instance, f"qry-{m}", models[m].id, at=0)

    gap_us = s_to_us(config.gap_s)
    block_us = s_to_us(3600.0)
    start_us = s_to_us(10.0)

    def schedule(seq: int) -> int:
        batch, within = divmod(seq, config.batch_size)
        return start_us + batch * block_us + within * gap_us

    service: dict[tuple[int, int], np.ndarray] = {}
    lag: dict[tuple[int, int], np.ndarray] = {}
    seq = 0
    for m, u in config.pairs():
        twin_id = f"upd-{m}"
        twin = instance.twins[twin_id]
        svc = np.empty(config.repetitions)
        lg = np.empty(config.repetitions)
        first_path = "param-000"
        for rep in range(config.repetitions):
            at = schedule(seq)
            seq += 1
            patch = canonical_patch(u, at)
            receipt = engine.update_twin(instance, twin_id, patch, at=at)
            svc[rep] = (receipt.response_time_us - at) / 1000.0
            lg[rep] = (twin.properties[first_path].last_updated_us - at) / 1000.0
        service[(m, u)] = svc
        lag[(m, u)] = lg

    query: dict[int, np.ndarray] = {}
    for m in config.model_sizes:
        twin_id = f"qry-{m}"
        qs = np.empty(config.repetitions)
        for rep in range(config.repetitions):
            at = schedule(seq)
            seq += 1
            result = engine.query_twin(instance, twin_id, at=at)
            qs[rep] = (result.completed_at_us - at) / 1000.0
        query[m] = qs

    result = BenchResult(config, service, lag, query)
    result.summary = _summarize(config, result)
    return result


def _summarize(config: BenchConfig, result: BenchResult) -> dict[str, Any]:
    cells = {
        f"{m}/{u}": _stats(xs) for (m, u), xs in sorted(result.service_ms.items())
    }
    lag_cells = {
        f"{m}/{u}": _stats(xs) for (m, u), xs in sorted(result.lag_ms.items())
    }
    query_cells = {str(m): _stats(xs) for m, xs in sorted(result.query_ms.items())}

    def slope_or_none(points):
        try:
            return round(fit_linear(points)[0], 6)
        except DegenerateX:
            return None

    largest = max(config.model_sizes)
    service_slope = slope_or_none(
        [
            (u, float(np.mean(result.service_ms[(largest, u)])))
            for u in config.update_sizes
            if (largest, u) in result.service_ms
        ]
    )

    lag_by_update: dict[int, list[float]] = {}
    for (m, u), xs in result.lag_ms.items():
        lag_by_update.setdefault(u, []).extend(xs.tolist())
    lag_slope = slope_or_none(
        [(u, float(np.mean(v))) for u, v in sorted(lag_by_update.items())]
    )

    query_slope = slope_or_none(
        [(m, float(np.mean(xs))) for m, xs in sorted(result.query_ms.items())]
    )

    ks = None
    mid, top = 50, 100
    if (mid, 25) in result.lag_ms and (top, 25) in result.lag_ms:
        ks = ks_test(result.lag_ms[(mid, 25)], result.lag_ms[(top, 25)]).to_dict()

    all_lag = np.concatenate(list(result.lag_ms.values()))
    all_service = np.concatenate(list(result.service_ms.values()))
    return {
        "seed": config.seed,
        "repetitions": config.repetitions,
        "service_ms": cells,
        "lag_ms": lag_cells,
        "query_ms": query_cells,
        "slopes": {
            "service_vs_update_params": service_slope,
            "lag_vs_update_params": lag_slope,
            "query_vs_model_params": query_slope,
        },
        "lag_min_ms": round(float(all_lag.min()), 3),
        "lag_max_ms": round(float(all_lag.max()), 3),
        "service_max_ms": round(float(all_service.max()), 3),
        "canonical_patch_bytes_100": canonical_patch_bytes(100),
        "ks_lag_model50_vs_model100_at_update25": ks,
    }


def _stats(xs: np.ndarray) -> dict[str, float]:
    return {
        "min": round(float(xs.min()), 3),
        "mean": round(float(xs.mean()), 3),
        "max": round(float(xs.max()), 3),
        "n": int(len(xs)),
    }

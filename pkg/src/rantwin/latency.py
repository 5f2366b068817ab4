"""Seeded stochastic latency model for the twin engine.

Calibration targets (milliseconds):

  service mean(m, u) = 45 + 0.28*(m - 25) + 0.28*(u - 10), min 45, max 200
  lag mean(u)        =  9 + 0.28*(u - 10),                 min  9, max 100
  query mean(m)      = 60 + 0.40*(m - 25),                 min 60
  route hop          = mean 116, min 60, max 540
  twin creation      = uniform in [1 s, 1 s + m/100 s], never above 2 s

where m is the target model's parameter count and u the number of patched
parameters. Service, lag, query and route draws come from a shifted
log-normal: ``floor + LogNormal(mu, sigma)`` with mu solved so the mean hits
the linear formula. That shape reproduces the observed hard minimum, linear
mean trend and long tail at once; draws above the cap are rejected and
redrawn, which bounds the maximum without shifting the mean noticeably.

When the formula mean falls at or below the floor (small updates / small
models) the excess is clamped to MIN_EXCESS_MS so the distribution stays
proper; the floor remains the hard minimum.

A twin is "busy" from an operation's dispatch until its response completes.
Any operation dispatched inside a busy window pays a flat LOCK_PENALTY_MS on
each of its sampled durations, reproducing the paired-message experiment
where back-to-back operations on one twin cost an extra 45 ms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .timebase import ms_to_us

SERVICE = "service"
LAG = "lag"
QUERY = "query"
CREATE = "create"
ROUTE = "route"

KINDS = (SERVICE, LAG, QUERY, CREATE, ROUTE)

_BATCH = 4096


@dataclass
class LatencyConfig:
    sigma: float = 0.5
    min_excess_ms: float = 1.0

    service_floor_ms: float = 45.0
    service_cap_ms: float = 200.0
    service_per_model_param_ms: float = 0.28
    service_per_update_param_ms: float = 0.28
    service_ref_model: int = 25
    service_ref_update: int = 10

    lag_floor_ms: float = 9.0
    lag_cap_ms: float = 100.0
    lag_per_update_param_ms: float = 0.28

    query_floor_ms: float = 60.0
    query_cap_ms: float | None = None
    query_per_model_param_ms: float = 0.40

    route_floor_ms: float = 60.0
    route_mean_ms: float = 116.0
    route_cap_ms: float = 540.0

    lock_penalty_ms: float = 45.0
    relationship_extra_ms: float = 10.0

    create_base_s: float = 1.0
    create_span_s: float = 1.0
    create_ref_params: int = 100
    bulk_create_per_s: float = 200.0

    # Spawn-orchestration timings (shifted log-normal floor/mean/cap, ms).
    instance_create_ms: tuple[float, float, float] = (50.0, 100.0, 500.0)
    model_upload_ms: tuple[float, float, float] = (150.0, 250.0, 1000.0)
    function_exec_ms: tuple[float, float, float] = (20.0, 50.0, 500.0)

    def mean_service_ms(self, m: int, u: int) -> float:
        return (
            self.service_floor_ms
            + self.service_per_model_param_ms * (m - self.service_ref_model)
            + self.service_per_update_param_ms * (u - self.service_ref_update)
        )

    def mean_lag_ms(self, u: int) -> float:
        return self.lag_floor_ms + self.lag_per_update_param_ms * (u - self.service_ref_update)

    def mean_query_ms(self, m: int) -> float:
        return self.query_floor_ms + self.query_per_model_param_ms * (m - self.service_ref_model)


class _Stream:
    """One seeded draw stream; standard normals are pre-drawn in batches."""

    __slots__ = ("_rng", "_buf", "_pos", "index")

    def __init__(self, rng: np.random.Generator) -> None:
        self._rng = rng
        self._buf = rng.standard_normal(_BATCH)
        self._pos = 0
        self.index = 0

    def next_normal(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._rng.standard_normal(_BATCH)
            self._pos = 0
        z = self._buf[self._pos]
        self._pos += 1
        self.index += 1
        return float(z)

    def next_uniform(self) -> float:
        # Uniform draws share the batch discipline via the normal CDF inverse
        # being unnecessary here: draw directly but keep the index honest.
        self.index += 1
        return float(self._rng.random())


class LatencyModel:
    """Samples operation durations; deterministic given (seed, draw order)."""

    def __init__(self, config: LatencyConfig | None = None, seed: int = 0) -> None:
        self.config = config or LatencyConfig()
        self.seed = seed
        root = np.random.SeedSequence(seed)
        children = root.spawn(len(KINDS))
        self._streams = {
            kind: _Stream(np.random.Generator(np.random.PCG64(child)))
            for kind, child in zip(KINDS, children)
        }

    # -- public sampling API --------------------------------------------------

    def sample_us(self, kind: str, m: int = 0, u: int = 0, penalized: bool = False) -> int:
        """One duration draw in microseconds."""
        cfg = self.config
        if kind == SERVICE:
            ms = self._lognormal(SERVICE, cfg.service_floor_ms, cfg.mean_service_ms(m, u), cfg.service_cap_ms)
        elif kind == LAG:
            ms = self._lognormal(LAG, cfg.lag_floor_ms, cfg.mean_lag_ms(u), cfg.lag_cap_ms)
        elif kind == QUERY:
            ms = self._lognormal(QUERY, cfg.query_floor_ms, cfg.mean_query_ms(m), cfg.query_cap_ms)
        elif kind == ROUTE:
            ms = self._lognormal(ROUTE, cfg.route_floor_ms, cfg.route_mean_ms, cfg.route_cap_ms)
        elif kind == CREATE:
            ms = self._creation_ms(m)
        else:
            raise ValueError(f"unknown latency kind {kind!r}")
        if penalized:
            ms += cfg.lock_penalty_ms
        return ms_to_us(ms)

    def draw_index(self, kind: str) -> int:
        return self._streams[kind].index

    def aux_sample_us(self, which: str) -> int:
        """Orchestration timing draws (spawn pipeline); uses the CREATE stream."""
        floor, mean, cap = getattr(self.config, which)
        return ms_to_us(self._lognormal(CREATE, floor, mean, cap))

    # -- internals -------------------------------------------------------------

    def _creation_ms(self, m: int) -> float:
        cfg = self.config
        frac = min(max(m, 0), cfg.create_ref_params) / cfg.create_ref_params
        base = cfg.create_base_s * 1000.0
        span = cfg.create_span_s * 1000.0 * frac
        return base + span * self._streams[CREATE].next_uniform()

    def _lognormal(self, kind: str, floor_ms: float, mean_ms: float, cap_ms: float | None) -> float:
        cfg = self.config
        excess = max(mean_ms - floor_ms, cfg.min_excess_ms)
        mu = math.log(excess) - cfg.sigma * cfg.sigma / 2.0
        stream = self._streams[kind]
        while True:
            value = floor_ms + math.exp(mu + cfg.sigma * stream.next_normal())
            if cap_ms is None or value <= cap_ms:
                return value

"""Radio-network emulator: cells, UE mobility, metrics, and E2-style signalling.

The radio side is deliberately simple; downstream components only need ranges
and monotonicity. Pathloss is log-distance (``PL = 40 + 10*n*log10(d)`` with
n = 3), and received power is reported on the affine scale
``tx_dBm - PL + 160`` clamped into [30, 160], which spans the model range for
the geometries used here. CQI quantizes the (noisy) reported power, MCS is a
CQI-indexed table, BLER is a logistic in reported power, and the buffer
follows a seeded birth-death walk.

Handover is an A3-style rule: the best neighbour must beat the serving cell
by a hysteresis margin continuously for the time-to-trigger before the UE
re-attaches (ties stay with the serving cell, never beyond a full target
cell). Every emitted metric is clamped to its model range before leaving the
emulator, and the whole network is deterministic under (topology, seed, step
schedule).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from .errors import CapacityExceeded, NonPositiveGranularity, UnknownCell
from .timebase import s_to_us, us_to_s

MAX_UES_PER_CELL = 99
METERS_PER_DEGREE = 111_320.0

NUMERIC_METRICS = (
    "RSRP",
    "Buffer",
    "UL BLER",
    "UL CQI",
    "DL BLER",
    "DL CQI",
    "UL MCS",
    "DL MCS",
)
ALL_METRICS = ("RNTI", "Location") + NUMERIC_METRICS
CELL_METRICS = ("Connected UEs", "Tx Power", "PLMN", "ARFCN")

MCS_BY_CQI = np.array([0, 2, 4, 6, 7, 9, 11, 13, 15, 17, 19, 21, 22, 24, 26, 28])

REPORT = "report"
INSERT = "insert"


@dataclass
class EmulatorConfig:
    cells: int = 8
    ues_per_cell: int = 99
    area_m: float = 2000.0
    speed_mps: float = 14.0
    granularity_s: float = 0.01
    seed: int = 0
    tx_power_dbm: float = 30.0
    pathloss_exponent: float = 3.0
    pathloss_ref_db: float = 40.0
    hysteresis_db: float = 3.0
    time_to_trigger_s: float = 0.1
    rsrp_noise_db: float = 0.75
    cqi_noise_db: float = 8.0
    bler_noise_db: float = 0.5
    buffer_rate: float = 2.0
    noise_free: bool = False

    @classmethod
    def from_config(cls, config: dict) -> "EmulatorConfig":
        return cls(**config)


@dataclass(frozen=True)
class E2SetupInfo:
    cell_id: str
    plmn: int
    arfcn: int
    tx_power_dbm: float
    position_m: tuple[float, float]


@dataclass
class Subscription:
    id: str
    cell_id: str
    ran_functions: frozenset[str]
    granularity_us: int
    next_due_us: int


@dataclass
class IndicationReport:
    kind: str  # report | insert
    cell_id: str
    t_us: int
    granularity_s: float | None = None
    # report payloads (views are copies; safe to hold across steps)
    rntis: np.ndarray | None = None
    locations: np.ndarray | None = None  # (k, 2) latitude/longitude degrees
    metrics: dict[str, np.ndarray] = field(default_factory=dict)
    cell_values: dict[str, Any] = field(default_factory=dict)
    # insert payload
    event: dict[str, Any] | None = None

    def to_wire(self) -> dict[str, Any]:
        body: dict[str, Any] = {"kind": self.kind, "cell": self.cell_id, "t": self.t_us}
        if self.kind == INSERT:
            body["event"] = self.event
            return body
        body["granularity_s"] = self.granularity_s
        body["cellValues"] = self.cell_values
        ues = []
        for i in range(len(self.rntis) if self.rntis is not None else 0):
            entry: dict[str, Any] = {}
            if self.rntis is not None:
                entry["RNTI"] = int(self.rntis[i])
            if self.locations is not None:
                entry["Location"] = [float(self.locations[i, 0]), float(self.locations[i, 1])]
            for name, col in self.metrics.items():
                entry[name] = col[i].item()
            ues.append(entry)
        body["ues"] = ues
        return body


def meters_to_geo(xy: np.ndarray) -> np.ndarray:
    """Local tangent-plane meters -> (latitude, longitude) degrees."""
    geo = np.empty_like(xy, dtype=float)
    geo[..., 0] = xy[..., 1] / METERS_PER_DEGREE
    geo[..., 1] = xy[..., 0] / METERS_PER_DEGREE
    return geo


def geo_to_meters(latlon) -> tuple[float, float]:
    lat, lon = latlon
    return lon * METERS_PER_DEGREE, lat * METERS_PER_DEGREE


class RanNetwork:
    """Deterministic cell/UE world with report and insert indications."""

    def __init__(self, config: EmulatorConfig) -> None:
        if config.cells < 1:
            raise ValueError("need at least one cell")
        if not 0 <= config.ues_per_cell <= MAX_UES_PER_CELL:
            raise CapacityExceeded(
                f"{config.ues_per_cell} UEs per cell exceeds the {MAX_UES_PER_CELL}-slot model"
            )
        self.config = config
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.t_us = 0

        m = config.cells
        cols = math.ceil(math.sqrt(m))
        rows = math.ceil(m / cols)
        sx, sy = config.area_m / cols, config.area_m / rows
        self.cell_ids = [f"cell-{i}" for i in range(m)]
        self.cell_pos = np.array(
            [((i % cols + 0.5) * sx, (i // cols + 0.5) * sy) for i in range(m)]
        )
        self.tx_dbm = np.full(m, config.tx_power_dbm)
        self.plmn = np.array([26201 for _ in range(m)])
        self.arfcn = np.array([620_000 + 1000 * i for i in range(m)])
        self._cell_rect = [(i % cols, i // cols, sx, sy) for i in range(m)]

        k = m * config.ues_per_cell
        self.n_ues = k
        self.rnti = np.arange(k) % 1000
        self.serving = np.repeat(np.arange(m), config.ues_per_cell)
        # Uniform placement inside each cell's grid rectangle keeps exactly
        # N UEs attached per cell at t=0.
        u = self.rng.random((k, 2))
        cx = np.array([self._cell_rect[c][0] for c in self.serving])
        cy = np.array([self._cell_rect[c][1] for c in self.serving])
        self.pos = np.column_stack(((cx + u[:, 0]) * sx, (cy + u[:, 1]) * sy))
        self.way = self.rng.random((k, 2)) * config.area_m
        self.speed = config.speed_mps * self.rng.uniform(0.5, 1.5, size=k)
        self.buffer = self.rng.integers(0, 256, size=k).astype(float)
        self._a3_s = np.zeros(k)

        self.reported = self._reported_matrix()
        self.metrics = np.zeros((k, len(NUMERIC_METRICS)))
        self._refresh_metrics()

        self.subscriptions: dict[str, Subscription] = {}
        self._sub_seq = 0
        self._queue: list[IndicationReport] = []
        self.handover_count = 0
        self.handover_log: list[tuple[int, int, int, int]] = []  # (t, ue, src, dst)

    # -- radio maths -----------------------------------------------------------

    def pathloss_db(self, distance_m) -> np.ndarray:
        cfg = self.config
        d = np.maximum(np.asarray(distance_m, dtype=float), 1.0)
        return cfg.pathloss_ref_db + 10.0 * cfg.pathloss_exponent * np.log10(d)

    def reported_power(self, tx_dbm, distance_m) -> np.ndarray:
        return np.clip(tx_dbm - self.pathloss_db(distance_m) + 160.0, 30.0, 160.0)

    def _reported_matrix(self) -> np.ndarray:
        diff = self.pos[:, None, :] - self.cell_pos[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        return self.reported_power(self.tx_dbm[None, :], dist)

    def _refresh_metrics(self) -> None:
        cfg = self.config
        k = self.n_ues
        serving_rep = self.reported[np.arange(k), self.serving]

        def noise(sigma: float, n: int = k) -> np.ndarray:
            if cfg.noise_free or sigma <= 0:
                return np.zeros(n)
            return self.rng.normal(0.0, sigma, size=n)

        rsrp = np.clip(serving_rep + noise(cfg.rsrp_noise_db), 30.0, 160.0)
        if not cfg.noise_free:
            self.buffer += self.rng.poisson(cfg.buffer_rate, size=k)
            self.buffer -= self.rng.poisson(cfg.buffer_rate, size=k)
            np.clip(self.buffer, 0, 255, out=self.buffer)

        def cqi() -> np.ndarray:
            q = np.rint((serving_rep + noise(cfg.cqi_noise_db) - 55.0) / 6.0)
            return np.clip(q, 0, 15)

        def bler() -> np.ndarray:
            x = serving_rep + noise(cfg.bler_noise_db)
            return np.clip(1.0 / (1.0 + np.exp((x - 85.0) / 6.0)), 0.0, 1.0)

        ul_cqi, dl_cqi = cqi(), cqi()
        m = self.metrics
        m[:, 0] = rsrp
        m[:, 1] = self.buffer
        m[:, 2] = bler()
        m[:, 3] = ul_cqi
        m[:, 4] = bler()
        m[:, 5] = dl_cqi
        m[:, 6] = MCS_BY_CQI[ul_cqi.astype(int)]
        m[:, 7] = MCS_BY_CQI[dl_cqi.astype(int)]

    # -- stepping ----------------------------------------------------------------

    def step(self, dt_s: float) -> None:
        """Advance mobility and radio state by dt and emit due indications."""
        if dt_s <= 0:
            raise ValueError("dt must be > 0")
        cfg = self.config
        self.t_us += s_to_us(dt_s)

        move = self.speed * dt_s
        delta = self.way - self.pos
        dist = np.sqrt((delta * delta).sum(axis=1))
        arrived = dist <= move
        if arrived.any():
            self.pos[arrived] = self.way[arrived]
            self.way[arrived] = self.rng.random((int(arrived.sum()), 2)) * cfg.area_m
        active = ~arrived & (dist > 0)
        scale = np.zeros_like(dist)
        scale[active] = move[active] / dist[active]
        self.pos += delta * scale[:, None]

        self.reported = self._reported_matrix()
        self._refresh_metrics()
        self._handover_pass(dt_s)

        for sub in self.subscriptions.values():
            while sub.next_due_us <= self.t_us:
                self._queue.append(self._build_report(sub, sub.next_due_us))
                sub.next_due_us += sub.granularity_us

    def _handover_pass(self, dt_s: float) -> None:
        cfg = self.config
        if len(self.cell_ids) < 2:
            return
        k = self.n_ues
        rep = self.reported.copy()
        serving_rep = rep[np.arange(k), self.serving]
        rep[np.arange(k), self.serving] = -np.inf
        best = rep.argmax(axis=1)
        best_val = rep[np.arange(k), best]
        condition = best_val > serving_rep + cfg.hysteresis_db
        self._a3_s = np.where(condition, self._a3_s + dt_s, 0.0)
        for ue in np.nonzero(self._a3_s >= cfg.time_to_trigger_s)[0]:
            self._execute_handover(int(ue), int(best[ue]))

    def _execute_handover(self, ue: int, target: int) -> None:
        source = int(self.serving[ue])
        if target == source:
            return
        if int((self.serving == target).sum()) >= MAX_UES_PER_CELL:
            return  # admission control: target full, keep trying later
        self.serving[ue] = target
        self._a3_s[ue] = 0.0
        self.handover_count += 1
        self.handover_log.append((self.t_us, ue, source, target))
        self._queue.append(
            IndicationReport(
                kind=INSERT,
                cell_id=self.cell_ids[source],
                t_us=self.t_us,
                event={
                    "event": "handover",
                    "RNTI": int(self.rnti[ue]),
                    "source_cell": self.cell_ids[source],
                    "target_cell": self.cell_ids[target],
                },
            )
        )

    def check_handover(self, ue: int) -> IndicationReport | None:
        """Evaluate the trigger rule for one UE now; executes when it fires."""
        cfg = self.config
        if len(self.cell_ids) < 2:
            return None
        rep = self.reported[ue].copy()
        serving = int(self.serving[ue])
        serving_rep = rep[serving]
        rep[serving] = -np.inf
        best = int(rep.argmax())
        if rep[best] > serving_rep + cfg.hysteresis_db and self._a3_s[ue] >= cfg.time_to_trigger_s:
            before = len(self._queue)
            self._execute_handover(ue, best)
            if len(self._queue) > before:
                return self._queue[-1]
        return None

    # -- E2 surface ----------------------------------------------------------------

    def cell_index(self, cell_id: str) -> int:
        try:
            return self.cell_ids.index(cell_id)
        except ValueError:
            raise UnknownCell(cell_id) from None

    def e2_setup(self, cell_id: str) -> E2SetupInfo:
        i = self.cell_index(cell_id)
        return E2SetupInfo(
            cell_id=cell_id,
            plmn=int(self.plmn[i]),
            arfcn=int(self.arfcn[i]),
            tx_power_dbm=float(self.tx_dbm[i]),
            position_m=(float(self.cell_pos[i, 0]), float(self.cell_pos[i, 1])),
        )

    def subscribe(self, cell_id: str, ran_functions: Iterable[str] | str, granularity_s: float) -> Subscription:
        if granularity_s <= 0:
            raise NonPositiveGranularity(str(granularity_s))
        self.cell_index(cell_id)
        if ran_functions == "all":
            functions = frozenset(ALL_METRICS) | frozenset(CELL_METRICS)
        else:
            functions = frozenset(ran_functions)
        self._sub_seq += 1
        sub = Subscription(
            id=f"sub-{self._sub_seq}",
            cell_id=cell_id,
            ran_functions=functions,
            granularity_us=s_to_us(granularity_s),
            next_due_us=self.t_us + s_to_us(granularity_s),
        )
        self.subscriptions[sub.id] = sub
        return sub

    def poll_indications(self, now_us: int | None = None) -> list[IndicationReport]:
        """Drain indications due at or before ``now``; emission order kept."""
        if now_us is None:
            due, self._queue = self._queue, []
            return due
        due = [r for r in self._queue if r.t_us <= now_us]
        self._queue = [r for r in self._queue if r.t_us > now_us]
        return due

    def _build_report(self, sub: Subscription, t_us: int) -> IndicationReport:
        i = self.cell_index(sub.cell_id)
        members = np.nonzero(self.serving == i)[0]
        fns = sub.ran_functions
        metrics = {
            name: self.metrics[members, col].copy()
            for col, name in enumerate(NUMERIC_METRICS)
            if name in fns
        }
        cell_values: dict[str, Any] = {}
        if "Connected UEs" in fns:
            cell_values["Connected UEs"] = int(len(members))
        if "Tx Power" in fns:
            cell_values["Tx Power"] = float(self.tx_dbm[i])
        if "PLMN" in fns:
            cell_values["PLMN"] = int(self.plmn[i])
        if "ARFCN" in fns:
            cell_values["ARFCN"] = int(self.arfcn[i])
        return IndicationReport(
            kind=REPORT,
            cell_id=sub.cell_id,
            t_us=t_us,
            granularity_s=us_to_s(sub.granularity_us),
            rntis=self.rnti[members].copy() if "RNTI" in fns else None,
            locations=meters_to_geo(self.pos[members]) if "Location" in fns else None,
            metrics=metrics,
            cell_values=cell_values,
        )

    # -- state restoration -------------------------------------------------------------

    @classmethod
    def from_state(
        cls,
        config: EmulatorConfig,
        positions_m: np.ndarray,
        serving: np.ndarray,
        rntis: np.ndarray,
    ) -> "RanNetwork":
        """Rebuild a network around externally supplied UE state.

        Cell layout comes from the config (same grid rule); UE count, RNTIs,
        positions and attachments are taken verbatim. Used to resume a
        captured deployment under new scenario parameters.
        """
        k = len(rntis)
        shell_cfg = EmulatorConfig(**{**config.__dict__, "ues_per_cell": 0})
        net = cls(shell_cfg)
        net.config = config
        net.n_ues = k
        net.rnti = np.asarray(rntis, dtype=int).copy()
        net.serving = np.asarray(serving, dtype=int).copy()
        net.pos = np.asarray(positions_m, dtype=float).copy()
        net.way = net.rng.random((k, 2)) * config.area_m
        net.speed = config.speed_mps * net.rng.uniform(0.5, 1.5, size=k)
        net.buffer = net.rng.integers(0, 256, size=k).astype(float)
        net._a3_s = np.zeros(k)
        net.reported = net._reported_matrix()
        net.metrics = np.zeros((k, len(NUMERIC_METRICS)))
        net._refresh_metrics()
        return net

    # -- ground truth accessors ------------------------------------------------------

    def attachment_map(self) -> dict[str, int]:
        """UE twin id -> serving cell index (emulator's ground truth)."""
        return {f"ue-{int(self.rnti[u])}": int(self.serving[u]) for u in range(self.n_ues)}

    def attached_per_cell(self) -> list[int]:
        return [int((self.serving == i).sum()) for i in range(len(self.cell_ids))]


def create_network(
    cells: int,
    ues_per_cell: int,
    area_m: float = 2000.0,
    seed: int = 0,
    **overrides,
) -> RanNetwork:
    config = EmulatorConfig(
        cells=cells, ues_per_cell=ues_per_cell, area_m=area_m, seed=seed, **overrides
    )
    return RanNetwork(config)

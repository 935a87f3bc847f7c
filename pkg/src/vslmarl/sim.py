"""Cell transmission model freeway simulator.

Triangular fundamental diagram, per-lane units:

    sending   S_i = lanes_i * min(v_eff_i * k_i, q_max)
    receiving R_i = lanes_i * min(q_max, w * (k_jam - k_i))
    flow      f_i = min(S_i, R_{i+1})
    update    k_i += dt / (L_i * lanes_i) * (inflow_i - outflow_i)

Units: miles, hours internally (times are given in seconds at the API),
veh/mi/lane for density and veh/hr for flows. On-ramps join a cell with a
demand-proportional merge. Mainline and ramp demand wait in vertical
queues, so ``vehicles()`` + cumulative exits always equals the initial
load + cumulative demand.

Posted limits reach traffic through the compliance mix
``v_eff = c * min(limit, v_free) + (1 - c) * v_free``.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corridor import (DEFAULT_MAX, ConfigError, Corridor, Direction, Gantry,
                       Measurement, Sensor, load_structured, corridor_from_dict)
from .seeding import derive_rng


@dataclass(frozen=True)
class FundamentalDiagram:
    v_free: float = 70.0
    q_max: float = 2000.0
    k_jam: float = 200.0

    @property
    def k_crit(self) -> float:
        return self.q_max / self.v_free

    @property
    def w(self) -> float:
        """Congestion wave speed closing the triangle."""
        return self.q_max / (self.k_jam - self.k_crit)


@dataclass(frozen=True)
class DemandProfile:
    """Piecewise-constant inflow, ``schedule`` = [(start_s, veh/hr/lane), ...]."""

    schedule: tuple[tuple[float, float], ...]

    def __post_init__(self):
        sched = tuple((float(t), float(q)) for t, q in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if not sched:
            raise ConfigError("empty demand schedule")
        starts = [t for t, _ in sched]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("demand start times must be strictly increasing")
        if any(q < 0 for _, q in sched):
            raise ConfigError("demand flows must be non-negative")

    def flow_at(self, t: float) -> float:
        q = 0.0
        for start, flow in self.schedule:
            if t + 1e-9 >= start:
                q = flow
            else:
                break
        return q


@dataclass(frozen=True)
class Ramp:
    x: float  # miles from the upstream end of the corridor
    lanes: int
    demand: DemandProfile


@dataclass(frozen=True)
class SimConfig:
    dt: float = 2.0
    compliance: float = 0.05
    sensor_interval: float = 60.0
    horizon: float = 7200.0
    seed: int = 0
    start_time: float = 0.0
    speed_noise: float = 0.0
    occ_noise: float = 0.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if not 0.0 <= self.compliance <= 1.0:
            raise ConfigError("compliance must be in [0, 1]")
        ratio = self.sensor_interval / self.dt
        if self.sensor_interval <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("sensor_interval must be a positive multiple of dt")
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")


@dataclass
class ScenarioSpec:
    """Everything needed to build a corridor and its simulator."""

    name: str
    length: float
    lanes: int
    direction: Direction
    origin_milepost: float  # milepost of the upstream end
    gantry_x: list[float]
    sensor_x: list[float]
    mainline: DemandProfile
    ramps: list[Ramp] = field(default_factory=list)
    gantry_max: list[int] | None = None
    cell_length: float = 0.1
    fd: FundamentalDiagram = FundamentalDiagram()
    config: SimConfig = SimConfig()
    default_max: int = DEFAULT_MAX
    demand_scale: float = 1.0

    def __post_init__(self):
        self.direction = Direction.parse(self.direction)

    def milepost(self, x: float) -> float:
        return round(self.origin_milepost + self.direction.sign * x, 6)

    def x_of(self, milepost: float) -> float:
        return round(self.direction.sign * (milepost - self.origin_milepost), 9)

    def corridor(self) -> Corridor:
        maxima = self.gantry_max or [self.default_max] * len(self.gantry_x)
        if len(maxima) != len(self.gantry_x):
            raise ConfigError("gantry_max length differs from gantry count")
        gantries = [Gantry(f"G{i + 1:02d}", self.milepost(x), self.direction, int(m))
                    for i, (x, m) in enumerate(zip(self.gantry_x, maxima))]
        sensors = [Sensor(f"S{i + 1:02d}", self.milepost(x), self.direction)
                   for i, x in enumerate(self.sensor_x)]
        return Corridor.build(gantries, sensors, self.direction, self.default_max)

    def build(self) -> tuple[Corridor, "CTMSimulator"]:
        corridor = self.corridor()
        return corridor, CTMSimulator(self, corridor)


class CTMSimulator:
    """Single-threaded CTM instance bound to one corridor."""

    def __init__(self, spec: ScenarioSpec, corridor: Corridor):
        self.spec = spec
        self.corridor = corridor
        self.fd = spec.fd
        self.config = spec.config
        cfg = self.config
        n = int(round(spec.length / spec.cell_length))
        if n < 2:
            raise ConfigError("corridor needs at least two cells")
        self.n_cells = n
        self.L = spec.cell_length
        if cfg.dt / 3600.0 > self.L / max(self.fd.v_free, self.fd.w) + 1e-12:
            raise ConfigError(f"dt={cfg.dt}s violates CFL for cell length {self.L} mi")
        self.lanes = np.full(n, float(spec.lanes))
        self.ramp_cells = [self._cell(r.x) for r in spec.ramps]
        for c in self.ramp_cells:
            if c == 0:
                raise ConfigError("on-ramp cannot join the first cell")
        if len(set(self.ramp_cells)) != len(self.ramp_cells):
            raise ConfigError("two ramps share a merge cell")

        ids = corridor.gantry_ids
        xs = {g.id: spec.x_of(g.milepost) for g in corridor.gantries}
        self.gantry_cells = [self._cell(xs[i]) for i in ids]
        self.governed = self._governed_ranges([xs[i] for i in ids])
        self.sensor_ids = [s.id for s in corridor.sensors]
        self.sensor_cells = {s.id: self._cell(spec.x_of(s.milepost)) for s in corridor.sensors}
        self._sensor_idx = np.array([self.sensor_cells[s] for s in self.sensor_ids])
        self.reset()

    # geometry -----------------------------------------------------------
    def _cell(self, x: float) -> int:
        if x < -1e-9 or x > self.spec.length + 1e-9:
            raise ConfigError(f"position {x} mi outside corridor [0, {self.spec.length}]")
        return min(int(math.floor(x / self.L + 1e-9)), self.n_cells - 1)

    def _governed_ranges(self, gx: list[float]) -> list[tuple[int, int]]:
        """Cells [start, stop) posted by each gantry: from the gantry down to
        the next gantry downstream; the most downstream gantry covers one
        typical spacing."""
        order = np.argsort(gx)
        spacing = float(np.median(np.diff(np.sort(gx)))) if len(gx) > 1 else 0.5
        ranges: list[tuple[int, int]] = [(0, 0)] * len(gx)
        for rank, gi in enumerate(order):
            start = self._cell(gx[gi])
            if rank + 1 < len(order):
                stop = self._cell(gx[order[rank + 1]])
            else:
                stop = min(self.n_cells, self._cell(min(gx[gi] + spacing, self.spec.length)))
            ranges[gi] = (start, max(stop, start + 1))
        return ranges

    # state --------------------------------------------------------------
    def reset(self, demand_scale: float | None = None, density: np.ndarray | None = None):
        if demand_scale is not None:
            self.spec.demand_scale = demand_scale
        n = self.n_cells
        self.k = np.zeros(n) if density is None else np.array(density, dtype=float)
        self.v_eff = np.full(n, self.fd.v_free)
        self.limits = [self.corridor.default_max] * len(self.corridor)
        self.queue_main = 0.0
        self.queue_ramp = np.zeros(len(self.spec.ramps))
        self.t = 0.0
        self.cum_in = 0.0
        self.cum_out = 0.0
        self.initial_vehicles = self.vehicles()
        self.vht = 0.0
        self.vmt = 0.0
        self.cell_speed = self.v_eff.copy()
        self.cell_flow = np.zeros(n)
        self._rng = derive_rng(self.config.seed, "sensor-noise")
        self._reset_window()

    def _reset_window(self):
        n = self.n_cells
        self._acc_qv = np.zeros(n)
        self._acc_q = np.zeros(n)
        self._acc_k = np.zeros(n)
        self._acc_v = np.zeros(n)
        self._acc_t = 0.0

    def vehicles(self) -> float:
        return float(np.sum(self.k * self.L * self.lanes)) + self.queue_main + float(np.sum(self.queue_ramp))

    @property
    def timestamp(self) -> float:
        return self.config.start_time + self.t

    # control ------------------------------------------------------------
    def apply_speed_limits(self, limits: Sequence[int], compliance: float | None = None):
        """Set posted limits, one per gantry in corridor order."""
        if len(limits) != len(self.corridor):
            raise ValueError(f"expected {len(self.corridor)} limits, got {len(limits)}")
        c = self.config.compliance if compliance is None else compliance
        vf = self.fd.v_free
        v = np.full(self.n_cells, vf)
        for lim, (a, b) in zip(limits, self.governed):
            v[a:b] = c * min(lim, vf) + (1.0 - c) * vf
        self.v_eff = v
        self.limits = list(limits)

    # dynamics -----------------------------------------------------------
    def step(self):
        fd = self.fd
        dt_h = self.config.dt / 3600.0
        k, lanes = self.k, self.lanes
        send = lanes * np.minimum(self.v_eff * k, fd.q_max)
        recv = lanes * np.minimum(fd.q_max, fd.w * (fd.k_jam - k))

        self.vht += self.vehicles() * dt_h
        scale = self.spec.demand_scale
        q_main = self.spec.mainline.flow_at(self.t) * self.spec.lanes * scale
        self.queue_main += q_main * dt_h
        self.cum_in += q_main * dt_h
        for j, ramp in enumerate(self.spec.ramps):
            qr = ramp.demand.flow_at(self.t) * ramp.lanes * scale
            self.queue_ramp[j] += qr * dt_h
            self.cum_in += qr * dt_h

        # flow across each cell boundary: out[i] leaves cell i
        out = np.empty_like(k)
        out[:-1] = np.minimum(send[:-1], recv[1:])
        out[-1] = send[-1]
        inflow = np.zeros_like(k)
        origin_send = min(self.queue_main / dt_h, fd.q_max * self.spec.lanes)
        inflow[0] = min(origin_send, recv[0])
        inflow[1:] = out[:-1]
        for j, (c, ramp) in enumerate(zip(self.ramp_cells, self.spec.ramps)):
            s_main = send[c - 1]
            s_ramp = min(self.queue_ramp[j] / dt_h, fd.q_max * ramp.lanes)
            total = s_main + s_ramp
            if total > recv[c] and total > 0:
                q_m = recv[c] * s_main / total
                q_r = recv[c] * s_ramp / total
            else:
                q_m, q_r = s_main, s_ramp
            out[c - 1] = q_m
            inflow[c] = q_m + q_r
            self.queue_ramp[j] -= q_r * dt_h
        self.queue_main -= inflow[0] * dt_h

        self.k = np.clip(k + dt_h / (self.L * lanes) * (inflow - out), 0.0, fd.k_jam)
        self.cum_out += out[-1] * dt_h
        self.vmt += float(np.sum(out)) * self.L * dt_h

        dens = k * lanes
        with np.errstate(divide="ignore", invalid="ignore"):
            speed = np.where(dens > 1e-9, out / dens, self.v_eff)
        self.cell_speed = np.minimum(speed, self.v_eff)
        self.cell_flow = out
        self._acc_qv += out * self.cell_speed * dt_h
        self._acc_q += out * dt_h
        self._acc_k += k * dt_h
        self._acc_v += self.v_eff * dt_h
        self._acc_t += dt_h
        self.t += self.config.dt

    def advance(self, seconds: float):
        steps = int(round(seconds / self.config.dt))
        for _ in range(steps):
            self.step()

    # sensing ------------------------------------------------------------
    def readout(self) -> dict[str, Measurement]:
        """Aggregate every sensor over the window since the last readout."""
        idx = self._sensor_idx
        acc_t = self._acc_t
        if acc_t <= 0:
            k = self.k[idx]
            speed = self.cell_speed[idx]
        else:
            q = self._acc_q[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                speed = np.where(q > 1e-12, self._acc_qv[idx] / q, self._acc_v[idx] / acc_t)
            k = self._acc_k[idx] / acc_t
        occ = k / self.fd.k_jam
        cfg = self.config
        if cfg.speed_noise > 0 or cfg.occ_noise > 0:
            speed = speed + self._rng.normal(0.0, cfg.speed_noise, size=len(idx))
            occ = occ + self._rng.normal(0.0, cfg.occ_noise, size=len(idx))
        speed = np.clip(speed, 0.0, 100.0)
        occ = np.clip(occ, 0.0, 1.0)
        ts = self.timestamp
        self._reset_window()
        return {sid: Measurement(sid, ts, float(v), float(o))
                for sid, v, o in zip(self.sensor_ids, speed, occ)}

    def sensor_readout(self, sensor_id: str) -> Measurement:
        """Readout of one sensor; closes the shared aggregation window."""
        return self.readout()[sensor_id]

    def mean_speed(self, x0: float, x1: float) -> float:
        a, b = self._cell(x0), self._cell(x1)
        return float(np.mean(self.cell_speed[a:max(b, a + 1)]))

    def clone(self) -> "CTMSimulator":
        return copy.deepcopy(self)


# scenarios ---------------------------------------------------------------

def training_spec(seed: int = 0) -> ScenarioSpec:
    """Seven-mile, four-lane corridor with eight gantries upstream of a
    two-lane on-ramp; 1850 veh/hr/lane for one hour, then half."""
    gantry_x = [2.0 + 0.5 * i for i in range(8)]
    return ScenarioSpec(
        name="training",
        length=7.0,
        lanes=4,
        direction=Direction.DECREASING,
        origin_milepost=60.0,
        gantry_x=gantry_x,
        sensor_x=list(gantry_x),
        mainline=DemandProfile(((0, 1850.0), (3600, 925.0))),
        ramps=[Ramp(6.0, 2, DemandProfile(((0, 1000.0),)))],
        config=SimConfig(dt=2.0, compliance=0.05, sensor_interval=60.0, horizon=7200.0, seed=seed),
    )


TESTING_RAMPS = (
    (5.5, 2, ((0, 700.0), (1800, 900.0), (5400, 500.0))),
    (11.0, 2, ((0, 600.0), (2700, 850.0), (5400, 400.0))),
    (15.5, 2, ((0, 800.0), (3600, 1000.0), (5400, 500.0))),
)


def testing_spec(seed: int = 0, compliance: float = 0.05, custom_max: int = 55,
                 n_custom: int = 6) -> ScenarioSpec:
    """Seventeen-mile westbound-like corridor (MM 70 -> 53) with 34 gantries,
    sensors 0-0.2 mi downstream and three congestion sources."""
    rng = derive_rng(seed, "layout")
    gantry_x = [round(0.2 + 0.5 * i, 3) for i in range(34)]
    offsets = np.round(rng.uniform(0.0, 0.2, size=34), 2)
    sensor_x = [round(x + float(o), 3) for x, o in zip(gantry_x, offsets)]
    # gantries are indexed upstream-first here; the last ones sit nearest downtown
    maxima = [DEFAULT_MAX] * (34 - n_custom) + [custom_max] * n_custom
    return ScenarioSpec(
        name="testing",
        length=17.0,
        lanes=4,
        direction=Direction.DECREASING,
        origin_milepost=70.0,
        gantry_x=gantry_x,
        sensor_x=sensor_x,
        mainline=DemandProfile(((0, 1300.0), (1200, 1600.0), (4800, 1000.0))),
        ramps=[Ramp(x, lanes, DemandProfile(s)) for x, lanes, s in TESTING_RAMPS],
        gantry_max=maxima,
        config=SimConfig(dt=2.0, compliance=compliance, sensor_interval=30.0, horizon=7200.0,
                         seed=seed),
    )


def build_training_scenario(seed: int = 0) -> tuple[Corridor, CTMSimulator]:
    return training_spec(seed).build()


def build_testing_scenario(seed: int = 0, compliance: float = 0.05) -> tuple[Corridor, CTMSimulator]:
    return testing_spec(seed, compliance).build()


# configuration files -------------------------------------------------------

_SCENARIO_KEYS = {
    "base", "seed", "horizon", "dt", "compliance", "sensor_interval", "start_time",
    "speed_noise", "occ_noise", "demand_scale", "fd", "mainline", "ramps", "gantry_max",
    "corridor", "length", "lanes", "origin_milepost", "cell_length", "name",
}


def spec_from_dict(data: Mapping, base_dir: Path | None = None) -> ScenarioSpec:
    """Build a scenario from a config mapping (schema in README)."""
    for key in data:
        if key not in _SCENARIO_KEYS:
            raise ConfigError(f"unknown scenario key {key!r}")
    base = data.get("base", "training")
    seed = int(data.get("seed", 0))
    if base == "training":
        spec = training_spec(seed)
    elif base == "testing":
        spec = testing_spec(seed)
    else:
        raise ConfigError(f"unknown base scenario {base!r}")
    cfg_fields = {k: data[k] for k in ("horizon", "dt", "compliance", "sensor_interval",
                                       "start_time", "speed_noise", "occ_noise") if k in data}
    spec.config = replace(spec.config, seed=seed, **{k: float(v) for k, v in cfg_fields.items()})
    for key in ("name",):
        if key in data:
            spec.name = str(data[key])
    for key, cast in (("length", float), ("lanes", int), ("origin_milepost", float),
                      ("cell_length", float), ("demand_scale", float)):
        if key in data:
            setattr(spec, key, cast(data[key]))
    if "fd" in data:
        try:
            spec.fd = FundamentalDiagram(**{k: float(v) for k, v in data["fd"].items()})
        except TypeError as exc:
            raise ConfigError(f"fd: {exc}") from None
    if "mainline" in data:
        spec.mainline = DemandProfile(tuple(tuple(p) for p in data["mainline"]))
    if "ramps" in data:
        try:
            spec.ramps = [Ramp(float(r["x"]) if "x" in r else spec.x_of(float(r["milepost"])),
                               int(r.get("lanes", 2)),
                               DemandProfile(tuple(tuple(p) for p in r["schedule"])))
                          for r in data["ramps"]]
        except KeyError as exc:
            raise ConfigError(f"ramps: missing key {exc.args[0]!r}") from None
    if "corridor" in data:
        cdata = data["corridor"]
        if isinstance(cdata, str):
            path = Path(cdata)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            cdata = load_structured(path)
        corridor = corridor_from_dict(cdata)
        spec.direction = corridor.direction
        # spec keeps gantries upstream-first
        gs = list(reversed(corridor.gantries))
        spec.gantry_x = [spec.x_of(g.milepost) for g in gs]
        spec.gantry_max = [g.max_limit for g in gs]
        spec.sensor_x = [spec.x_of(s.milepost) for s in corridor.sensors]
        spec.default_max = corridor.default_max
    if "gantry_max" in data:
        gm = data["gantry_max"]
        if isinstance(gm, Mapping):
            maxima = list(spec.gantry_max or [spec.default_max] * len(spec.gantry_x))
            for gid, value in gm.items():
                idx = int(str(gid).lstrip("G")) - 1
                if not 0 <= idx < len(maxima):
                    raise ConfigError(f"gantry_max: unknown gantry {gid!r}")
                maxima[idx] = int(value)
            spec.gantry_max = maxima
        else:
            spec.gantry_max = [int(v) for v in gm]
    return spec


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    return spec_from_dict(load_structured(path), path.parent)


def write_measurements_csv(path, rows: Iterable[Measurement]):
    """sensor_id,timestamp,speed,occupancy; empty cells mark missing data."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "timestamp", "speed", "occupancy"])
        for m in rows:
            speed = repr(float(m.speed)) if m.valid and m.speed is not None else ""
            occ = repr(float(m.occupancy)) if m.valid and m.occupancy is not None else ""
            w.writerow([m.sensor_id, repr(float(m.timestamp)), speed, occ])

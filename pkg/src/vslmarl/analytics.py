"""Post-hoc analysis of decision logs and sensor data: stage attribution,
time-space grids, virtual vehicles and Wasserstein domain mismatch."""

from __future__ import annotations

import bisect
import datetime as dt
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix

from .corridor import Corridor, Direction, Measurement
from .guards import Stage

CATEGORIES = (Stage.POLICY.value, Stage.SM.value, Stage.MSLC.value, Stage.DB.value)
# hours of local day; decreasing-milepost corridors stand in for westbound
PEAK_WINDOWS = {Direction.DECREASING: (6.0, 9.0), Direction.INCREASING: (15.0, 18.0)}
MIN_SPEED = 2.0


# attribution ----------------------------------------------------------------

@dataclass
class AttributionSummary:
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    per_day: dict[str, dict[str, float]] = field(default_factory=dict)
    n_decisions: int = 0
    filters: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.n_decisions == 0

    def rows(self) -> list[dict]:
        return [{"category": c, "mean_pct": self.mean[c], "std_pct": self.std[c]} for c in self.mean]


def _local_time(ts: float, utc_offset_hours: float) -> dt.datetime:
    return dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc) + dt.timedelta(hours=utc_offset_hours)


def attribution_summary(records: Iterable[Mapping], corridors: Corridor | Sequence[Corridor] | None = None,
                        direction=None, peak_hours: tuple[float, float] | bool | None = None,
                        exclude_custom: bool = False, utc_offset_hours: float = 0.0) -> AttributionSummary:
    """Daily share of decisions by attributed stage, mean and std over days.

    ``peak_hours=True`` uses the default window for ``direction``.
    An empty result (nothing left after filtering) has ``empty`` set.
    """
    if isinstance(corridors, Corridor):
        corridors = [corridors]
    corridors = list(corridors or [])
    keep_ids = None
    if direction is not None:
        direction = Direction.parse(direction)
        keep_ids = {g.id for c in corridors if c.direction is direction for g in c.gantries}
    custom = set().union(*(c.custom_max_ids() for c in corridors)) if corridors else set()
    if peak_hours is True:
        if direction is None:
            raise ValueError("peak_hours=True needs a direction")
        peak_hours = PEAK_WINDOWS[direction]
    filters = {"direction": direction.value if direction else None, "peak_hours": peak_hours or None,
               "exclude_custom": exclude_custom}

    counts: dict[str, dict[str, int]] = {}
    for r in records:
        gid = r["gantry_id"]
        if keep_ids is not None and gid not in keep_ids:
            continue
        if exclude_custom and gid in custom:
            continue
        local = _local_time(float(r["tick"]), utc_offset_hours)
        if peak_hours:
            hour = local.hour + local.minute / 60.0 + local.second / 3600.0
            if not peak_hours[0] <= hour < peak_hours[1]:
                continue
        day = counts.setdefault(local.strftime("%Y-%m-%d"), {})
        day[r["attribution"]] = day.get(r["attribution"], 0) + 1

    n = sum(sum(d.values()) for d in counts.values())
    if n == 0:
        return AttributionSummary(filters=filters)
    cats = list(CATEGORIES) + sorted({c for d in counts.values() for c in d} - set(CATEGORIES))
    per_day = {}
    for day in sorted(counts):
        total = sum(counts[day].values())
        per_day[day] = {c: 100.0 * counts[day].get(c, 0) / total for c in cats}
    table = np.array([[per_day[d][c] for c in cats] for d in per_day])
    return AttributionSummary(
        mean={c: float(v) for c, v in zip(cats, table.mean(axis=0))},
        std={c: float(v) for c, v in zip(cats, table.std(axis=0))},
        per_day=per_day, n_decisions=n, filters=filters)


# Wasserstein ------------------------------------------------------------------

@dataclass(frozen=True)
class EmpiricalDistribution:
    """Equal-weight samples of normalized observations, shape (n, d)."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.shape[0] == 0:
            raise ValueError("empty distribution")
        if np.any(s < -1e-12) or np.any(s > 1 + 1e-12):
            raise ValueError("observation samples must lie in [0, 1]")
        object.__setattr__(self, "samples", s)


def _as_samples(x) -> np.ndarray:
    if isinstance(x, EmpiricalDistribution):
        return x.samples
    s = np.asarray(x, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] == 0:
        raise ValueError("empty sample set")
    return s


def _sq_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def wasserstein_distance(a, b, p: int = 2) -> float:
    """Exact p-Wasserstein distance between two equal-weight sample sets
    under the Euclidean ground metric.

    Equal sizes reduce to an assignment problem; unequal sizes are solved
    as a transport linear program.
    """
    A, B = _as_samples(a), _as_samples(b)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    sq = _sq_cost(A, B)
    cost = sq if p == 2 else np.sqrt(sq) ** p
    n, m = cost.shape
    if n == m:
        rows, cols = linear_sum_assignment(cost)
        total = float(cost[rows, cols].sum()) / n
    else:
        total = _transport_lp(cost)
    return max(total, 0.0) ** (1.0 / p)


def _transport_lp(cost: np.ndarray) -> float:
    n, m = cost.shape
    idx = np.arange(n * m)
    rows = np.concatenate([idx // m, n + idx % m])
    data = np.ones(2 * n * m)
    A_eq = coo_matrix((data, (rows, np.concatenate([idx, idx]))), shape=(n + m, n * m))
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(cost.ravel(), A_eq=A_eq.tocsr(), b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def mismatch_matrix(datasets: Sequence, p: int = 2, n_jobs: int = 1) -> np.ndarray:
    """Symmetric matrix of pairwise distances with a zero diagonal."""
    k = len(datasets)
    if k < 2:
        raise ValueError("need at least two datasets")
    pairs = list(itertools.combinations(range(k), 2))
    if n_jobs == 1:
        vals = [wasserstein_distance(datasets[i], datasets[j], p) for i, j in pairs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            vals = list(pool.map(wasserstein_distance, [datasets[i] for i, _ in pairs],
                                 [datasets[j] for _, j in pairs], [p] * len(pairs)))
    out = np.zeros((k, k))
    for (i, j), v in zip(pairs, vals):
        out[i, j] = out[j, i] = v
    return out


def sample_observations(records: Iterable[Mapping], n: int, rng: np.random.Generator) -> EmpiricalDistribution:
    obs = np.array([r["observation"] for r in records if r.get("observation") is not None])
    if len(obs) == 0:
        raise ValueError("no observations in the log")
    idx = rng.choice(len(obs), size=n, replace=len(obs) < n)
    return EmpiricalDistribution(obs[idx])


# time-space fields -------------------------------------------------------------

@dataclass
class SpeedField:
    """Mean speed per (time bin, sensor milepost)."""

    times: np.ndarray      # bin starts, seconds
    mileposts: np.ndarray  # ascending
    speeds: np.ndarray     # (len(times), len(mileposts))
    direction: Direction
    bin_seconds: float = 30.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.mileposts = np.asarray(self.mileposts, dtype=float)
        self.speeds = np.asarray(self.speeds, dtype=float)
        self.direction = Direction.parse(self.direction)
        if self.speeds.shape != (len(self.times), len(self.mileposts)):
            raise ValueError("speed grid shape does not match bins")
        if np.any(np.diff(self.mileposts) <= 0):
            raise ValueError("mileposts must be strictly increasing")

    @property
    def t_end(self) -> float:
        return float(self.times[-1] + self.bin_seconds)

    def speed_at(self, t: float, milepost: float) -> float:
        ti = int(math.floor((t - self.times[0]) / self.bin_seconds + 1e-9))
        xi = int(np.argmin(np.abs(self.mileposts - milepost)))
        v = self.speeds[ti, xi]
        return 0.0 if np.isnan(v) else float(v)


def speed_field(measurements: Iterable[Measurement], corridor: Corridor,
                bin_seconds: float = 30.0) -> SpeedField:
    """Bin sensor readings into a time-space speed grid."""
    mp = {s.id: s.milepost for s in corridor.sensors}
    rows = [(math.floor(m.timestamp / bin_seconds) * bin_seconds, mp[m.sensor_id], m.speed)
            for m in measurements if m.valid and m.sensor_id in mp]
    if not rows:
        raise ValueError("no valid measurements")
    df = pd.DataFrame(rows, columns=["time", "milepost", "speed"])
    grid = df.pivot_table(index="time", columns="milepost", values="speed", aggfunc="mean")
    times = np.arange(grid.index.min(), grid.index.max() + bin_seconds / 2, bin_seconds)
    grid = grid.reindex(index=times).sort_index(axis=1).ffill().bfill()
    return SpeedField(grid.index.values, grid.columns.values, grid.values, corridor.direction, bin_seconds)


def virtual_vehicle(field_: SpeedField, start_time: float, start_milepost: float) -> list[tuple[float, float, float]]:
    """Drive a probe vehicle through the speed field.

    Returns (time, milepost, speed) samples; each step lasts one time bin and
    uses the speed of the nearest sensor in the current bin, floored at 2 mph.
    The last sample is where the vehicle leaves the corridor, if it does
    before the recording ends.
    """
    lo, hi = float(field_.mileposts[0]), float(field_.mileposts[-1])
    if not (field_.times[0] <= start_time < field_.t_end) or not lo <= start_milepost <= hi:
        raise ValueError("start outside the speed field")
    sign = field_.direction.sign
    exit_mp = hi if sign > 0 else lo
    step = field_.bin_seconds
    t, x = float(start_time), float(start_milepost)
    out = []
    while t < field_.t_end - 1e-9:
        v = max(field_.speed_at(t, x), MIN_SPEED)
        out.append((t, x, v))
        nx = x + sign * v * step / 3600.0
        if sign * (nx - exit_mp) >= 0:
            frac = abs(exit_mp - x) / (v * step / 3600.0)
            if frac > 1e-12:
                out.append((t + frac * step, exit_mp, v))
            break
        t, x = t + step, nx
    return out


def vsl_encounter_series(trajectory: Sequence[tuple[float, float, float]], records: Iterable[Mapping],
                         corridor: Corridor) -> list[tuple[float, float, int | None]]:
    """(time, travel speed, limit shown by the next gantry at or ahead).

    The limit is None past the last gantry or before its first decision.
    """
    posted: dict[str, tuple[list[float], list[int]]] = {}
    for r in sorted(records, key=lambda r: r["tick"]):
        ts, vals = posted.setdefault(r["gantry_id"], ([], []))
        ts.append(float(r["tick"]))
        vals.append(int(r["final"]))
    sign = corridor.direction.sign
    out = []
    for t, x, v in trajectory:
        ahead = [g for g in corridor.gantries if sign * (g.milepost - x) >= -1e-9]
        limit = None
        if ahead:
            g = min(ahead, key=lambda g: sign * (g.milepost - x))
            ts, vals = posted.get(g.id, ([], []))
            k = bisect.bisect_right(ts, t + 1e-9) - 1
            if k >= 0:
                limit = vals[k]
        out.append((t, v, limit))
    return out


def limit_grids(records: Iterable[Mapping], corridor: Corridor) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Posted-limit grid (ticks x gantries by milepost) and the policy-only
    view where guard overrides are missing."""
    df = pd.DataFrame(list(records))
    if df.empty:
        raise ValueError("empty decision log")
    cols = [g.id for g in sorted(corridor.gantries, key=lambda g: g.milepost)]
    full = df.pivot(index="tick", columns="gantry_id", values="final").reindex(columns=cols)
    masked_df = df.assign(final=df["final"].where(df["attribution"] == Stage.POLICY.value))
    masked = masked_df.pivot(index="tick", columns="gantry_id", values="final").reindex(columns=cols)
    return full, masked


def time_space_export(out_dir, corridor: Corridor, records: Iterable[Mapping] | None = None,
                      measurements: Iterable[Measurement] | None = None,
                      bin_seconds: float = 30.0) -> dict[str, Path]:
    """Write plot-ready CSV grids; returns the written paths by name."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if records is not None:
        full, masked = limit_grids(records, corridor)
        for name, grid in (("limits", full), ("limits_policy_only", masked)):
            path = out / f"{name}.csv"
            grid.astype("Int64").to_csv(path, index_label="tick")
            written[name] = path
        meta = out / "gantries.csv"
        pd.DataFrame([{"gantry_id": g.id, "milepost": g.milepost, "max_limit": g.max_limit}
                      for g in corridor.gantries]).to_csv(meta, index=False)
        written["gantries"] = meta
    if measurements is not None:
        f = speed_field(measurements, corridor, bin_seconds)
        path = out / "speed.csv"
        pd.DataFrame(f.speeds, index=pd.Index(f.times, name="time"),
                     columns=[repr(float(m)) for m in f.mileposts]).to_csv(path)
        written["speed"] = path
    if not written:
        raise ValueError("nothing to export")
    return written

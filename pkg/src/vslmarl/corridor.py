"""Corridor topology and agent observations.

A corridor is one travel direction of a freeway with VSL gantries and
roadside sensors. Gantries are stored from the most downstream (index 0)
to the most upstream, which is the order the control pipeline walks them.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SPEED_LIMITS: tuple[int, ...] = (30, 40, 50, 60, 70)
DEFAULT_MAX = 70
ACTION_NORM = 70.0
SPEED_NORM = 80.0
SEARCH_RADIUS = 2.0


class ConfigError(ValueError):
    """Invalid corridor or scenario configuration."""


class Direction(str, enum.Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"

    @property
    def sign(self) -> int:
        """+1 when traffic moves toward larger mileposts."""
        return 1 if self is Direction.INCREASING else -1

    @classmethod
    def parse(cls, value: "str | Direction") -> "Direction":
        if isinstance(value, Direction):
            return value
        v = str(value).lower().replace("-milepost", "")
        try:
            return cls(v)
        except ValueError:
            raise ConfigError(f"unknown direction {value!r}") from None


def is_speed_limit(value) -> bool:
    return value in SPEED_LIMITS


def check_speed_limit(value) -> int:
    if not is_speed_limit(value):
        raise ValueError(f"{value!r} is not on the speed limit grid {SPEED_LIMITS}")
    return int(value)


def limit_index(value: int) -> int:
    return SPEED_LIMITS.index(check_speed_limit(value))


@dataclass(frozen=True)
class Gantry:
    id: str
    milepost: float
    direction: Direction = Direction.INCREASING
    max_limit: int = DEFAULT_MAX

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction.parse(self.direction))
        if self.milepost < 0:
            raise ConfigError(f"gantry {self.id}: negative milepost")
        if self.max_limit < SPEED_LIMITS[0]:
            raise ConfigError(f"gantry {self.id}: max_limit {self.max_limit} below grid")


@dataclass(frozen=True)
class Sensor:
    id: str
    milepost: float
    direction: Direction = Direction.INCREASING

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction.parse(self.direction))


@dataclass
class Measurement:
    sensor_id: str
    timestamp: float
    speed: float
    occupancy: float
    valid: bool = True
    interpolated: bool = False

    def __post_init__(self):
        if self.valid:
            if not self.speed >= 0:
                raise ValueError(f"sensor {self.sensor_id}: speed {self.speed} < 0")
            if not 0.0 <= self.occupancy <= 1.0:
                raise ValueError(f"sensor {self.sensor_id}: occupancy {self.occupancy} outside [0, 1]")


@dataclass(frozen=True)
class Observation:
    a_down: float
    speed: float
    occ: float
    speed_up: float
    occ_up: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a_down, self.speed, self.occ, self.speed_up, self.occ_up])


def order_downstream_to_upstream(gantries: Iterable[Gantry], direction) -> list[Gantry]:
    """Sort gantries so that index 0 is the most downstream one."""
    direction = Direction.parse(direction)
    gantries = list(gantries)
    for g in gantries:
        if g.direction is not direction:
            raise ConfigError(f"gantry {g.id} runs {g.direction.value}, corridor is {direction.value}")
    mps = [g.milepost for g in gantries]
    if len(set(mps)) != len(mps):
        raise ConfigError("duplicate gantry mileposts")
    # Downstream end has the largest signed milepost.
    return sorted(gantries, key=lambda g: -direction.sign * g.milepost)


def _downstream_offset(gantry_mp: float, sensor_mp: float, direction: Direction) -> float:
    return direction.sign * (sensor_mp - gantry_mp)


def assign_critical_sensor(gantries: Sequence[Gantry], sensors: Sequence[Sensor],
                           direction, radius: float = SEARCH_RADIUS) -> dict[str, str]:
    """Map each gantry to the nearest sensor at or downstream of it.

    Raises ConfigError naming the first gantry that has no sensor within
    ``radius`` miles downstream.
    """
    direction = Direction.parse(direction)
    if not sensors:
        raise ConfigError("corridor has no sensors")
    mapping = {}
    for g in gantries:
        best = None
        for s in sensors:
            if s.direction is not direction:
                continue
            d = _downstream_offset(g.milepost, s.milepost, direction)
            if -1e-9 <= d <= radius + 1e-9:
                key = (round(d, 9), s.id)
                if best is None or key < best[0]:
                    best = (key, s.id)
        if best is None:
            raise ConfigError(f"gantry {g.id}: no downstream sensor within {radius} mi")
        mapping[g.id] = best[1]
    return mapping


@dataclass(frozen=True)
class Corridor:
    """Ordered gantries (downstream first) plus their critical sensors."""

    gantries: tuple[Gantry, ...]
    sensors: tuple[Sensor, ...]
    direction: Direction
    default_max: int = DEFAULT_MAX
    critical: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, gantries: Iterable[Gantry], sensors: Iterable[Sensor], direction,
              default_max: int = DEFAULT_MAX, radius: float = SEARCH_RADIUS) -> "Corridor":
        direction = Direction.parse(direction)
        ordered = order_downstream_to_upstream(gantries, direction)
        sensors = tuple(sensors)
        ids = [s.id for s in sensors]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate sensor ids")
        gids = [g.id for g in ordered]
        if len(set(gids)) != len(gids):
            raise ConfigError("duplicate gantry ids")
        critical = assign_critical_sensor(ordered, sensors, direction, radius)
        return cls(tuple(ordered), sensors, direction, check_speed_limit(default_max), critical)

    def __len__(self) -> int:
        return len(self.gantries)

    @property
    def gantry_ids(self) -> list[str]:
        return [g.id for g in self.gantries]

    def gantry(self, gantry_id: str) -> Gantry:
        for g in self.gantries:
            if g.id == gantry_id:
                return g
        raise KeyError(gantry_id)

    def sensor_order(self) -> list[Sensor]:
        """Sensors sorted from most downstream to most upstream."""
        return sorted(self.sensors, key=lambda s: -self.direction.sign * s.milepost)

    def custom_max_ids(self) -> set[str]:
        return {g.id for g in self.gantries if g.max_limit != self.default_max}

    def to_dict(self) -> dict:
        return {
            "direction": self.direction.value,
            "default_max": self.default_max,
            "gantries": [{"id": g.id, "milepost": g.milepost, "max_limit": g.max_limit}
                         for g in self.gantries],
            "sensors": [{"id": s.id, "milepost": s.milepost} for s in self.sensors],
        }


def corridor_from_dict(data: Mapping) -> Corridor:
    """Build a corridor from the documented file schema (see README)."""
    known = {"direction", "default_max", "search_radius", "gantries", "sensors"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown corridor key {key!r}")
    if "direction" not in data:
        raise ConfigError("corridor: missing key 'direction'")
    direction = Direction.parse(data["direction"])

    def _dir(item):
        return Direction.parse(item.get("direction", direction))

    try:
        gantries = [Gantry(str(g["id"]), float(g["milepost"]), _dir(g),
                           int(g.get("max_limit", data.get("default_max", DEFAULT_MAX))))
                    for g in data.get("gantries", [])]
        sensors = [Sensor(str(s["id"]), float(s["milepost"]), _dir(s))
                   for s in data.get("sensors", [])]
    except KeyError as exc:
        raise ConfigError(f"corridor entry missing key {exc.args[0]!r}") from None
    if not gantries:
        raise ConfigError("corridor: no gantries")
    return Corridor.build(gantries, sensors, direction,
                          int(data.get("default_max", DEFAULT_MAX)),
                          float(data.get("search_radius", SEARCH_RADIUS)))


def load_structured(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yml", ".yaml"):
        import yaml
        return yaml.safe_load(text) or {}
    return json.loads(text)


def load_corridor(path) -> Corridor:
    return corridor_from_dict(load_structured(path))


def build_observation(downstream_action: int, own: Measurement, upstream: Measurement) -> Observation:
    """Normalized five-feature state of one agent."""
    def nspeed(v):
        return min(max(v, 0.0), SPEED_NORM) / SPEED_NORM

    def nocc(o):
        return min(max(o, 0.0), 1.0)

    return Observation(
        a_down=downstream_action / ACTION_NORM,
        speed=nspeed(own.speed),
        occ=nocc(own.occupancy),
        speed_up=nspeed(upstream.speed),
        occ_up=nocc(upstream.occupancy),
    )

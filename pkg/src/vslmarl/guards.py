"""Deployed control pipeline: masked policy, speed-matching, max-limit
correction and debounce, plus constraint verification.

Speed limit lists in this module are always ordered from the most
downstream gantry to the most upstream one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .corridor import (SPEED_LIMITS, Corridor, Measurement, Observation,
                       build_observation)

GRID = np.array(SPEED_LIMITS)
FAILSAFE_HOLD_TICKS = 3

# policy(observation_vector, agent_index) -> logits over SPEED_LIMITS
Policy = Callable[[np.ndarray, int], np.ndarray]


class Stage(str, enum.Enum):
    POLICY = "Policy"
    SM = "SM"
    MSLC = "MSLC"
    DB = "DB"
    FAILSAFE = "FailSafe"


@dataclass(frozen=True)
class GuardConfig:
    a_diff: int = 10
    o_thred: float = 0.15
    strict_round: bool = True

    def __post_init__(self):
        if self.a_diff <= 0 or self.a_diff % 10:
            raise ValueError("a_diff must be a positive multiple of 10")
        if not 0.0 < self.o_thred < 1.0:
            raise ValueError("o_thred must lie in (0, 1)")


def invalid_action_set(downstream_action: int, a_diff: int = 10) -> set[int]:
    return {a for a in SPEED_LIMITS if a > downstream_action + a_diff}


def valid_mask(downstream_action: int, a_diff: int = 10) -> np.ndarray:
    return GRID <= downstream_action + a_diff


def round_up_to_ten(speed: float, strict: bool = True) -> int:
    """Smallest multiple of ten above ``speed`` (at-or-above if not strict)."""
    if speed < 0:
        raise ValueError("speed must be non-negative")
    if strict:
        return int(math.floor(speed / 10.0) + 1) * 10
    return int(math.ceil(speed / 10.0)) * 10


def _clip(lo, x, hi):
    return max(lo, min(x, hi))


def speed_match(intended: int, downstream_intended: int, speed: float, occ: float,
                config: GuardConfig = GuardConfig()) -> int:
    lo, hi = SPEED_LIMITS[0], SPEED_LIMITS[-1]
    if intended == lo:
        f = round_up_to_ten(speed, config.strict_round)
        return _clip(lo, min(downstream_intended + config.a_diff, f), hi)
    if intended == hi and occ >= config.o_thred:
        return _clip(lo, round_up_to_ten(speed, config.strict_round), hi)
    return intended


def max_speed_clip(limit: int, gantry_max: float) -> int:
    """min(limit, gantry_max), snapped down onto the speed limit grid."""
    capped = min(limit, gantry_max)
    on_grid = [a for a in SPEED_LIMITS if a <= capped]
    return on_grid[-1] if on_grid else SPEED_LIMITS[0]


def _record_lows(values: Sequence[int], start: int, step: int) -> list[tuple[int, int]]:
    """Walk from ``start`` and collect (index, min strictly between it and start)
    for each index whose value is a new strict low."""
    out = []
    i = start + step
    run_min = values[start]
    while 0 <= i < len(values):
        if values[i] < run_min:
            out.append((i, run_min))
            run_min = values[i]
        i += step
    return out


def is_order1_bounce(values: Sequence[int], j: int) -> bool:
    """True when position ``j`` is the single intermediate of a bounce that is
    not part of any higher-order bounce.

    A window ``values[l..r]`` is a bounce when
    every interior value exceeds both ends; its order is the interior length.
    ``[30, 60, 50]`` is order 1, but inside ``[30, 60, 50, 40]`` the 60 belongs
    to an order-2 bounce and is not flagged.
    """
    if j <= 0 or j >= len(values) - 1:
        return False
    v = values
    if not (v[j] > v[j - 1] and v[j] > v[j + 1]):
        return False
    lefts = _record_lows(v, j, -1)
    rights = _record_lows(v, j, +1)
    for l, left_min in lefts:
        for r, right_min in rights:
            if r - l < 3:
                continue
            if min(left_min, right_min) > max(v[l], v[r]):
                return False
    return True


def find_order1_bounces(values: Sequence[int]) -> list[int]:
    return [j for j in range(1, len(values) - 1) if is_order1_bounce(values, j)]


def debounce(limits: Sequence[int]) -> list[int]:
    """Remove order-1 bounces from a downstream-to-upstream list.

    The scan starts at the most downstream gantry and uses values already
    corrected earlier in the pass.
    """
    seq = list(limits)
    # bounce detection is symmetric under reversal, so the downstream-first
    # list can be checked in place
    for j in range(1, len(seq) - 1):
        if is_order1_bounce(seq, j):
            seq[j] = min(seq[j - 1], seq[j + 1])
    return seq


@dataclass
class StageDecision:
    gantry_id: str
    observation: tuple[float, ...] | None
    policy_action: int
    after_sm: int
    after_mslc: int
    final: int
    attribution: Stage
    interpolated: bool = False
    missing_ticks: int = 0


def attribute(policy_action: int, after_sm: int, after_mslc: int, final: int,
              first: Stage = Stage.POLICY) -> Stage:
    """Last stage whose output differs from its input."""
    if final != after_mslc:
        return Stage.DB
    if after_mslc != after_sm:
        return Stage.MSLC
    if after_sm != policy_action:
        return Stage.SM
    return first


def greedy_action(logits: np.ndarray, mask: np.ndarray) -> int:
    """Argmax over valid actions, ties toward the lower limit."""
    if not mask.any():
        raise ValueError("empty action mask")
    masked = np.where(mask, logits, -np.inf)
    return int(GRID[int(np.argmax(masked))])  # argmax returns first max = lowest limit


@dataclass
class FailSafeState:
    """Per-gantry memory for the missing-data fallback."""

    last_final: dict[str, int] = field(default_factory=dict)
    missing: dict[str, int] = field(default_factory=dict)


def pipeline_step(corridor: Corridor, measurements: Mapping[str, Measurement], policy: Policy,
                  config: GuardConfig = GuardConfig(),
                  state: FailSafeState | None = None) -> list[StageDecision]:
    """Run the four control steps for one corridor snapshot.

    ``measurements`` maps sensor id to an already interpolated reading.
    ``state`` carries the fail-safe memory between ticks and is updated in
    place when given.
    """
    gantries = corridor.gantries
    n = len(gantries)

    def reading(i):
        return measurements.get(corridor.critical[gantries[i].id])

    intents: list[int] = []
    policy_actions: list[int] = []
    observations: list[tuple[float, ...] | None] = []
    failed: list[bool] = []
    downstream = corridor.default_max
    for i, g in enumerate(gantries):
        own = reading(i)
        up = reading(i + 1) if i + 1 < n else own
        if up is None or not up.valid:
            up = own
        if own is None or not own.valid:
            missing = (state.missing.get(g.id, 0) + 1) if state else FAILSAFE_HOLD_TICKS + 1
            held = state.last_final.get(g.id) if state else None
            if held is None or missing > FAILSAFE_HOLD_TICKS:
                held = max_speed_clip(SPEED_LIMITS[-1], g.max_limit)
            if state is not None:
                state.missing[g.id] = missing
            observations.append(None)
            policy_actions.append(held)
            intents.append(held)
            failed.append(True)
            downstream = held
            continue
        if state is not None:
            state.missing[g.id] = 0
        obs: Observation = build_observation(downstream, own, up)
        vec = obs.as_array()
        mask = valid_mask(downstream, config.a_diff)
        action = greedy_action(np.asarray(policy(vec, i), dtype=float), mask)
        matched = speed_match(action, downstream, own.speed, own.occupancy, config)
        observations.append(tuple(float(x) for x in vec))
        policy_actions.append(action)
        intents.append(matched)
        failed.append(False)
        downstream = matched

    clipped = [max_speed_clip(v, g.max_limit) for v, g in zip(intents, gantries)]
    finals = debounce(clipped)

    decisions = []
    for i, g in enumerate(gantries):
        first = Stage.FAILSAFE if failed[i] else Stage.POLICY
        own = reading(i)
        decisions.append(StageDecision(
            gantry_id=g.id,
            observation=observations[i],
            policy_action=policy_actions[i],
            after_sm=intents[i],
            after_mslc=clipped[i],
            final=finals[i],
            attribution=attribute(policy_actions[i], intents[i], clipped[i], finals[i], first),
            interpolated=bool(own is not None and own.interpolated),
            missing_ticks=state.missing.get(g.id, 0) if state else int(failed[i]),
        ))
        if state is not None:
            state.last_final[g.id] = finals[i]
    return decisions


@dataclass(frozen=True)
class Violation:
    kind: str  # grid | max | bounce | step_down
    gantry_id: str
    value: int
    detail: str = ""


def verify_constraints(finals: Sequence[int], corridor: Corridor,
                       config: GuardConfig = GuardConfig()) -> list[Violation]:
    """Report every constraint violation in a downstream-to-upstream list."""
    if len(finals) != len(corridor):
        raise ValueError("one final limit per gantry required")
    out = []
    ids = corridor.gantry_ids
    for i, (v, g) in enumerate(zip(finals, corridor.gantries)):
        if v not in SPEED_LIMITS:
            out.append(Violation("grid", g.id, v, f"{v} not in {SPEED_LIMITS}"))
        if v > g.max_limit:
            out.append(Violation("max", g.id, v, f"{v} > max {g.max_limit}"))
        if i > 0 and v > finals[i - 1] + config.a_diff:
            out.append(Violation("step_down", g.id, v,
                                 f"{v} > downstream {finals[i - 1]} + {config.a_diff}"))
    drv = list(finals)[::-1]
    n = len(drv)
    for p in find_order1_bounces(drv):
        gid = ids[n - 1 - p]
        out.append(Violation("bounce", gid, drv[p], f"order-1 bounce {drv[p - 1:p + 2]}"))
    return out

"""Multi-agent VSL environment on top of the CTM simulator."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..corridor import SPEED_LIMITS, Measurement, build_observation
from ..guards import valid_mask
from ..sim import ScenarioSpec
from .nets import ActorCritic, critic_input, masked_log_softmax
from .ppo import CONGESTION_OCC, RewardWeights, reward

GRID = np.array(SPEED_LIMITS)


class VSLEnv:
    """Agents decide once per sensor interval, most downstream first."""

    def __init__(self, spec: ScenarioSpec, weights: RewardWeights = RewardWeights(),
                 a_diff: int = 10, occ_crit: float = CONGESTION_OCC):
        self.spec = copy.deepcopy(spec)
        self.corridor, self.sim = self.spec.build()
        self.weights = weights
        self.a_diff = a_diff
        self.occ_crit = occ_crit
        self.n_agents = len(self.corridor)
        self.interval = self.spec.config.sensor_interval
        self.n_steps = int(round(self.spec.config.horizon / self.interval))
        self.own = [self.corridor.critical[g.id] for g in self.corridor.gantries]
        self.up = self.own[1:] + self.own[-1:]
        self.measurements: dict[str, Measurement] = {}

    def reset(self, demand_scale: float = 1.0) -> dict[str, Measurement]:
        self.sim.reset(demand_scale=demand_scale)
        self.measurements = self.sim.readout()
        return self.measurements

    def observation(self, i: int, downstream_action: int) -> np.ndarray:
        m = self.measurements
        return build_observation(downstream_action, m[self.own[i]], m[self.up[i]]).as_array()

    def step(self, limits) -> tuple[dict[str, Measurement], np.ndarray]:
        self.sim.apply_speed_limits(limits)
        self.sim.advance(self.interval)
        self.measurements = self.sim.readout()
        rewards = np.empty(self.n_agents)
        downstream = self.corridor.default_max
        for i, a in enumerate(limits):
            m = self.measurements[self.own[i]]
            rewards[i] = reward(a, downstream, m.speed, m.occupancy, self.weights, self.occ_crit)
            downstream = a
        return self.measurements, rewards


@dataclass
class Rollout:
    obs: np.ndarray        # (T, n, 5)
    masks: np.ndarray      # (T, n, 5)
    actions: np.ndarray    # (T, n) indices
    logp: np.ndarray       # (T, n)
    values: np.ndarray     # (T, n)
    rewards: np.ndarray    # (T, n)
    critic_in: np.ndarray  # (T, n, G)
    vht: float

    @property
    def episode_reward(self) -> float:
        """Undiscounted return averaged over agents."""
        return float(self.rewards.sum(axis=0).mean())


def select_joint_action(ac: ActorCritic, env: VSLEnv, rng: np.random.Generator | None,
                        greedy: bool = False, use_mask: bool = True):
    """Sample (or argmax) every agent's action, most downstream first, each
    agent seeing the action just chosen by its downstream neighbour."""
    n = env.n_agents
    obs = np.empty((n, 5))
    masks = np.empty((n, len(GRID)), dtype=bool)
    idx = np.empty(n, dtype=int)
    logp = np.empty(n)
    downstream = env.corridor.default_max
    for i in range(n):
        o = env.observation(i, downstream)
        mask = valid_mask(downstream, env.a_diff) if use_mask else np.ones(len(GRID), dtype=bool)
        lp = masked_log_softmax(ac.actor(o), mask)
        if greedy:
            a = int(np.argmax(lp))
        else:
            a = int(rng.choice(len(GRID), p=np.exp(lp)))
        obs[i], masks[i], idx[i], logp[i] = o, mask, a, lp[a]
        downstream = int(GRID[a])
    return obs, masks, idx, logp


def run_episode(ac: ActorCritic, env: VSLEnv, rng: np.random.Generator | None,
                demand_scale: float = 1.0, greedy: bool = False, use_mask: bool = True,
                with_values: bool = True) -> Rollout:
    env.reset(demand_scale)
    T, n = env.n_steps, env.n_agents
    g_dim = ac.critic.sizes[0]
    out = Rollout(np.empty((T, n, 5)), np.empty((T, n, len(GRID)), dtype=bool),
                  np.empty((T, n), dtype=int), np.empty((T, n)), np.zeros((T, n)),
                  np.empty((T, n)), np.empty((T, n, g_dim)), 0.0)
    for t in range(T):
        obs, masks, idx, logp = select_joint_action(ac, env, rng, greedy, use_mask)
        cin = np.stack([critic_input(obs, i, n) for i in range(n)])
        if with_values:
            out.values[t] = ac.critic(cin)[:, 0]
        _, rewards = env.step([int(GRID[a]) for a in idx])
        out.obs[t], out.masks[t], out.actions[t], out.logp[t] = obs, masks, idx, logp
        out.rewards[t], out.critic_in[t] = rewards, cin
    out.vht = env.sim.vht
    return out


def run_baseline(env: VSLEnv, demand_scale: float = 1.0, limit: int | None = None) -> float:
    """VHT with no control (or a fixed limit everywhere)."""
    env.reset(demand_scale)
    lim = env.corridor.default_max if limit is None else limit
    for _ in range(env.n_steps):
        env.step([lim] * env.n_agents)
    return env.sim.vht

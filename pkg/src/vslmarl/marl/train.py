"""Desk-scale MAPPO training loop with a shared actor."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from ..seeding import derive_rng
from ..sim import ScenarioSpec, training_spec
from .env import Rollout, VSLEnv, run_baseline, run_episode
from .nets import ActorCritic, Adam
from .ppo import Batch, Hyperparams, RewardWeights, compute_gae, mappo_update, normalize

log = logging.getLogger(__name__)

CURVE_FIELDS = ("iteration", "mean_reward", "eval_reward", "loss", "kl", "clip_frac", "entropy")
DEMAND_JITTER = (0.9, 1.1)


def _demand_scale(rng: np.random.Generator) -> float:
    return float(rng.uniform(*DEMAND_JITTER))


def rollouts_to_batch(rollouts: list[Rollout], hyper: Hyperparams) -> Batch:
    obs, masks, acts, logp, adv, ret, cin = [], [], [], [], [], [], []
    for ro in rollouts:
        T, n = ro.actions.shape
        dones = np.zeros(T, dtype=bool)
        dones[-1] = True
        for i in range(n):
            a, r = compute_gae(ro.rewards[:, i], ro.values[:, i], dones, hyper.gamma, hyper.lam)
            adv.append(a)
            ret.append(r)
            obs.append(ro.obs[:, i])
            masks.append(ro.masks[:, i])
            acts.append(ro.actions[:, i])
            logp.append(ro.logp[:, i])
            cin.append(ro.critic_in[:, i])
    return Batch(np.concatenate(obs), np.concatenate(masks), np.concatenate(acts),
                 np.concatenate(logp), normalize(np.concatenate(adv)), np.concatenate(ret),
                 np.concatenate(cin))


def evaluate(ac: ActorCritic, spec: ScenarioSpec | None = None, episodes: int = 10,
             seed: int = 0, greedy: bool = False, weights: RewardWeights = RewardWeights(),
             use_mask: bool = True) -> dict:
    """Seeded evaluation episodes; returns per-episode rewards and VHT."""
    env = VSLEnv(spec or training_spec(), weights)
    rewards, vht = [], []
    for ep in range(episodes):
        rng = derive_rng(seed, "eval", ep)
        ro = run_episode(ac, env, rng, _demand_scale(rng), greedy=greedy,
                         use_mask=use_mask, with_values=False)
        rewards.append(ro.episode_reward)
        vht.append(ro.vht)
    return {"rewards": np.array(rewards), "vht": np.array(vht)}


def baseline_vht(spec: ScenarioSpec | None = None, episodes: int = 10, seed: int = 0) -> np.ndarray:
    env = VSLEnv(spec or training_spec())
    out = []
    for ep in range(episodes):
        rng = derive_rng(seed, "eval", ep)
        out.append(run_baseline(env, _demand_scale(rng)))
    return np.array(out)


def write_curves(path, curves: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in curves:
            w.writerow({k: (repr(row[k]) if isinstance(row.get(k), float) else row.get(k, ""))
                        for k in CURVE_FIELDS})


def train(spec: ScenarioSpec | None = None, hyper: Hyperparams = Hyperparams(),
          weights: RewardWeights = RewardWeights(), out_dir=None,
          init: ActorCritic | None = None) -> tuple[ActorCritic, list[dict]]:
    """Train the shared policy; all agents' transitions go into one buffer.

    With ``out_dir`` set, ``checkpoint.npz`` and ``curves.csv`` are written
    there (the checkpoint also after every evaluation).
    """
    spec = spec or training_spec(hyper.seed)
    env = VSLEnv(spec, weights)
    ac = init.copy() if init is not None else ActorCritic.init(env.n_agents, hyper.hidden, hyper.seed)
    actor_opt = Adam(ac.actor.params, hyper.lr)
    critic_opt = Adam(ac.critic.params, hyper.lr)
    rollout_rng = derive_rng(hyper.seed, "rollout")
    update_rng = derive_rng(hyper.seed, "minibatch")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": hyper.seed, "scenario": spec.name}
    curves: list[dict] = []

    for it in range(hyper.iterations):
        rollouts = [run_episode(ac, env, rollout_rng, _demand_scale(rollout_rng),
                                use_mask=hyper.use_mask)
                    for _ in range(hyper.episodes_per_iter)]
        batch = rollouts_to_batch(rollouts, hyper)
        info = mappo_update(ac, batch, hyper, actor_opt, critic_opt, update_rng)
        row = {"iteration": it, "mean_reward": float(np.mean([r.episode_reward for r in rollouts])),
               "eval_reward": "", **{k: info[k] for k in ("loss", "kl", "clip_frac", "entropy")}}
        if hyper.eval_every and (it + 1) % hyper.eval_every == 0:
            ev = evaluate(ac, spec, episodes=2, seed=hyper.seed, weights=weights, greedy=True)
            row["eval_reward"] = float(ev["rewards"].mean())
            if out is not None:
                ac.save(out / "checkpoint.npz", {**meta, "iteration": it + 1})
        curves.append(row)
        log.info("iter %d reward %.3f loss %.4f kl %.4f", it, row["mean_reward"], row["loss"], row["kl"])

    if out is not None:
        ac.save(out / "checkpoint.npz", {**meta, "iteration": hyper.iterations})
        write_curves(out / "curves.csv", curves)
    return ac, curves

"""Reward terms, advantage estimation and the clipped PPO update."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nets import ActorCritic, Adam, masked_log_softmax

CONGESTION_OCC = 0.15


@dataclass(frozen=True)
class RewardWeights:
    w_a: float = 1.0
    w_s: float = 1.0
    w_m: float = 1.0

    def __post_init__(self):
        if min(self.w_a, self.w_s, self.w_m) < 0 or max(self.w_a, self.w_s, self.w_m) <= 0:
            raise ValueError("reward weights must be non-negative with at least one positive")


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 1e-3
    epochs: int = 4
    minibatch: int = 256
    episodes_per_iter: int = 4
    iterations: int = 100
    ent_coef: float = 0.003
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0
    use_mask: bool = True
    eval_every: int = 10

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.clip <= 0 or self.lr <= 0:
            raise ValueError("clip and learning rate must be positive")
        if self.epochs < 1 or self.minibatch < 1 or self.episodes_per_iter < 1:
            raise ValueError("epochs, minibatch and episodes_per_iter must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def reward_terms(action: float, downstream_action: float, speed: float, occ: float,
                 occ_crit: float = CONGESTION_OCC) -> tuple[float, float, float]:
    """(adaptability, safety, mobility), each in [-1, 1]."""
    congested = occ >= occ_crit
    r_a = -float(np.clip((action - speed) / 40.0, 0.0, 1.0)) if congested else 0.0
    r_s = -float(np.clip((action - downstream_action - 10.0) / 40.0, 0.0, 1.0))
    r_m = 0.0 if congested else action / 70.0
    return r_a, r_s, r_m


def reward(action: float, downstream_action: float, speed: float, occ: float,
           weights: RewardWeights = RewardWeights(), occ_crit: float = CONGESTION_OCC) -> float:
    r_a, r_s, r_m = reward_terms(action, downstream_action, speed, occ, occ_crit)
    return weights.w_a * r_a + weights.w_s * r_s + weights.w_m * r_m


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value: float = 0.0):
    """Generalized advantage estimation over one trajectory.

    ``dones[t]`` marks that step t ended the episode (no bootstrap past it).
    Returns (advantages, returns) without normalization.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    T = len(rewards)
    if T == 0:
        raise ValueError("empty trajectory")
    adv = np.zeros(T)
    gae = 0.0
    for t in reversed(range(T)):
        next_v = last_value if t == T - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


@dataclass
class Batch:
    obs: np.ndarray        # (B, 5)
    masks: np.ndarray      # (B, 5) bool
    actions: np.ndarray    # (B,) action indices
    logp_old: np.ndarray   # (B,)
    advantages: np.ndarray
    returns: np.ndarray
    critic_in: np.ndarray  # (B, G)

    def __len__(self):
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in
                       ("obs", "masks", "actions", "logp_old", "advantages", "returns", "critic_in")))


def ppo_loss(ac: ActorCritic, batch: Batch, clip: float = 0.2, vf_coef: float = 0.5,
             ent_coef: float = 0.01):
    """Loss, gradients (actor, critic) and diagnostics for one minibatch."""
    B = len(batch)
    logits, a_acts = ac.actor.forward(batch.obs)
    logp_all = masked_log_softmax(logits, batch.masks)
    probs = np.exp(logp_all)
    rows = np.arange(B)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.logp_old)
    A = batch.advantages
    surr1 = ratio * A
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * A
    pg_loss = -np.mean(np.minimum(surr1, surr2))
    plogp = np.where(batch.masks, probs * np.where(batch.masks, logp_all, 0.0), 0.0)
    entropy_each = -plogp.sum(axis=1)
    entropy = entropy_each.mean()

    values, c_acts = ac.critic.forward(batch.critic_in)
    values = values[:, 0]
    v_loss = 0.5 * np.mean((values - batch.returns) ** 2)
    loss = pg_loss + vf_coef * v_loss - ent_coef * entropy

    # d pg_loss / d logp: the unclipped branch carries gradient, the clipped one does not
    use_unclipped = surr1 <= surr2
    dlogp = np.where(use_unclipped, -ratio * A, 0.0) / B
    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    g_logits = dlogp[:, None] * (onehot - probs)
    # d entropy / d z_j = -p_j (log p_j + H)
    safe_logp = np.where(batch.masks, logp_all, 0.0)
    dH = -probs * (safe_logp + entropy_each[:, None])
    g_logits += -ent_coef * dH / B
    g_actor = ac.actor.backward(a_acts, g_logits)
    g_values = vf_coef * (values - batch.returns)[:, None] / B
    g_critic = ac.critic.backward(c_acts, g_values)

    approx_kl = float(np.mean(batch.logp_old - logp))
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip))
    info = {"loss": float(loss), "pg_loss": float(pg_loss), "v_loss": float(v_loss),
            "entropy": float(entropy), "kl": approx_kl, "clip_frac": clip_frac}
    return float(loss), g_actor, g_critic, info


def _clip_grads(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return grads


class NonFiniteLoss(FloatingPointError):
    pass


def mappo_update(ac: ActorCritic, batch: Batch, hyper: Hyperparams,
                 actor_opt: Adam, critic_opt: Adam, rng: np.random.Generator) -> dict:
    """Several epochs of minibatch PPO on ``batch``; updates ``ac`` in place."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    infos = []
    for _ in range(hyper.epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), hyper.minibatch):
            mb = batch.take(order[start:start + hyper.minibatch])
            loss, g_a, g_c, info = ppo_loss(ac, mb, hyper.clip, hyper.vf_coef, hyper.ent_coef)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in g_a + g_c):
                raise NonFiniteLoss(f"non-finite PPO loss: {info}")
            actor_opt.step(_clip_grads(g_a, hyper.max_grad_norm))
            critic_opt.step(_clip_grads(g_c, hyper.max_grad_norm))
            infos.append(info)
    return {k: float(np.mean([i[k] for i in infos])) for k in infos[0]}

"""Small numpy MLPs with hand-written backprop, the shared actor and the
centralized critic."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corridor import SPEED_LIMITS

N_ACTIONS = len(SPEED_LIMITS)
OBS_DIM = 5
CHECKPOINT_VERSION = 1


class MLP:
    """tanh hidden layers, linear output. ``params`` = [W0, b0, W1, b1, ...]."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, out_gain: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        self.params: list[np.ndarray] = []
        if rng is None:
            return
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            gain = out_gain if last else np.sqrt(2.0)
            q, _ = np.linalg.qr(rng.normal(size=(max(a, b), min(a, b))))
            W = q if a >= b else q.T
            self.params += [gain * W[:a, :b].copy(), np.zeros(b)]

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            h = np.tanh(z) if i < n_layers - 1 else z
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, grad_out: np.ndarray) -> list[np.ndarray]:
        n_layers = len(self.params) // 2
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = grad_out
        for i in reversed(range(n_layers)):
            h_in = acts[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[2 * i].T) * (1.0 - acts[i] ** 2)
        return grads

    def copy(self) -> "MLP":
        m = MLP(self.sizes)
        m.params = [p.copy() for p in self.params]
        return m


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities with invalid actions at -inf (so probability 0)."""
    z = np.where(mask, logits, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def policy_forward(actor: MLP, observation, mask) -> np.ndarray:
    """Probability vector over the speed limit grid with the mask applied."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty action mask: no valid speed limit")
    logits = actor(np.asarray(observation, dtype=float))
    return np.exp(masked_log_softmax(logits, mask))


def critic_input(global_obs: np.ndarray, agent_index: int, n_agents: int) -> np.ndarray:
    """Concatenated local observations plus a one-hot of the evaluated agent."""
    onehot = np.zeros(n_agents)
    onehot[agent_index] = 1.0
    return np.concatenate([np.ravel(global_obs), onehot])


@dataclass
class ActorCritic:
    actor: MLP
    critic: MLP
    n_agents: int

    @classmethod
    def init(cls, n_agents: int, hidden=(64, 64), seed: int = 0) -> "ActorCritic":
        from ..seeding import derive_rng
        rng = derive_rng(seed, "policy-init")
        actor = MLP((OBS_DIM, *hidden, N_ACTIONS), rng, out_gain=0.01)
        critic = MLP((OBS_DIM * n_agents + n_agents, *hidden, 1), rng, out_gain=1.0)
        return cls(actor, critic, n_agents)

    def logits(self, obs: np.ndarray, agent_index: int = 0) -> np.ndarray:
        return self.actor(obs)

    # pipeline policies are plain callables
    __call__ = logits

    def copy(self) -> "ActorCritic":
        return ActorCritic(self.actor.copy(), self.critic.copy(), self.n_agents)

    def save(self, path, meta: dict | None = None):
        arrays = {f"actor_{i}": p for i, p in enumerate(self.actor.params)}
        arrays.update({f"critic_{i}": p for i, p in enumerate(self.critic.params)})
        header = {
            "format_version": CHECKPOINT_VERSION,
            "actor_sizes": list(self.actor.sizes),
            "critic_sizes": list(self.critic.sizes),
            "n_agents": self.n_agents,
            "actions": list(SPEED_LIMITS),
            **(meta or {}),
        }
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "ActorCritic":
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
            actor = MLP(header["actor_sizes"])
            critic = MLP(header["critic_sizes"])
            actor.params = [data[f"actor_{i}"].astype(float) for i in range(2 * (len(actor.sizes) - 1))]
            critic.params = [data[f"critic_{i}"].astype(float) for i in range(2 * (len(critic.sizes) - 1))]
        for mlp in (actor, critic):
            for i, (a, b) in enumerate(zip(mlp.sizes[:-1], mlp.sizes[1:])):
                if mlp.params[2 * i].shape != (a, b):
                    raise ValueError("checkpoint weight shape does not match header")
        return cls(actor, critic, int(header["n_agents"]))


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 3e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

"""Shared-parameter multi-agent PPO for the VSL agents."""

from .env import Rollout, VSLEnv, run_baseline, run_episode
from .nets import MLP, ActorCritic, Adam, masked_log_softmax, policy_forward
from .ppo import (Batch, Hyperparams, RewardWeights, compute_gae, mappo_update,
                  ppo_loss, reward, reward_terms)
from .train import baseline_vht, evaluate, train

__all__ = [
    "MLP", "ActorCritic", "Adam", "Batch", "Hyperparams", "RewardWeights", "Rollout",
    "VSLEnv", "baseline_vht", "compute_gae", "evaluate", "mappo_update", "masked_log_softmax",
    "policy_forward", "ppo_loss", "reward", "reward_terms", "run_baseline", "run_episode", "train",
]

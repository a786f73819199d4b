"""Simulated environments and episode-level utilities (rollouts, masking, noise)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..data import TransitionDataset
from . import sepsis
from .chain import ChainMDP, chain_value_iteration, softmax_fixed_point
from .sepsis import SepsisSimulator, clinician_policy

Policy = Callable[[np.ndarray], np.ndarray]

__all__ = ["ChainMDP", "EpisodeConfig", "SepsisSimulator", "chain_value_iteration", "clinician_policy",
           "inject_noise", "mask_terminal_rewards", "rollout", "sepsis_step", "softmax_fixed_point",
           "uniform_policy", "epsilon_mixture"]


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 20
    terminal_reward_mask_prob: float = 0.9
    noise_std: float = 0.0
    diabetic_prob: float = 0.2

    def __post_init__(self):
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        for name in ("terminal_reward_mask_prob", "diabetic_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def sepsis_step(env: SepsisSimulator, state: int, action: int, rng: np.random.Generator):
    """Single-state step: ``(next_state, reward_vec[5], terminal_kind)``."""
    nxt, r, kind = env.step(np.array([state]), np.array([action]), rng)
    return int(nxt[0]), r[0], int(kind[0])


def uniform_policy(n_actions: int, rng: np.random.Generator) -> Policy:
    return lambda feats: rng.integers(n_actions, size=len(feats))


def epsilon_mixture(base: Policy, epsilon: float, n_actions: int, rng: np.random.Generator) -> Policy:
    """Follow ``base`` except with probability ``epsilon`` act uniformly at random."""
    def act(feats):
        a = np.asarray(base(feats), dtype=np.int64)
        explore = rng.random(a.size) < epsilon
        return np.where(explore, rng.integers(n_actions, size=a.size), a)
    return act


def rollout(policy: Policy, env: SepsisSimulator, config: EpisodeConfig, rng: np.random.Generator,
            n_episodes: int = 1, first_id: int = 0) -> TransitionDataset:
    """Run ``n_episodes`` episodes in lockstep and return them as one dataset.

    Rewards are raw (unmasked, noise-free); the last transition of an episode
    is terminal iff it ended in discharge or death. Outcomes per trajectory
    (``sepsis.DISCHARGE``/``DEATH``/``TIMEOUT``) go to ``meta["outcomes"]``.
    """
    ids = env.reset(n_episodes, rng) if n_episodes else np.zeros(0, dtype=np.int64)
    alive = np.arange(n_episodes)
    outcomes = np.full(n_episodes, sepsis.TIMEOUT)
    cols: dict[str, list] = {k: [] for k in ("ep", "t", "s", "a", "s2", "r", "term")}
    for t in range(config.max_steps):
        if not alive.size:
            break
        cur = ids[alive]
        actions = np.asarray(policy(env.features(cur)), dtype=np.int64)
        nxt, r, kind = env.step(cur, actions, rng)
        done = kind != sepsis.NONE
        for k, v in (("ep", alive), ("t", np.full(alive.size, t)), ("s", cur), ("a", actions),
                     ("s2", nxt), ("r", r), ("term", done)):
            cols[k].append(v)
        outcomes[alive[done]] = kind[done]
        ids[alive] = nxt
        alive = alive[~done]
    meta = {"outcomes": outcomes.tolist(), "first_id": first_id}
    if not cols["ep"]:
        return TransitionDataset.empty(env.state_dim, env.n_actions, env.n_channels, meta, with_ids=True)
    ep = np.concatenate(cols["ep"])
    t = np.concatenate(cols["t"])
    order = np.lexsort((t, ep))
    s = np.concatenate(cols["s"])[order]
    s2 = np.concatenate(cols["s2"])[order]
    return TransitionDataset(ep[order] + first_id, t[order], env.features(s),
                             np.concatenate(cols["a"])[order], env.features(s2),
                             np.concatenate(cols["r"])[order], np.concatenate(cols["term"])[order],
                             env.n_actions, s, s2, meta)


def mask_terminal_rewards(dataset: TransitionDataset, mask_prob: float,
                          rng: np.random.Generator) -> TransitionDataset:
    """Zero the channel-0 terminal reward of each trajectory with probability ``mask_prob``."""
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError("mask_prob must lie in [0, 1]")
    slices = dataset.trajectory_slices()
    masked = rng.random(len(slices)) < mask_prob
    rewards = dataset.rewards.copy()
    for sl, m in zip(slices, masked):
        if m:
            rows = np.arange(sl.start, sl.stop)[dataset.terminals[sl]]
            rewards[rows, 0] = 0.0
    meta = dict(dataset.meta, mask_prob=mask_prob,
                masked_trajectories=int(masked.sum()), trajectories=len(slices))
    return dataset.replace(rewards=rewards, meta=meta)


def inject_noise(dataset: TransitionDataset, noise_std: float, rng: np.random.Generator) -> TransitionDataset:
    """Add iid Gaussian noise to reward channels 1..d-1."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if noise_std == 0 or dataset.channel_count < 2:
        return dataset.replace(meta=dict(dataset.meta, noise_std=noise_std))
    rewards = dataset.rewards.copy()
    rewards[:, 1:] += rng.normal(0.0, noise_std, size=rewards[:, 1:].shape)
    return dataset.replace(rewards=rewards, meta=dict(dataset.meta, noise_std=noise_std))

"""Small deterministic MDPs with vector rewards, solved exactly for oracle checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import TransitionDataset
from ..policies import softmax_probs


class ConvergenceError(RuntimeError):
    pass


@dataclass
class ChainMDP:
    """``next_state[s, a]`` deterministic; ``rewards[s, a, i]`` per channel.

    ``terminal[s, a]`` marks transitions that end the episode (no bootstrap).
    """

    next_state: np.ndarray
    rewards: np.ndarray
    gamma: float
    terminal: np.ndarray | None = None

    def __post_init__(self):
        self.next_state = np.asarray(self.next_state, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.ndim == 2:
            self.rewards = self.rewards[..., None]
        if self.terminal is None:
            self.terminal = np.zeros(self.next_state.shape, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        if self.rewards.shape[:2] != self.next_state.shape or self.terminal.shape != self.next_state.shape:
            raise ValueError("next_state, rewards and terminal tables disagree in shape")
        if self.n_states * self.n_actions >= 10_000:
            raise ValueError("chain MDP too large for exact value iteration")

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    @property
    def n_channels(self) -> int:
        return self.rewards.shape[2]

    def features(self, states) -> np.ndarray:
        return np.eye(self.n_states)[np.asarray(states, dtype=np.int64)]

    def scalar_reward(self, w) -> np.ndarray:
        return self.rewards @ np.asarray(w, dtype=np.float64)

    def all_transitions(self, repeat: int = 1) -> TransitionDataset:
        """Every (s, a) pair once per repeat, each as its own one-step trajectory."""
        s, a = np.meshgrid(np.arange(self.n_states), np.arange(self.n_actions), indexing="ij")
        s, a = np.tile(s.ravel(), repeat), np.tile(a.ravel(), repeat)
        s2 = self.next_state[s, a]
        n = s.size
        return TransitionDataset(np.arange(n), np.zeros(n), self.features(s), a, self.features(s2),
                                 self.rewards[s, a], self.terminal[s, a], self.n_actions, s, s2)


def chain_value_iteration(mdp: ChainMDP, w=None, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal Q-table for the scalar reward ``w^T r`` (channel 0 if ``w`` is None)."""
    if mdp.gamma >= 1.0 and not mdp.terminal.any():
        raise ConvergenceError("gamma >= 1 without terminal transitions does not converge")
    w = np.eye(mdp.n_channels)[0] if w is None else np.asarray(w, dtype=np.float64)
    r = mdp.scalar_reward(w)
    cont = mdp.gamma * ~mdp.terminal
    q = np.zeros_like(r)
    for _ in range(max_iter):
        q_new = r + cont * q.max(axis=1)[mdp.next_state]
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise ConvergenceError(f"value iteration did not reach {tol} in {max_iter} sweeps")


def softmax_fixed_point(mdp: ChainMDP, beta: float, w=None, tol: float = 1e-10,
                        max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point of ``Q(s,a) = r + gamma * sum_a' pi^beta(a'|s'; Q) Q(s',a')``."""
    w = np.eye(mdp.n_channels)[0] if w is None else np.asarray(w, dtype=np.float64)
    r = mdp.scalar_reward(w)
    cont = mdp.gamma * ~mdp.terminal
    q = np.zeros_like(r)
    for _ in range(max_iter):
        v = (softmax_probs(q, beta) * q).sum(axis=1)
        q_new = r + cont * v[mdp.next_state]
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise ConvergenceError(f"softmax iteration did not reach {tol} in {max_iter} sweeps")

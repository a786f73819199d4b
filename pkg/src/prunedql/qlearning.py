"""Scalar Q-learning baselines: replay, (double) DQN targets, CQL penalty, discrete BCQ."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Transition, TransitionDataset
from .nn import Adam, DenseNetwork, NumericalError, ShapeError, clip_by_global_norm, copy_parameters

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    gamma: float = 1.0
    batch_size: int = 256
    learning_rate: float = 1e-4
    target_update_period: int = 10_000
    total_updates: int = 500_000
    cql_alpha: float = 0.0
    beta: float = 1.0
    seed: int = 0
    grad_clip: float | None = 10.0
    double: bool = True
    hidden: tuple[int, ...] = (64, 64)
    # scalarisation of the reward vector; None means channel 0 only
    reward_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.target_update_period < 1:
            raise ValueError("target_update_period must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.cql_alpha < 0:
            raise ValueError("cql_alpha must be >= 0")
        self.hidden = tuple(self.hidden)
        if self.reward_weights is not None:
            self.reward_weights = tuple(float(w) for w in self.reward_weights)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return self.actions.size

    @classmethod
    def from_dataset(cls, ds: TransitionDataset, index: np.ndarray | None = None) -> "Batch":
        index = np.arange(len(ds)) if index is None else np.asarray(index)
        return cls(ds.states[index], ds.actions[index], ds.next_states[index], ds.rewards[index],
                   ds.terminals[index], index)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(np.array([t.state for t in transitions], dtype=np.float64),
                   np.array([t.action for t in transitions], dtype=np.int64),
                   np.array([t.next_state for t in transitions], dtype=np.float64),
                   np.array([t.reward_vec for t in transitions], dtype=np.float64).reshape(len(transitions), -1),
                   np.array([t.terminal for t in transitions], dtype=bool),
                   np.arange(len(transitions)))


class ReplayBuffer:
    """FIFO store of transitions; batches are uniform with replacement."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self._data: TransitionDataset | None = None

    @classmethod
    def from_dataset(cls, dataset: TransitionDataset, rng: np.random.Generator,
                     capacity: int | None = None) -> "ReplayBuffer":
        buf = cls(capacity or max(len(dataset), 1), rng)
        buf.add(dataset)
        return buf

    def add(self, dataset: TransitionDataset) -> None:
        from .data import concat
        merged = dataset if self._data is None else concat([self._data, dataset])
        if len(merged) > self.capacity:
            merged = merged.select(np.arange(len(merged) - self.capacity, len(merged)))
        self._data = merged

    def __len__(self) -> int:
        return 0 if self._data is None else len(self._data)

    @property
    def dataset(self) -> TransitionDataset:
        if self._data is None:
            raise ValueError("replay buffer is empty")
        return self._data

    def sample_index(self, batch_size: int) -> np.ndarray:
        if not len(self):
            raise ValueError("cannot sample from an empty replay buffer")
        return self.rng.integers(len(self), size=batch_size)

    def sample(self, batch_size: int) -> Batch:
        return Batch.from_dataset(self.dataset, self.sample_index(batch_size))


def scalar_rewards(rewards: np.ndarray, weights: Sequence[float] | None) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim == 1:
        return rewards
    if weights is None:
        return rewards[:, 0]
    w = np.asarray(weights, dtype=np.float64)
    if w.size != rewards.shape[1]:
        raise ShapeError(f"{w.size} reward weights for {rewards.shape[1]} channels")
    return rewards @ w


def masked_argmax(q: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Row-wise argmax restricted to ``mask``; ties go to the lowest index."""
    if mask is None:
        return q.argmax(axis=1)
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one permitted action")
    return np.where(mask, q, -np.inf).argmax(axis=1)


def double_q_targets(rewards: np.ndarray, next_states: np.ndarray, terminals: np.ndarray,
                     q_net: DenseNetwork, target_net: DenseNetwork, gamma: float,
                     next_mask: np.ndarray | None = None, double: bool = True) -> np.ndarray:
    """``r + gamma * Q'(s', argmax_{a' in mask} Q(s', a'))``; terminal rows get ``r``."""
    if q_net.output_dim != target_net.output_dim:
        raise ShapeError("online and target networks disagree on |A|")
    q_next_target = target_net.forward(next_states)
    rows = np.arange(len(rewards))
    if double:
        best = masked_argmax(q_net.forward(next_states), next_mask)
        boot = q_next_target[rows, best]
    else:
        boot = q_next_target[rows, masked_argmax(q_next_target, next_mask)]
    return rewards + gamma * np.where(terminals, 0.0, boot)


def dqn_target(transition: Transition, q_net: DenseNetwork, target_net: DenseNetwork, gamma: float,
               channel: int = 0) -> float:
    r = np.atleast_1d(transition.reward_vec)[channel]
    y = double_q_targets(np.array([r]), np.asarray(transition.next_state, dtype=np.float64)[None],
                         np.array([transition.terminal]), q_net, target_net, gamma)
    return float(y[0])


def logsumexp(q: np.ndarray, axis: int = -1) -> np.ndarray:
    m = q.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(q - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def cql_penalty(q_values_for_state: np.ndarray, taken_action: int) -> float:
    """``logsumexp(q) - q[a]``."""
    q = np.asarray(q_values_for_state, dtype=np.float64)
    gap = np.delete(q, taken_action) - q[taken_action]
    if gap.size and gap.max() <= 0:
        # log1p keeps the penalty positive when the taken action dominates
        return float(np.log1p(np.exp(gap).sum()))
    return float(logsumexp(q) - q[taken_action])


def _cql_terms(q: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row penalty and its gradient w.r.t. the row of Q-values."""
    rows = np.arange(len(actions))
    lse = logsumexp(q)
    grad = np.exp(q - lse[:, None])
    grad[rows, actions] -= 1.0
    return lse - q[rows, actions], grad


def q_learning_update(batch: Batch, q_net: DenseNetwork, target_net: DenseNetwork, optimizer,
                      config: TrainerConfig, next_mask: np.ndarray | None = None,
                      cql_alpha: float | None = None, targets: np.ndarray | None = None) -> float:
    """One optimiser step on the mean squared TD error (plus ``alpha`` * CQL penalty).

    Returns the loss evaluated before the step.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    alpha = config.cql_alpha if cql_alpha is None else cql_alpha
    if targets is None:
        r = scalar_rewards(batch.rewards, config.reward_weights)
        targets = double_q_targets(r, batch.next_states, batch.terminals, q_net, target_net,
                                   config.gamma, next_mask, config.double)
    q, cache = q_net.forward_cached(batch.states)
    rows = np.arange(n)
    td = q[rows, batch.actions] - targets
    loss = float(np.mean(td * td))
    grad = np.zeros_like(q)
    grad[rows, batch.actions] = 2.0 * td / n
    if alpha > 0:
        pen, pen_grad = _cql_terms(q, batch.actions)
        loss += alpha * float(pen.mean())
        grad += alpha * pen_grad / n
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss (Q range [{np.nanmin(q):.3g}, {np.nanmax(q):.3g}], "
                             f"batch rows {batch.index[:8].tolist()}...)")
    grads = clip_by_global_norm(q_net.backward_cached(cache, grad), config.grad_clip)
    optimizer.step(q_net.params(), grads)
    return loss


def bcq_mask(behavior_probs: np.ndarray, threshold: float) -> np.ndarray:
    """Actions whose probability relative to the most likely one exceeds ``threshold``."""
    p = np.asarray(behavior_probs, dtype=np.float64)
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    top = p.max(axis=-1, keepdims=True)
    if np.any(top <= 0):
        raise ValueError("behaviour probabilities are all zero")
    ratio = p / top
    return (ratio > threshold) | (ratio >= 1.0)


def bcq_update(batch: Batch, q_net: DenseNetwork, target_net: DenseNetwork, behavior_model,
               optimizer, config: TrainerConfig, threshold: float) -> float:
    mask = bcq_mask(behavior_model.predict_probs(batch.next_states), threshold)
    return q_learning_update(batch, q_net, target_net, optimizer, config, next_mask=mask)


def greedy_actions(q_net: DenseNetwork, states: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    return masked_argmax(q_net.forward(states), mask)


# -- training loop ----------------------------------------------------------

@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def write_csv(self, path: str | Path) -> None:
        cols = ["update_index", "loss", "mean_q", "eval_return"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for row in self.rows:
                w.writerow({c: ("" if row.get(c) is None else repr(row.get(c))) for c in cols})

    def best_return_curve(self) -> list[tuple[int, float]]:
        """Running maximum of the evaluation returns."""
        best, out = -np.inf, []
        for row in self.rows:
            if row.get("eval_return") is not None:
                best = max(best, row["eval_return"])
                out.append((row["update_index"], best))
        return out


class QTrainer:
    """Owns an online/target pair and runs double-Q updates from a replay buffer.

    ``next_mask`` (rows aligned with the buffer's dataset) restricts the
    bootstrap argmax; ``policy_mask`` maps states to the actions the greedy
    policy may take.
    """

    def __init__(self, state_dim: int, n_actions: int, config: TrainerConfig,
                 rng: np.random.Generator | None = None, q_net: DenseNetwork | None = None):
        self.config = config
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.q_net = q_net or DenseNetwork.create(state_dim, n_actions, config.hidden, self.rng)
        self.target_net = self.q_net.clone()
        self.optimizer = Adam(config.learning_rate)
        self.updates = 0
        self.log = TrainingLog()

    @property
    def n_actions(self) -> int:
        return self.q_net.output_dim

    def sync_target(self) -> None:
        copy_parameters(self.q_net, self.target_net)

    def update(self, batch: Batch, next_mask: np.ndarray | None = None) -> float:
        loss = q_learning_update(batch, self.q_net, self.target_net, self.optimizer, self.config,
                                 next_mask=next_mask)
        self._after_update()
        return loss

    def _after_update(self) -> None:
        self.updates += 1
        if self.updates % self.config.target_update_period == 0:
            self.sync_target()

    def next_mask_for(self, batch: Batch) -> np.ndarray | None:
        return None

    def policy_mask(self, states: np.ndarray) -> np.ndarray | None:
        return None

    def act(self, states: np.ndarray) -> np.ndarray:
        return greedy_actions(self.q_net, states, self.policy_mask(states))

    def train(self, buffer: ReplayBuffer, n_updates: int | None = None,
              evaluate: Callable[["QTrainer"], float] | None = None, eval_every: int = 10_000,
              log_every: int = 1000) -> TrainingLog:
        n_updates = self.config.total_updates if n_updates is None else n_updates
        losses = []
        for _ in range(n_updates):
            batch = buffer.sample(self.config.batch_size)
            losses.append(self.update(batch, self.next_mask_for(batch)))
            k = self.updates
            if k % log_every == 0 or (evaluate is not None and k % eval_every == 0):
                row = {"update_index": k, "loss": float(np.mean(losses[-log_every:])),
                       "mean_q": float(self.q_net.forward(batch.states).mean())}
                if evaluate is not None and k % eval_every == 0:
                    row["eval_return"] = float(evaluate(self))
                    log.debug("update %d eval %.3f", k, row["eval_return"])
                self.log.append(**row)
        return self.log


class BCQTrainer(QTrainer):
    def __init__(self, state_dim: int, n_actions: int, config: TrainerConfig, behavior_model,
                 threshold: float, rng: np.random.Generator | None = None):
        super().__init__(state_dim, n_actions, config, rng)
        self.behavior_model = behavior_model
        self.threshold = threshold

    def next_mask_for(self, batch: Batch) -> np.ndarray:
        return bcq_mask(self.behavior_model.predict_probs(batch.next_states), self.threshold)

    def policy_mask(self, states: np.ndarray) -> np.ndarray:
        return bcq_mask(self.behavior_model.predict_probs(states), self.threshold)

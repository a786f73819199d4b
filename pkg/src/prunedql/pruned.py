"""Sparse-reward double Q-learning restricted to pruned action sets."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .data import Transition
from .multiobjective import PruneTable, state_keys
from .nn import DenseNetwork
from .qlearning import Batch, QTrainer, ReplayBuffer, TrainerConfig, double_q_targets, q_learning_update

KeyFn = Callable[[np.ndarray], Sequence[str]]


class PrunedTrainer(QTrainer):
    """Double Q-learning on reward channel 0 with the bootstrap argmax limited to the prune table.

    ``key_fn`` maps state vectors to prune-table keys; states missing from the
    table fall back to the full action set (counted by the table).
    """

    def __init__(self, state_dim: int, n_actions: int, prune_table: PruneTable, config: TrainerConfig,
                 rng: np.random.Generator | None = None, key_fn: KeyFn | None = None,
                 q_net: DenseNetwork | None = None):
        if prune_table.n_actions != n_actions:
            raise ValueError(f"prune table has {prune_table.n_actions} actions, network {n_actions}")
        if config.reward_weights is not None:
            raise ValueError("phase 2 learns from the main reward only; leave reward_weights unset")
        super().__init__(state_dim, n_actions, config, rng, q_net)
        self.prune_table = prune_table
        self.key_fn = key_fn or state_keys
        self._row_masks: np.ndarray | None = None

    @property
    def fallback_count(self) -> int:
        return self.prune_table.fallbacks

    def attach(self, buffer: ReplayBuffer, next_keys: Sequence[str] | None = None) -> None:
        """Precompute next-state masks for every buffered transition."""
        ds = buffer.dataset
        if next_keys is None:
            next_keys = (state_keys(ds.next_states, ds.next_state_ids)
                         if ds.next_state_ids is not None else self.key_fn(ds.next_states))
        self._row_masks = self.prune_table.mask(next_keys)

    def next_mask_for(self, batch: Batch) -> np.ndarray:
        if self._row_masks is not None:
            return self._row_masks[batch.index]
        return self.prune_table.mask(self.key_fn(batch.next_states))

    def policy_mask(self, states: np.ndarray) -> np.ndarray:
        return self.prune_table.mask(self.key_fn(states))

    def train(self, buffer: ReplayBuffer, *args, **kwargs):
        if self._row_masks is None or len(self._row_masks) != len(buffer):
            self.attach(buffer)
        return super().train(buffer, *args, **kwargs)


def pruned_target(transition: Transition, trainer: PrunedTrainer) -> float:
    mask = trainer.prune_table.mask(trainer.key_fn(np.asarray(transition.next_state)[None]))
    y = double_q_targets(np.array([np.atleast_1d(transition.reward_vec)[0]]),
                         np.asarray(transition.next_state, dtype=np.float64)[None],
                         np.array([transition.terminal]), trainer.q_net, trainer.target_net,
                         trainer.config.gamma, mask, trainer.config.double)
    return float(y[0])


def pruned_update(batch: Batch, trainer: PrunedTrainer, optimizer=None) -> float:
    return pruned_cql_update(batch, trainer, optimizer, alpha=trainer.config.cql_alpha)


def pruned_cql_update(batch: Batch, trainer: PrunedTrainer, optimizer=None, alpha: float = 0.0) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    loss = q_learning_update(batch, trainer.q_net, trainer.target_net, optimizer or trainer.optimizer,
                             trainer.config, next_mask=trainer.next_mask_for(batch), cql_alpha=alpha)
    trainer._after_update()
    return loss


def greedy_action(q_net: DenseNetwork, state: np.ndarray, prune_table: PruneTable | None = None,
                  key: str | None = None) -> int:
    """Argmax over the permitted actions at ``state``; ties go to the lowest index."""
    q = q_net.forward(np.asarray(state, dtype=np.float64).reshape(1, -1))[0]
    if prune_table is None:
        return int(q.argmax())
    allowed = prune_table.permitted(key if key is not None else state_keys(np.atleast_2d(state))[0])
    allowed = np.array(sorted(allowed))
    return int(allowed[np.argmax(q[allowed])])

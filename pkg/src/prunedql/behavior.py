"""Behaviour-policy estimation by multinomial logistic regression, and synthetic data generation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TransitionDataset
from .envs import EpisodeConfig, epsilon_mixture, inject_noise, mask_terminal_rewards, rollout, uniform_policy
from .envs.sepsis import SepsisSimulator, clinician_policy, ids_from_features
from .nn import DenseNetwork, load_checkpoint, save_checkpoint
from .policies import softmax_probs

CHECKPOINT_TAG = "behavior-softmax-regression"


@dataclass
class BehaviorModel:
    """Linear softmax policy ``pi_b(a|s) = softmax(W^T s + b)``."""

    net: DenseNetwork
    info: dict = field(default_factory=dict)

    @property
    def n_actions(self) -> int:
        return self.net.output_dim

    def predict_probs(self, states: np.ndarray) -> np.ndarray:
        return softmax_probs(self.net.forward(states), 1.0)

    def predict(self, states: np.ndarray) -> np.ndarray:
        return self.net.forward(states).argmax(axis=1)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.net, path, tag=CHECKPOINT_TAG)

    @classmethod
    def load(cls, path: str | Path) -> "BehaviorModel":
        net, _ = load_checkpoint(path, expect_tag=CHECKPOINT_TAG)
        return cls(net)


def _cross_entropy(net: DenseNetwork, states: np.ndarray, actions: np.ndarray, l2: float):
    logits = net.forward(states)
    m = logits.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    rows = np.arange(actions.size)
    loss = float(np.mean(logz - logits[rows, actions]))
    if l2:
        loss += 0.5 * l2 * float(np.sum(net.weights[0] ** 2))
    acc = float(np.mean(logits.argmax(axis=1) == actions))
    return loss, acc, logits, logz


def fit_behavior(train: TransitionDataset, validation: TransitionDataset | None = None,
                 learning_rate: float = 0.1, epochs: int = 500, patience: int = 20,
                 l2: float = 0.0) -> BehaviorModel:
    """Full-batch gradient descent on the mean cross-entropy.

    With a validation set, stops once its loss has risen for ``patience``
    consecutive epochs and keeps the parameters with the lowest validation loss.
    """
    if not len(train):
        raise ValueError("cannot fit a behaviour model on an empty dataset")
    net = DenseNetwork.create(train.state_dim, train.action_count, hidden=(), zero=True)
    x, a = train.states, train.actions
    n = a.size
    rows = np.arange(n)
    history = []
    best_val, best_params, rises, prev_val = np.inf, None, 0, np.inf
    for epoch in range(epochs):
        loss, acc, logits, logz = _cross_entropy(net, x, a, l2)
        grad = np.exp(logits - logz[:, None])
        grad[rows, a] -= 1.0
        grads = net.backward(x, grad / n)
        if l2:
            grads[0] = grads[0] + l2 * net.weights[0]
        for p, g in zip(net.params(), grads):
            p -= learning_rate * g
        entry = {"epoch": epoch, "train_loss": loss, "train_accuracy": acc}
        if validation is not None and len(validation):
            val_loss, val_acc, _, _ = _cross_entropy(net, validation.states, validation.actions, 0.0)
            entry.update(validation_loss=val_loss, validation_accuracy=val_acc)
            if val_loss < best_val:
                best_val, best_params = val_loss, [p.copy() for p in net.params()]
            rises = rises + 1 if val_loss > prev_val else 0
            prev_val = val_loss
        history.append(entry)
        if rises >= patience:
            break
    if best_params is not None:
        for p, best in zip(net.params(), best_params):
            np.copyto(p, best)
    final_loss, final_acc, _, _ = _cross_entropy(net, x, a, l2)
    info = {"epochs_run": len(history), "train_loss": final_loss, "train_accuracy": final_acc,
            "history": history}
    if validation is not None and len(validation):
        val_loss, val_acc, _, _ = _cross_entropy(net, validation.states, validation.actions, 0.0)
        info.update(validation_loss=val_loss, validation_accuracy=val_acc)
    return BehaviorModel(net, info)


def behavior_policy_from_spec(spec: dict, env: SepsisSimulator, rng: np.random.Generator):
    """Build a behaviour policy from ``{"kind": "uniform" | "clinician" | "optimal", "epsilon": e}``.

    ``optimal`` follows the simulator's exact optimal action table; with
    ``epsilon`` > 0 it is a mediocre but sensible stand-in for clinicians.
    """
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return uniform_policy(env.n_actions, rng)
    if kind == "clinician":
        return epsilon_mixture(clinician_policy, float(spec.get("epsilon", 0.0)), env.n_actions, rng)
    if kind == "optimal":
        table = env.optimal_policy()

        def optimal(feats: np.ndarray) -> np.ndarray:
            return table[ids_from_features(feats)]
        return epsilon_mixture(optimal, float(spec.get("epsilon", 0.0)), env.n_actions, rng)
    raise ValueError(f"unknown behaviour policy kind {kind!r}")


def generate_offline_dataset(env: SepsisSimulator, behavior_policy_spec: dict, n_trajectories: int,
                             episode_config: EpisodeConfig, rng: np.random.Generator) -> TransitionDataset:
    """Roll out the behaviour policy, then mask terminal rewards and add reward noise."""
    policy = behavior_policy_from_spec(behavior_policy_spec, env, rng)
    raw = rollout(policy, env, episode_config, rng, n_episodes=n_trajectories)
    ds = mask_terminal_rewards(raw, episode_config.terminal_reward_mask_prob, rng)
    ds = inject_noise(ds, episode_config.noise_std, rng)
    ds.meta.update(behavior_policy=dict(behavior_policy_spec), n_trajectories=n_trajectories,
                   max_steps=episode_config.max_steps, diabetic_prob=episode_config.diabetic_prob)
    return ds

"""Vector-valued Q-learning over several reward channels and softmax-based action pruning."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import Adam, DenseNetwork, NumericalError, ShapeError, clip_by_global_norm, copy_parameters
from .policies import PosteriorDiagnostics, WeightPrior, posterior_sample_weights, softmax_probs
from .qlearning import Batch, TrainerConfig, logsumexp


class VectorQNetwork:
    """A dense network whose ``|A| * d`` outputs are read as an ``|A| x d`` matrix per state."""

    def __init__(self, net: DenseNetwork, n_actions: int, n_channels: int):
        if net.output_dim != n_actions * n_channels:
            raise ShapeError(f"output dim {net.output_dim} != {n_actions} actions x {n_channels} channels")
        self.net = net
        self.n_actions = n_actions
        self.n_channels = n_channels

    @classmethod
    def create(cls, state_dim: int, n_actions: int, n_channels: int, hidden: Sequence[int] = (64, 64),
               rng: np.random.Generator | None = None, zero: bool = False) -> "VectorQNetwork":
        return cls(DenseNetwork.create(state_dim, n_actions * n_channels, hidden, rng, zero=zero),
                   n_actions, n_channels)

    def q_matrix(self, states: np.ndarray) -> np.ndarray:
        return self.net.forward(states).reshape(-1, self.n_actions, self.n_channels)

    __call__ = q_matrix

    def clone(self) -> "VectorQNetwork":
        return VectorQNetwork(self.net.clone(), self.n_actions, self.n_channels)


# -- phase-1 targets and updates --------------------------------------------

def mql_targets(batch: Batch, vq_net: VectorQNetwork, vq_target: VectorQNetwork, prior: WeightPrior,
                beta: float, gamma: float, particle_count: int, rng: np.random.Generator,
                diagnostics: PosteriorDiagnostics | None = None,
                q_states: np.ndarray | None = None) -> np.ndarray:
    """Per-channel targets ``r + gamma * sum_a' pi^beta(a'|s'; w_hat^T Q) Q'(s', a')``.

    ``w_hat`` is drawn per transition from the posterior at ``(s, a)`` using
    the online network; terminal rows get ``r``.
    """
    if vq_net.n_actions != vq_target.n_actions or vq_net.n_channels != vq_target.n_channels:
        raise ShapeError("online and target vector networks disagree on shape")
    if q_states is None:
        q_states = vq_net.q_matrix(batch.states)
    w_hat = posterior_sample_weights(prior, q_states, batch.actions, beta, particle_count, rng, diagnostics)
    q_next = vq_net.q_matrix(batch.next_states)
    pi = softmax_probs(np.einsum("bd,bad->ba", w_hat, q_next), beta)
    boot = np.einsum("ba,bad->bd", pi, vq_target.q_matrix(batch.next_states))
    boot[batch.terminals] = 0.0
    return batch.rewards + gamma * boot


def mql_target(transition, vq_net: VectorQNetwork, vq_target: VectorQNetwork, prior: WeightPrior,
               beta: float, gamma: float, rng: np.random.Generator, particle_count: int = 32) -> np.ndarray:
    batch = Batch.from_transitions([transition])
    return mql_targets(batch, vq_net, vq_target, prior, beta, gamma, particle_count, rng)[0]


def mcql_update(batch: Batch, vq_net: VectorQNetwork, vq_target: VectorQNetwork, prior: WeightPrior,
                optimizer, config: TrainerConfig, rng: np.random.Generator, particle_count: int = 32,
                alpha: float | None = None, diagnostics: PosteriorDiagnostics | None = None) -> float:
    """One step on the channel-summed squared error plus ``alpha/d`` times the per-channel CQL penalty."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    alpha = config.cql_alpha if alpha is None else alpha
    if alpha < 0:
        raise ValueError("cql alpha must be >= 0")
    out, cache = vq_net.net.forward_cached(batch.states)
    q = out.reshape(n, vq_net.n_actions, vq_net.n_channels)
    y = mql_targets(batch, vq_net, vq_target, prior, config.beta, config.gamma, particle_count, rng,
                    diagnostics, q_states=q)
    rows = np.arange(n)
    err = q[rows, batch.actions] - y                              # (B, d)
    loss = float(np.mean(np.sum(err * err, axis=1)))
    grad = np.zeros_like(q)
    grad[rows, batch.actions] = 2.0 * err / n
    if alpha > 0:
        d = vq_net.n_channels
        lse = logsumexp(q, axis=1)                                # (B, d)
        loss += alpha / d * float(np.mean(np.sum(lse - q[rows, batch.actions], axis=1)))
        g = np.exp(q - lse[:, None, :])
        g[rows, batch.actions] -= 1.0
        grad += alpha / d * g / n
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite vector loss (Q range [{np.nanmin(q):.3g}, {np.nanmax(q):.3g}], "
                             f"batch rows {batch.index[:8].tolist()}...)")
    grads = vq_net.net.backward_cached(cache, grad.reshape(n, -1))
    optimizer.step(vq_net.net.params(), clip_by_global_norm(grads, config.grad_clip))
    return loss


def mql_update(batch: Batch, vq_net: VectorQNetwork, vq_target: VectorQNetwork, prior: WeightPrior,
               optimizer, config: TrainerConfig, rng: np.random.Generator, particle_count: int = 32,
               diagnostics: PosteriorDiagnostics | None = None) -> float:
    return mcql_update(batch, vq_net, vq_target, prior, optimizer, config, rng, particle_count,
                       alpha=0.0, diagnostics=diagnostics)


# -- state keys and prune tables --------------------------------------------

def state_key(state: np.ndarray | int) -> str:
    """Integer ids map to their decimal string; vectors to a hash of their 6-decimal rounding."""
    if isinstance(state, (int, np.integer)):
        return str(int(state))
    v = np.round(np.asarray(state, dtype=np.float64), 6) + 0.0
    return "v" + hashlib.sha1(v.tobytes()).hexdigest()[:16]


def state_keys(states: np.ndarray, ids: np.ndarray | None = None) -> list[str]:
    if ids is not None:
        return [str(int(i)) for i in ids]
    return [state_key(s) for s in np.asarray(states, dtype=np.float64)]


@dataclass
class PruneTable:
    sets: dict[str, tuple[int, ...]]
    n_actions: int
    beta: float
    m: int
    checkpoint: str = ""
    fallbacks: int = 0
    lookups: int = 0

    def __post_init__(self):
        for key, acts in self.sets.items():
            if not acts:
                raise ValueError(f"empty permitted set for state {key}")
            if min(acts) < 0 or max(acts) >= self.n_actions:
                raise ValueError(f"action out of range in permitted set for state {key}")

    def __len__(self) -> int:
        return len(self.sets)

    def __contains__(self, key: str) -> bool:
        return key in self.sets

    def permitted(self, key: str) -> tuple[int, ...]:
        """Permitted actions; unseen states fall back to the full action set."""
        self.lookups += 1
        acts = self.sets.get(key)
        if acts is None:
            self.fallbacks += 1
            return tuple(range(self.n_actions))
        return acts

    def mask(self, keys: Iterable[str]) -> np.ndarray:
        keys = list(keys)
        out = np.zeros((len(keys), self.n_actions), dtype=bool)
        for i, k in enumerate(keys):
            out[i, list(self.permitted(k))] = True
        return out

    def mean_size(self) -> float:
        return float(np.mean([len(a) for a in self.sets.values()])) if self.sets else 0.0

    @classmethod
    def full(cls, keys: Iterable[str], n_actions: int) -> "PruneTable":
        return cls({k: tuple(range(n_actions)) for k in keys}, n_actions, beta=0.0, m=0, checkpoint="full")

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for key, acts in self.sets.items():
                fh.write(json.dumps({"state_key": key, "actions": list(acts), "beta": self.beta,
                                     "m": self.m, "checkpoint": self.checkpoint,
                                     "n_actions": self.n_actions}) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path, n_actions: int | None = None) -> "PruneTable":
        sets, beta, m, ckpt = {}, 0.0, 0, ""
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    sets[str(rec["state_key"])] = tuple(int(a) for a in rec["actions"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad prune-table record ({exc})") from None
                beta, m, ckpt = float(rec.get("beta", 0.0)), int(rec.get("m", 0)), str(rec.get("checkpoint", ""))
                n_actions = n_actions or rec.get("n_actions")
        if n_actions is None:
            raise ValueError(f"{path}: action count unknown")
        return cls(sets, int(n_actions), beta, m, ckpt)


def _prune_rows(q: np.ndarray, prior: WeightPrior, beta: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean (n, |A|) union of ``m`` softmax draws per row, one prior weight per draw."""
    n, n_actions, _ = q.shape
    w = prior.sample(rng, (n, m))                                  # (n, m, d)
    probs = softmax_probs(np.einsum("nmd,nad->nma", w, q), beta)
    cdf = np.cumsum(probs, axis=2)
    u = rng.random((n, m, 1)) * cdf[:, :, -1:]
    draws = np.minimum((cdf <= u).sum(axis=2), n_actions - 1)      # (n, m)
    out = np.zeros((n, n_actions), dtype=bool)
    np.put_along_axis(out, draws, True, axis=1)
    return out


def prune(vq_net: VectorQNetwork, state: np.ndarray, prior: WeightPrior, beta: float, m: int,
          rng: np.random.Generator) -> tuple[int, ...]:
    if m < 1:
        raise ValueError("m must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    q = vq_net.q_matrix(np.asarray(state, dtype=np.float64).reshape(1, -1))
    return tuple(int(a) for a in np.flatnonzero(_prune_rows(q, prior, beta, m, rng)[0]))


def build_prune_table(vq_net: VectorQNetwork, states: np.ndarray, prior: WeightPrior, beta: float,
                      m: int | None, rng: np.random.Generator, keys: Sequence[str] | None = None,
                      checkpoint: str = "", chunk: int = 4096) -> PruneTable:
    """Prune once per distinct state key (in order of first appearance).

    ``m`` defaults to three times the action count.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or not len(states):
        raise ValueError("build_prune_table needs a non-empty (n, state_dim) array of states")
    m = 3 * vq_net.n_actions if m is None else m
    if m < 1:
        raise ValueError("m must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    keys = state_keys(states) if keys is None else [str(k) for k in keys]
    first: dict[str, int] = {}
    for i, k in enumerate(keys):
        first.setdefault(k, i)
    uniq = list(first)
    rows = states[[first[k] for k in uniq]]
    sets: dict[str, tuple[int, ...]] = {}
    for lo in range(0, len(uniq), chunk):
        masks = _prune_rows(vq_net.q_matrix(rows[lo:lo + chunk]), prior, beta, m, rng)
        for k, mask in zip(uniq[lo:lo + chunk], masks):
            sets[k] = tuple(int(a) for a in np.flatnonzero(mask))
    return PruneTable(sets, vq_net.n_actions, float(beta), int(m), checkpoint)


# -- trainer ----------------------------------------------------------------

class VectorQTrainer:
    """Runs MQL (``cql_alpha == 0``) or MCQL updates with periodic target syncs."""

    def __init__(self, state_dim: int, n_actions: int, prior: WeightPrior, config: TrainerConfig,
                 particle_count: int = 32, rng: np.random.Generator | None = None):
        self.config = config
        self.prior = prior
        self.particle_count = particle_count
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.vq_net = VectorQNetwork.create(state_dim, n_actions, prior.d, config.hidden, self.rng)
        self.vq_target = self.vq_net.clone()
        self.optimizer = Adam(config.learning_rate)
        self.diagnostics = PosteriorDiagnostics()
        self.updates = 0
        self.losses: list[float] = []

    def update(self, batch: Batch) -> float:
        loss = mcql_update(batch, self.vq_net, self.vq_target, self.prior, self.optimizer, self.config,
                           self.rng, self.particle_count, diagnostics=self.diagnostics)
        self.updates += 1
        if self.updates % self.config.target_update_period == 0:
            copy_parameters(self.vq_net.net, self.vq_target.net)
        return loss

    def train(self, buffer, n_updates: int | None = None, log_every: int = 1000) -> list[dict]:
        n_updates = self.config.total_updates if n_updates is None else n_updates
        rows, window = [], []
        for _ in range(n_updates):
            window.append(self.update(buffer.sample(self.config.batch_size)))
            if self.updates % log_every == 0:
                rows.append({"update_index": self.updates, "loss": float(np.mean(window))})
                window = []
        return rows

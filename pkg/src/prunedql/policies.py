"""Softmax policies, policy softening and the Dirichlet prior over reward weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import NumericalError


def _check_finite(q: np.ndarray) -> None:
    if not np.all(np.isfinite(q)):
        raise NumericalError("non-finite Q-values passed to softmax")


def softmax_probs(q_values: np.ndarray, beta: float) -> np.ndarray:
    """pi(a) proportional to exp(beta * q_a), along the last axis."""
    q = np.asarray(q_values, dtype=np.float64)
    _check_finite(q)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    z = beta * (q - q.max(axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(q_values: np.ndarray, beta: float) -> np.ndarray:
    z = beta * np.asarray(q_values, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_value(q_values: np.ndarray, beta: float) -> np.ndarray | float:
    q = np.asarray(q_values, dtype=np.float64)
    v = (softmax_probs(q, beta) * q).sum(axis=-1)
    return float(v) if v.ndim == 0 else v


@dataclass
class WeightPrior:
    """Dirichlet prior over the reward-weight simplex."""

    concentration: np.ndarray

    def __post_init__(self):
        self.concentration = np.asarray(self.concentration, dtype=np.float64)
        if self.concentration.ndim != 1 or self.concentration.size == 0:
            raise ValueError("concentration must be a non-empty vector")
        if np.any(self.concentration <= 0):
            raise ValueError(f"Dirichlet concentrations must be positive: {self.concentration}")

    @property
    def d(self) -> int:
        return self.concentration.size

    @property
    def mean(self) -> np.ndarray:
        return self.concentration / self.concentration.sum()

    def sample(self, rng: np.random.Generator, size: int | tuple[int, ...] | None = None) -> np.ndarray:
        """Normalised Gamma draws; ``size`` prefixes the output shape."""
        shape = () if size is None else (size,) if isinstance(size, int) else tuple(size)
        if self.d == 1:
            return np.ones(shape + (1,))
        g = rng.standard_gamma(self.concentration, size=shape + (self.d,))
        total = g.sum(axis=-1, keepdims=True)
        # all-zero Gamma draws happen for tiny concentrations; resample uniformly
        bad = total[..., 0] <= 0
        if np.any(bad):
            g[bad] = rng.dirichlet(np.ones(self.d), size=int(bad.sum()))
            total = g.sum(axis=-1, keepdims=True)
        return g / total


def sample_weight(prior: WeightPrior, rng: np.random.Generator) -> np.ndarray:
    return prior.sample(rng)


@dataclass
class PosteriorDiagnostics:
    fallbacks: int = 0
    draws: int = 0
    extra: dict = field(default_factory=dict)


def posterior_sample_weights(prior: WeightPrior, q_matrices: np.ndarray, actions: np.ndarray,
                             beta: float, particle_count: int, rng: np.random.Generator,
                             diagnostics: PosteriorDiagnostics | None = None) -> np.ndarray:
    """Batched single-iteration particle filter.

    For each row ``b`` draws ``particle_count`` weights from the prior, weights
    particle ``k`` by ``pi^beta(actions[b] | w_k^T Q_b)`` and resamples one.
    ``q_matrices`` has shape ``(batch, |A|, d)``; returns ``(batch, d)``.
    """
    q = np.asarray(q_matrices, dtype=np.float64)
    if q.ndim != 3 or q.shape[2] != prior.d:
        raise ValueError(f"q_matrices must be (batch, |A|, {prior.d}), got {q.shape}")
    if particle_count < 1:
        raise ValueError("particle_count must be >= 1")
    actions = np.asarray(actions, dtype=np.int64)
    batch, n_actions, _ = q.shape
    if np.any((actions < 0) | (actions >= n_actions)):
        raise ValueError("action index out of range")
    _check_finite(q)

    particles = prior.sample(rng, (batch, particle_count))          # (B, P, d)
    scal = particles @ q.transpose(0, 2, 1)                          # (B, P, A)
    # overflow in beta * Q yields non-finite log-likelihoods, handled by the fallback below
    with np.errstate(over="ignore", invalid="ignore"):
        logp = log_softmax(scal, beta)[np.arange(batch), :, actions]  # (B, P)
    finite = np.isfinite(logp)
    ok = finite.any(axis=1)
    logp = np.where(finite, logp, -np.inf)
    logp_max = np.where(ok, logp.max(axis=1), 0.0)
    w = np.exp(logp - logp_max[:, None])
    w /= np.where(ok, w.sum(axis=1), 1.0)[:, None]
    # inverse-CDF multinomial resampling of a single particle per row
    cdf = np.cumsum(w, axis=1)
    u = rng.random(batch)[:, None] * cdf[:, -1:]
    idx = np.minimum((cdf <= u).sum(axis=1), particle_count - 1)
    chosen = particles[np.arange(batch), idx]
    if not ok.all():
        chosen[~ok] = prior.sample(rng, int((~ok).sum()))
    if diagnostics is not None:
        diagnostics.draws += batch
        diagnostics.fallbacks += int((~ok).sum())
    return chosen


def posterior_sample_weight(prior: WeightPrior, q_matrix: np.ndarray, action: int, beta: float,
                            particle_count: int, rng: np.random.Generator,
                            diagnostics: PosteriorDiagnostics | None = None) -> np.ndarray:
    q = np.asarray(q_matrix, dtype=np.float64)[None]
    return posterior_sample_weights(prior, q, np.array([action]), beta, particle_count, rng,
                                    diagnostics)[0]


def soften(actions: np.ndarray, epsilon: float, n_actions: int) -> np.ndarray:
    """Probability rows for a deterministic policy softened by ``epsilon``.

    The chosen action keeps ``1 - epsilon``; the rest share ``epsilon`` evenly.
    """
    if n_actions < 2:
        raise ValueError("softening needs at least two actions")
    if not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    actions = np.asarray(actions, dtype=np.int64)
    probs = np.full(actions.shape + (n_actions,), epsilon / (n_actions - 1))
    np.put_along_axis(probs, actions[..., None], 1.0 - epsilon, axis=-1)
    return probs

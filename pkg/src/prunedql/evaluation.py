"""Policy evaluation: weighted importance sampling, mortality-by-quartile, prune statistics, rollouts."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import spearmanr

from .data import TransitionDataset
from .envs import EpisodeConfig, rollout
from .envs.sepsis import N_STATES, SepsisSimulator, features
from .multiobjective import PruneTable, state_keys
from .nn import DenseNetwork
from .policies import soften

log = logging.getLogger(__name__)

ActionFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class SoftenedPolicy:
    """A deterministic policy mixed with uniform mass ``epsilon`` over the other actions."""

    base: ActionFn
    epsilon: float
    n_actions: int

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")

    def predict_probs(self, states: np.ndarray) -> np.ndarray:
        return soften(self.base(states), self.epsilon, self.n_actions)


@dataclass
class EvaluationReport:
    wis_value: float | None = None
    delta_mr: float | None = None
    mean_prune_size: float | None = None
    prune_recall: float | None = None
    behavior_overlap: float | None = None
    percentile_curve: list[tuple[int, float]] = field(default_factory=list)
    spearman: float | None = None
    rollout_return: float | None = None
    rollout_stderr: float | None = None
    seeds: list[int] = field(default_factory=list)
    stderr: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("prune_recall", "behavior_overlap"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 100:
                raise ValueError(f"{name} must be a percentage, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        """One ``metric,value`` row per scalar, then the percentile curve."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.to_dict().items():
                if isinstance(v, (int, float)) or v is None:
                    w.writerow([k, "" if v is None else repr(v)])
            for k, v in sorted(self.stderr.items()):
                w.writerow([f"stderr_{k}", repr(v)])
            for b, rate in self.percentile_curve:
                w.writerow([f"survival_bin_{b}", repr(rate)])


def trajectory_returns(dataset: TransitionDataset, gamma: float = 1.0) -> np.ndarray:
    out = []
    for sl in dataset.trajectory_slices():
        r = dataset.rewards[sl, 0]
        out.append(float(np.sum(r * gamma ** np.arange(r.size))))
    return np.array(out)


def wis(dataset: TransitionDataset, eval_policy, behavior, gamma: float = 1.0,
        clip: float | None = None) -> tuple[float, dict]:
    """Per-trajectory weighted importance sampling estimate of the channel-0 return.

    ``eval_policy`` and ``behavior`` expose ``predict_probs(states)``. Ratios
    are accumulated in log space; ``clip`` caps each per-step ratio.
    """
    if not len(dataset):
        raise ValueError("cannot evaluate on an empty dataset")
    rows = np.arange(len(dataset))
    p_e = eval_policy.predict_probs(dataset.states)[rows, dataset.actions]
    p_b = behavior.predict_probs(dataset.states)[rows, dataset.actions]
    if np.any(p_b <= 0):
        raise ValueError("behaviour policy assigns zero probability to a logged action")
    with np.errstate(divide="ignore"):
        log_ratio = np.log(p_e) - np.log(p_b)
    clipped = 0
    if clip is not None:
        cap = np.log(clip)
        clipped = int(np.sum(log_ratio > cap))
        log_ratio = np.minimum(log_ratio, cap)
    slices = dataset.trajectory_slices()
    log_w = np.array([log_ratio[sl].sum() for sl in slices])
    returns = trajectory_returns(dataset, gamma)
    if not np.isfinite(log_w).any():
        raise ValueError("all importance weights are zero; the estimate is undefined")
    w = np.exp(log_w - log_w.max())
    value = float(np.sum(w * returns) / np.sum(w))
    diagnostics = {"ess": float(w.sum() ** 2 / np.sum(w * w)), "max_log_ratio": float(log_w.max()),
                   "max_weight_share": float(w.max() / w.sum()), "trajectories": len(slices),
                   "clipped_steps": clipped}
    return value, diagnostics


def _q_of_pairs(dataset: TransitionDataset, q) -> np.ndarray:
    if isinstance(q, DenseNetwork):
        return q.forward(dataset.states)[np.arange(len(dataset)), dataset.actions]
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(dataset),):
        raise ValueError(f"expected {len(dataset)} Q-values, got shape {q.shape}")
    return q


def outcome_labels(dataset: TransitionDataset) -> np.ndarray:
    """Per trajectory: 1 death, 0 survival, -1 unlabeled (masked terminal reward or timeout)."""
    labels = []
    for sl in dataset.trajectory_slices():
        last = sl.stop - 1
        r = dataset.rewards[last, 0]
        if not dataset.terminals[last] or r == 0:
            labels.append(-1)
        else:
            labels.append(int(r < 0))
    return np.array(labels, dtype=np.int64)


def _row_labels(dataset: TransitionDataset) -> np.ndarray:
    per_traj = outcome_labels(dataset)
    sizes = [sl.stop - sl.start for sl in dataset.trajectory_slices()]
    return np.repeat(per_traj, sizes)


def delta_mr(dataset: TransitionDataset, q) -> float:
    """Mortality (%) in the lowest Q quartile of labeled pairs minus that in the highest.

    ``q`` is a network scored at the logged actions or a per-row array.
    Ranks are stable in (Q, trajectory id, step) so tied masses split evenly.
    """
    qa = _q_of_pairs(dataset, q)
    labels = _row_labels(dataset)
    keep = labels >= 0
    if keep.sum() < 4:
        raise ValueError("need at least 4 labeled state-action pairs")
    order = np.lexsort((dataset.step[keep], dataset.traj[keep], qa[keep]))
    died = labels[keep][order]
    quarters = np.array_split(died, 4)
    return 100.0 * (quarters[0].mean() - quarters[-1].mean())


def prune_stats(table: PruneTable, dataset: TransitionDataset, keys=None) -> tuple[float, float]:
    """Mean permitted-set size over test transitions and recall (%) of the logged actions."""
    if keys is None:
        keys = state_keys(dataset.states, dataset.state_ids)
    mask = table.mask(keys)
    if not len(mask):
        raise ValueError("empty dataset")
    recall = mask[np.arange(len(mask)), dataset.actions].mean()
    return float(mask.sum(axis=1).mean()), 100.0 * float(recall)


def behavior_overlap(policy: ActionFn, dataset: TransitionDataset) -> float:
    acts = np.asarray(policy(dataset.states))
    return 100.0 * float(np.mean(acts == dataset.actions))


def survival_percentile_curve(dataset: TransitionDataset, q, n_bins: int = 100) -> tuple[list[tuple[int, float]], float | None]:
    """Survival rate (%) per percentile bin of trajectory-mean Q, and the bin/survival Spearman rho."""
    qa = _q_of_pairs(dataset, q)
    labels = outcome_labels(dataset)
    slices = dataset.trajectory_slices()
    mean_q = np.array([qa[sl].mean() for sl in slices])
    keep = labels >= 0
    n = int(keep.sum())
    if n == 0:
        raise ValueError("no labeled trajectories")
    if n < n_bins:
        log.warning("only %d labeled trajectories; using %d bins instead of %d", n, n, n_bins)
        n_bins = n
    tids = dataset.trajectory_ids()[keep]
    order = np.lexsort((tids, mean_q[keep]))
    survived = 1 - labels[keep][order]
    curve = [(i, 100.0 * float(chunk.mean())) for i, chunk in enumerate(np.array_split(survived, n_bins))]
    rates = np.array([c[1] for c in curve])
    rho = None
    if rates.std() > 0:
        rho = float(spearmanr(np.arange(len(rates)), rates).statistic)
    return curve, rho


def rollout_return(policy: ActionFn, env: SepsisSimulator, n_episodes: int, rng: np.random.Generator,
                   max_steps: int = 20) -> tuple[float, float]:
    """Mean and standard error of the unmasked, noise-free channel-0 return on fresh episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    cfg = EpisodeConfig(max_steps=max_steps, terminal_reward_mask_prob=0.0, noise_std=0.0,
                        diabetic_prob=env.diabetic_prob)
    ds = rollout(policy, env, cfg, rng, n_episodes=n_episodes)
    g = np.zeros(n_episodes)
    np.add.at(g, ds.traj, ds.rewards[:, 0])
    se = float(g.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else float("nan")
    return float(g.mean()), se


def exact_return(policy: ActionFn, env: SepsisSimulator, max_steps: int = 20) -> float:
    """Expected channel-0 return of a deterministic policy computed on the exact transition model."""
    table = np.asarray(policy(features(np.arange(N_STATES))), dtype=np.int64)
    return env.expected_return(table, horizon=max_steps)

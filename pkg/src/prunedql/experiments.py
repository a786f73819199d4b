"""End-to-end pipelines on the sepsis simulator: off-policy learning curves and offline benchmarks."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .behavior import BehaviorModel, fit_behavior, generate_offline_dataset
from .data import TransitionDataset, split
from .envs import EpisodeConfig
from .envs.sepsis import N_STATES, SepsisSimulator, features, ids_from_features
from .evaluation import SoftenedPolicy, behavior_overlap, delta_mr, exact_return, prune_stats, rollout_return, wis
from .multiobjective import PruneTable, VectorQTrainer, build_prune_table
from .policies import WeightPrior
from .pruned import PrunedTrainer
from .qlearning import BCQTrainer, QTrainer, ReplayBuffer, TrainerConfig

log = logging.getLogger(__name__)


def derive_seed(root: int, *labels: object) -> int:
    """Stage seed from sha256 of ``root/label/...``; new labels never shift existing ones."""
    text = "/".join([str(int(root))] + [str(x) for x in labels])
    return int(hashlib.sha256(text.encode()).hexdigest()[:16], 16)


def stage_rng(root: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))


def sepsis_keys(feats: np.ndarray) -> list[str]:
    return [str(int(i)) for i in ids_from_features(feats)]


def all_state_features() -> np.ndarray:
    return features(np.arange(N_STATES))


# -- shared stages ----------------------------------------------------------

@dataclass
class Phase1Settings:
    concentration: tuple[float, ...] = (1.0, 10.0, 10.0, 10.0, 10.0)
    beta: float = 40.0
    cql_alpha: float = 0.0
    particle_count: int = 32
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(target_update_period=10_000))


def train_phase1(buffer_data: TransitionDataset, settings: Phase1Settings, seed: int) -> VectorQTrainer:
    cfg = replace(settings.trainer, beta=settings.beta, cql_alpha=settings.cql_alpha)
    trainer = VectorQTrainer(buffer_data.state_dim, buffer_data.action_count,
                             WeightPrior(np.array(settings.concentration)), cfg,
                             settings.particle_count, rng=stage_rng(seed, "phase1"))
    trainer.train(ReplayBuffer.from_dataset(buffer_data, stage_rng(seed, "phase1", "replay")))
    return trainer


def prune_all_states(phase1: VectorQTrainer, beta: float, m: int | None, seed: int,
                     states: np.ndarray | None = None, keys=None) -> PruneTable:
    if states is None:
        states, keys = all_state_features(), [str(i) for i in range(N_STATES)]
    return build_prune_table(phase1.vq_net, states, phase1.prior, beta, m,
                             stage_rng(seed, "prune", beta), keys=keys)


# -- off-policy (simulator) experiment --------------------------------------

@dataclass
class OffPolicySettings:
    n_trajectories: int = 5000
    behavior: dict = field(default_factory=lambda: {"kind": "uniform"})
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    phase1: Phase1Settings = field(default_factory=Phase1Settings)
    prune_betas: tuple[float, ...] = (20.0, 40.0, 160.0)
    m: int | None = None
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(target_update_period=10_000))
    # reward weights for the baseline; None learns from the main reward only
    baseline_weights: tuple[float, ...] | None = None
    eval_every: int = 10_000
    eval_method: str = "exact"
    eval_episodes: int = 1000
    run_baseline: bool = True


def _evaluator(env: SepsisSimulator, settings: OffPolicySettings, seed: int, label: str):
    counter = [0]

    def evaluate(trainer: QTrainer) -> float:
        if settings.eval_method == "exact":
            return exact_return(trainer.act, env, settings.episode.max_steps)
        counter[0] += 1
        rng = stage_rng(seed, "eval", label, counter[0])
        return rollout_return(trainer.act, env, settings.eval_episodes, rng, settings.episode.max_steps)[0]
    return evaluate


def offpolicy_data(env: SepsisSimulator, settings: OffPolicySettings, seed: int) -> TransitionDataset:
    return generate_offline_dataset(env, settings.behavior, settings.n_trajectories, settings.episode,
                                    stage_rng(seed, "data"))


def run_offpolicy(settings: OffPolicySettings, seed: int, env: SepsisSimulator | None = None,
                  data: TransitionDataset | None = None) -> dict:
    """Phase 1 once, then Pruned QL per prune strength and the scalar baseline on the same buffer.

    Returns best-so-far evaluation curves and the best return of every learner.
    With no prune strengths only the baseline is trained.
    """
    env = env or SepsisSimulator(diabetic_prob=settings.episode.diabetic_prob)
    data = data if data is not None else offpolicy_data(env, settings, seed)
    result: dict = {"seed": seed, "transitions": len(data), "pruned": {}, "prune_size": {}}
    if settings.prune_betas:
        phase1 = train_phase1(data, settings.phase1, seed)
        result["posterior_fallbacks"] = phase1.diagnostics.fallbacks
    for beta in settings.prune_betas:
        table = prune_all_states(phase1, beta, settings.m, seed)
        trainer = PrunedTrainer(data.state_dim, data.action_count, table,
                                replace(settings.trainer, reward_weights=None),
                                rng=stage_rng(seed, "phase2", beta), key_fn=sepsis_keys)
        buffer = ReplayBuffer.from_dataset(data, stage_rng(seed, "phase2", beta, "replay"))
        curve = trainer.train(buffer, evaluate=_evaluator(env, settings, seed, f"pruned{beta}"),
                              eval_every=settings.eval_every).best_return_curve()
        result["pruned"][beta] = {"best": curve[-1][1], "curve": curve}
        result["prune_size"][beta] = table.mean_size()
    if settings.run_baseline:
        trainer = QTrainer(data.state_dim, data.action_count,
                           replace(settings.trainer, reward_weights=settings.baseline_weights),
                           rng=stage_rng(seed, "baseline"))
        buffer = ReplayBuffer.from_dataset(data, stage_rng(seed, "baseline", "replay"))
        curve = trainer.train(buffer, evaluate=_evaluator(env, settings, seed, "baseline"),
                              eval_every=settings.eval_every).best_return_curve()
        result["baseline"] = {"best": curve[-1][1], "curve": curve}
    return result


# -- offline (logged data) benchmark ----------------------------------------

@dataclass
class OfflineSettings:
    n_trajectories: int = 5000
    behavior: dict = field(default_factory=lambda: {"kind": "optimal", "epsilon": 0.5})
    episode: EpisodeConfig = field(default_factory=lambda: EpisodeConfig(terminal_reward_mask_prob=0.0))
    fractions: tuple[float, ...] = (0.8, 0.05, 0.15)
    # a soft phase-1 target keeps bootstrapping away from rarely logged actions
    phase1: Phase1Settings = field(default_factory=lambda: Phase1Settings(
        beta=5.0, cql_alpha=0.001, trainer=TrainerConfig(target_update_period=1000)))
    prune_betas: tuple[float, ...] = (20.0, 40.0, 160.0)
    m: int | None = None
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(target_update_period=8000))
    cql_alpha: float = 0.001
    bcq_thresholds: tuple[float, ...] = (0.3,)
    soften_epsilon: float = 0.01
    behavior_fit: dict = field(default_factory=dict)


def _offline_metrics(trainer: QTrainer, part: TransitionDataset, behavior: BehaviorModel,
                     settings: OfflineSettings, env: SepsisSimulator) -> dict:
    policy = SoftenedPolicy(trainer.act, settings.soften_epsilon, trainer.n_actions)
    value, diag = wis(part, policy, behavior)
    # the simulator is known here, so the true value is reported next to the estimates
    return {"wis": value, "ess": diag["ess"], "delta_mr": delta_mr(part, trainer.q_net),
            "overlap": behavior_overlap(trainer.act, part),
            "exact_return": exact_return(trainer.act, env, settings.episode.max_steps)}


def run_offline(settings: OfflineSettings, seed: int, env: SepsisSimulator | None = None,
                data: TransitionDataset | None = None) -> dict:
    """Behaviour model, phase 1 + Pruned CQL per prune strength, CQL and discrete BCQ.

    The prune strength and BCQ threshold are picked by validation WIS; test
    metrics are reported for every candidate and for the picks.
    """
    env = env or SepsisSimulator(diabetic_prob=settings.episode.diabetic_prob)
    if data is None:
        data = generate_offline_dataset(env, settings.behavior, settings.n_trajectories, settings.episode,
                                        stage_rng(seed, "data"))
    train, val, test = split(data, settings.fractions, seed=derive_seed(seed, "split") % 2**32)
    behavior = fit_behavior(train, val, **settings.behavior_fit)
    base_cfg = replace(settings.trainer, cql_alpha=settings.cql_alpha)
    out: dict = {"seed": seed, "behavior_accuracy": behavior.info.get("validation_accuracy"),
                 "pruned": {}, "bcq": {}}

    phase1 = train_phase1(train, settings.phase1, seed)
    ids = np.unique(np.concatenate([d.state_ids for d in (train, val, test)]))
    for beta in settings.prune_betas:
        table = prune_all_states(phase1, beta, settings.m, seed, features(ids), [str(i) for i in ids])
        trainer = PrunedTrainer(train.state_dim, train.action_count, table, base_cfg,
                                rng=stage_rng(seed, "phase2", beta), key_fn=sepsis_keys)
        trainer.train(ReplayBuffer.from_dataset(train, stage_rng(seed, "phase2", beta, "replay")))
        size, recall = prune_stats(table, test)
        out["pruned"][beta] = {"validation": _offline_metrics(trainer, val, behavior, settings, env),
                               "test": _offline_metrics(trainer, test, behavior, settings, env),
                               "prune_size": size, "prune_recall": recall}

    cql = QTrainer(train.state_dim, train.action_count, base_cfg, rng=stage_rng(seed, "cql"))
    cql.train(ReplayBuffer.from_dataset(train, stage_rng(seed, "cql", "replay")))
    out["cql"] = {"test": _offline_metrics(cql, test, behavior, settings, env)}

    for t in settings.bcq_thresholds:
        bcq = BCQTrainer(train.state_dim, train.action_count, replace(settings.trainer, cql_alpha=0.0),
                         behavior, t, rng=stage_rng(seed, "bcq", t))
        bcq.train(ReplayBuffer.from_dataset(train, stage_rng(seed, "bcq", t, "replay")))
        out["bcq"][t] = {"validation": _offline_metrics(bcq, val, behavior, settings, env),
                         "test": _offline_metrics(bcq, test, behavior, settings, env)}

    best_beta = max(settings.prune_betas, key=lambda b: (out["pruned"][b]["validation"]["wis"], -b))
    best_t = max(settings.bcq_thresholds, key=lambda t: (out["bcq"][t]["validation"]["wis"], -t))
    out["selected"] = {"beta": best_beta, "bcq_threshold": best_t,
                       "pruned_cql": out["pruned"][best_beta]["test"], "bcq": out["bcq"][best_t]["test"],
                       "cql": out["cql"]["test"]}
    return out

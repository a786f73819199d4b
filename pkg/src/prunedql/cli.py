"""Command-line entry point: ``prunedql {gen-data,train,eval,report}``.

Run directory layout (``--out``)::

    manifest.json  config.yaml  reports/aggregate.{json,csv}
    seed<k>/data.jsonl train.jsonl validation.jsonl test.jsonl
    seed<k>/phase1.ckpt  prune_beta<b>.jsonl  phase2_beta<b>.{ckpt,csv}
    seed<k>/dqn.{ckpt,csv}  cql_alpha<a>.{ckpt,csv}  behavior.ckpt  bcq_t<t>.{ckpt,csv}
    seed<k>/reports/<policy>.{json,csv}

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .behavior import BehaviorModel, fit_behavior, generate_offline_dataset
from .config import ConfigError
from .data import TransitionDataset, load_dataset, save_dataset, split
from .envs import EpisodeConfig
from .envs.sepsis import N_STATES, SepsisSimulator, features, load_table
from .evaluation import (EvaluationReport, SoftenedPolicy, behavior_overlap, delta_mr, exact_return,
                         prune_stats, rollout_return, survival_percentile_curve, wis)
from .experiments import derive_seed, sepsis_keys, stage_rng
from .multiobjective import PruneTable, VectorQNetwork, VectorQTrainer, build_prune_table
from .nn import DenseNetwork, NumericalError, load_checkpoint, save_checkpoint
from .policies import WeightPrior
from .pruned import PrunedTrainer
from .qlearning import BCQTrainer, QTrainer, ReplayBuffer, TrainerConfig, bcq_mask, masked_argmax

log = logging.getLogger("prunedql")

STAGES = ("phase1", "prune", "phase2", "dqn", "cql", "bcq")


class MissingPrerequisite(RuntimeError):
    pass


# -- manifest ---------------------------------------------------------------

def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    """Single writer for ``manifest.json``: config hash, seeds, every output file and stage timings."""

    def __init__(self, out: Path, cfg: dict):
        self.out = out
        self.path = out / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.data.update(config_hash=config_mod.config_hash(cfg), seeds=cfg["seeds"])
        self.data.setdefault("files", {})
        self.data.setdefault("stages", {})

    def record(self, stage: str, seed: int, files: list[Path], seconds: float) -> None:
        rel = [str(f.relative_to(self.out)) for f in files]
        for f, r in zip(files, rel):
            self.data["files"][r] = file_digest(f)
        self.data["stages"].setdefault(stage, {})[str(seed)] = {"files": rel, "seconds": round(seconds, 3)}
        self.save()

    def save(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# -- helpers ----------------------------------------------------------------

def _num(x: float) -> str:
    return f"{x:g}"


def trainer_config(cfg: dict, section: str, **changes) -> TrainerConfig:
    tr = cfg["training"]
    sec = cfg[section]
    base = TrainerConfig(gamma=tr["gamma"], batch_size=tr["batch_size"], learning_rate=tr["learning_rate"],
                         grad_clip=tr["grad_clip"], hidden=tuple(tr["hidden"]),
                         target_update_period=sec["target_update_period"], total_updates=sec["total_updates"])
    return replace(base, **changes)


def episode_config(cfg: dict) -> EpisodeConfig:
    e = cfg["env"]
    return EpisodeConfig(e["max_steps"], e["terminal_reward_mask_prob"], e["noise_std"], e["diabetic_prob"])


def make_env(cfg: dict) -> SepsisSimulator:
    return SepsisSimulator(load_table(cfg["env"]["table"]), cfg["env"]["diabetic_prob"])


def seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed{seed}"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found; run `train --stage {stage}` (or `{stage}`) first")
    return path


def load_splits(out: Path, seed: int) -> dict[str, TransitionDataset]:
    d = seed_dir(out, seed)
    if not (d / "train.jsonl").exists():
        raise MissingPrerequisite(f"{d / 'train.jsonl'} not found; run `gen-data` first")
    return {name: load_dataset(d / f"{name}.jsonl") for name in ("train", "validation", "test")}


def _evaluator(cfg: dict, env: SepsisSimulator, seed: int, label: str):
    if cfg["mode"] != "offpolicy":
        return None
    counter = [0]

    def evaluate(trainer) -> float:
        if cfg["eval"]["method"] == "exact":
            return exact_return(trainer.act, env, cfg["env"]["max_steps"])
        counter[0] += 1
        return rollout_return(trainer.act, env, cfg["eval"]["n_episodes"],
                              stage_rng(seed, "eval", label, counter[0]), cfg["env"]["max_steps"])[0]
    return evaluate


def _train_and_save(trainer, data: TransitionDataset, cfg: dict, env, seed: int, label: str,
                    d: Path, tag: str) -> list[Path]:
    buffer = ReplayBuffer.from_dataset(data, stage_rng(seed, label, "replay"))
    trainer.train(buffer, evaluate=_evaluator(cfg, env, seed, label), eval_every=cfg["eval"]["every"])
    ckpt, csv_path = d / f"{label}.ckpt", d / f"{label}.csv"
    save_checkpoint(trainer.q_net, ckpt, tag=tag)
    trainer.log.write_csv(csv_path)
    return [ckpt, csv_path]


def _behavior(cfg: dict, d: Path, splits: dict) -> tuple[BehaviorModel, list[Path]]:
    path = d / "behavior.ckpt"
    if path.exists():
        return BehaviorModel.load(path), []
    model = fit_behavior(splits["train"], splits["validation"], **cfg["behavior_model"])
    model.save(path)
    return model, [path]


def _phase1_tag(n_actions: int, d: int) -> str:
    return f"vector-q:{n_actions}x{d}"


def load_phase1(d: Path) -> VectorQNetwork:
    net, tag = load_checkpoint(_require(d / "phase1.ckpt", "phase1"))
    try:
        n_actions, channels = (int(x) for x in tag.split(":")[1].split("x"))
    except (IndexError, ValueError):
        raise ValueError(f"{d / 'phase1.ckpt'}: not a phase-1 checkpoint (tag {tag!r})") from None
    return VectorQNetwork(net, n_actions, channels)


def channel0_network(vq: VectorQNetwork) -> DenseNetwork:
    """Copy of the phase-1 network keeping only the main-reward output of each action."""
    net = vq.net.clone()
    net.weights[-1] = np.ascontiguousarray(net.weights[-1][:, ::vq.n_channels])
    net.biases[-1] = np.ascontiguousarray(net.biases[-1][::vq.n_channels])
    return net


# -- stages -----------------------------------------------------------------

def stage_phase1(cfg, out, seed, env):
    d = seed_dir(out, seed)
    train = load_splits(out, seed)["train"]
    p1 = cfg["phase1"]
    prior = WeightPrior(np.array(p1["concentration"], dtype=np.float64))
    if prior.d != train.channel_count:
        raise ConfigError(f"phase1.concentration has {prior.d} entries, data has {train.channel_count} channels")
    tc = trainer_config(cfg, "phase1", beta=p1["beta"], cql_alpha=p1["alpha"])
    trainer = VectorQTrainer(train.state_dim, train.action_count, prior, tc, p1["particle_count"],
                             rng=stage_rng(seed, "phase1"))
    rows = trainer.train(ReplayBuffer.from_dataset(train, stage_rng(seed, "phase1", "replay")))
    ckpt, csv_path = d / "phase1.ckpt", d / "phase1.csv"
    save_checkpoint(trainer.vq_net.net, ckpt, tag=_phase1_tag(train.action_count, prior.d))
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["update_index", "loss"])
        w.writeheader()
        w.writerows({k: repr(v) for k, v in r.items()} for r in rows)
    (d / "phase1_diagnostics.json").write_text(json.dumps(
        {"posterior_draws": trainer.diagnostics.draws, "posterior_fallbacks": trainer.diagnostics.fallbacks},
        sort_keys=True) + "\n")
    return [ckpt, csv_path, d / "phase1_diagnostics.json"]


def _prune_states(cfg, out, seed) -> tuple[np.ndarray, list[str]]:
    if cfg["mode"] == "offpolicy":
        return features(np.arange(N_STATES)), [str(i) for i in range(N_STATES)]
    splits = load_splits(out, seed)
    ids = np.unique(np.concatenate([s.state_ids for s in splits.values() if s.state_ids is not None]
                                   + [s.next_state_ids for s in splits.values() if s.next_state_ids is not None]))
    return features(ids), [str(i) for i in ids]


def stage_prune(cfg, out, seed, env):
    d = seed_dir(out, seed)
    vq = load_phase1(d)
    prior = WeightPrior(np.array(cfg["phase1"]["concentration"], dtype=np.float64))
    states, keys = _prune_states(cfg, out, seed)
    ckpt_id = file_digest(d / "phase1.ckpt")[:16]
    files = []
    for beta in config_mod.prune_betas(cfg):
        table = build_prune_table(vq, states, prior, beta, cfg["prune"]["m"], stage_rng(seed, "prune", beta),
                                  keys=keys, checkpoint=ckpt_id)
        path = d / f"prune_beta{_num(beta)}.jsonl"
        table.save_jsonl(path)
        files.append(path)
    return files


def stage_phase2(cfg, out, seed, env):
    d = seed_dir(out, seed)
    train = load_splits(out, seed)["train"]
    files = []
    for beta in config_mod.prune_betas(cfg):
        table = PruneTable.load_jsonl(_require(d / f"prune_beta{_num(beta)}.jsonl", "prune"))
        q_net = channel0_network(load_phase1(d)) if cfg["phase2"]["warm_start"] else None
        label = f"phase2_beta{_num(beta)}"
        trainer = PrunedTrainer(train.state_dim, train.action_count, table,
                                trainer_config(cfg, "phase2", cql_alpha=cfg["phase2"]["alpha"]),
                                rng=stage_rng(seed, label), key_fn=sepsis_keys, q_net=q_net)
        files += _train_and_save(trainer, train, cfg, env, seed, label, d, "q")
        (d / f"{label}_fallbacks.json").write_text(json.dumps({"fallbacks": table.fallbacks,
                                                                "lookups": table.lookups}) + "\n")
        files.append(d / f"{label}_fallbacks.json")
    return files


def stage_dqn(cfg, out, seed, env):
    d = seed_dir(out, seed)
    train = load_splits(out, seed)["train"]
    weights = cfg["baselines"]["dqn"]["reward_weights"]
    tc = trainer_config(cfg, "baselines", reward_weights=tuple(weights) if weights else None)
    trainer = QTrainer(train.state_dim, train.action_count, tc, rng=stage_rng(seed, "dqn"))
    return _train_and_save(trainer, train, cfg, env, seed, "dqn", d, "q")


def stage_cql(cfg, out, seed, env):
    d = seed_dir(out, seed)
    train = load_splits(out, seed)["train"]
    files = []
    for alpha in config_mod._as_list(cfg["baselines"]["cql"]["alpha"]):
        label = f"cql_alpha{_num(alpha)}"
        trainer = QTrainer(train.state_dim, train.action_count,
                           trainer_config(cfg, "baselines", cql_alpha=float(alpha)), rng=stage_rng(seed, label))
        files += _train_and_save(trainer, train, cfg, env, seed, label, d, "q")
    return files


def stage_bcq(cfg, out, seed, env):
    d = seed_dir(out, seed)
    splits = load_splits(out, seed)
    model, files = _behavior(cfg, d, splits)
    for t in config_mod._as_list(cfg["baselines"]["bcq"]["threshold"]):
        label = f"bcq_t{_num(t)}"
        trainer = BCQTrainer(splits["train"].state_dim, splits["train"].action_count,
                             trainer_config(cfg, "baselines"), model, float(t), rng=stage_rng(seed, label))
        files += _train_and_save(trainer, splits["train"], cfg, env, seed, label, d, "q")
    return files


STAGE_FNS = {"phase1": stage_phase1, "prune": stage_prune, "phase2": stage_phase2,
             "dqn": stage_dqn, "cql": stage_cql, "bcq": stage_bcq}


# -- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path, manifest: Manifest) -> None:
    env = make_env(cfg)
    for seed in cfg["seeds"]:
        t0 = time.perf_counter()
        d = seed_dir(out, seed)
        d.mkdir(parents=True, exist_ok=True)
        data = generate_offline_dataset(env, cfg["dataset"]["behavior"], cfg["dataset"]["n_trajectories"],
                                        episode_config(cfg), stage_rng(seed, "data"))
        save_dataset(data, d / "data.jsonl")
        files = [d / "data.jsonl"]
        if cfg["mode"] == "offpolicy" or data.n_trajectories < 3:
            # the whole buffer trains; evaluation uses the simulator
            empty = TransitionDataset.empty(data.state_dim, data.action_count, data.channel_count, with_ids=True)
            parts = [data, empty, empty]
        else:
            parts = split(data, cfg["dataset"]["fractions"], seed=derive_seed(seed, "split") % 2**32)
        for name, part in zip(("train", "validation", "test"), parts):
            save_dataset(part, d / f"{name}.jsonl")
            files.append(d / f"{name}.jsonl")
        manifest.record("gen-data", seed, files, time.perf_counter() - t0)
        log.info("seed %d: %d transitions in %d trajectories", seed, len(data), data.n_trajectories)


def cmd_train(cfg: dict, out: Path, manifest: Manifest, stages: list[str]) -> None:
    env = make_env(cfg)
    for stage in stages:
        if stage in ("dqn", "cql", "bcq") and not cfg["baselines"][stage]["enabled"]:
            log.info("stage %s disabled in config; skipped", stage)
            continue
        for seed in cfg["seeds"]:
            t0 = time.perf_counter()
            files = STAGE_FNS[stage](cfg, out, seed, env)
            manifest.record(stage, seed, files, time.perf_counter() - t0)
            log.info("stage %s seed %d done in %.1fs", stage, seed, time.perf_counter() - t0)


class _GreedyPolicy:
    def __init__(self, net: DenseNetwork, mask_fn=None):
        self.net = net
        self.mask_fn = mask_fn

    def __call__(self, states: np.ndarray) -> np.ndarray:
        mask = None if self.mask_fn is None else self.mask_fn(states)
        return masked_argmax(self.net.forward(states), mask)


def _policies(cfg: dict, d: Path, behavior: BehaviorModel | None) -> dict:
    """Every trained scalar policy in a seed directory: name -> (policy, net, prune table or None)."""
    out = {}
    for beta in config_mod.prune_betas(cfg):
        label = f"phase2_beta{_num(beta)}"
        if (d / f"{label}.ckpt").exists():
            table = PruneTable.load_jsonl(_require(d / f"prune_beta{_num(beta)}.jsonl", "prune"))
            net, _ = load_checkpoint(d / f"{label}.ckpt")
            out[label] = (_GreedyPolicy(net, lambda s, t=table: t.mask(sepsis_keys(s))), net, table)
    candidates = ["dqn"] + [f"cql_alpha{_num(a)}" for a in config_mod._as_list(cfg["baselines"]["cql"]["alpha"])]
    for label in candidates:
        if (d / f"{label}.ckpt").exists():
            net, _ = load_checkpoint(d / f"{label}.ckpt")
            out[label] = (_GreedyPolicy(net), net, None)
    for t in config_mod._as_list(cfg["baselines"]["bcq"]["threshold"]):
        label = f"bcq_t{_num(t)}"
        if (d / f"{label}.ckpt").exists():
            if behavior is None:
                raise MissingPrerequisite(f"{d / 'behavior.ckpt'} not found; run `train --stage bcq` first")
            net, _ = load_checkpoint(d / f"{label}.ckpt")
            mask_fn = lambda s, t=float(t): bcq_mask(behavior.predict_probs(s), t)
            out[label] = (_GreedyPolicy(net, mask_fn), net, None)
    return out


def evaluate_policy(cfg: dict, policy, net: DenseNetwork, table: PruneTable | None, test: TransitionDataset,
                    behavior: BehaviorModel | None, env: SepsisSimulator, seed: int, label: str) -> EvaluationReport:
    metrics = set(cfg["eval"]["metrics"])
    rep = EvaluationReport(seeds=[seed])
    if len(test):
        if "wis" in metrics and behavior is not None:
            soft = SoftenedPolicy(policy, cfg["eval"]["soften_epsilon"], net.output_dim)
            rep.wis_value, diag = wis(test, soft, behavior, cfg["training"]["gamma"], cfg["eval"]["wis_clip"])
            rep.extra["wis_diagnostics"] = diag
        if "delta_mr" in metrics:
            try:
                rep.delta_mr = delta_mr(test, net)
            except ValueError as exc:
                log.warning("%s: delta_mr skipped (%s)", label, exc)
        if "overlap" in metrics:
            rep.behavior_overlap = behavior_overlap(policy, test)
        if "prune" in metrics and table is not None:
            rep.mean_prune_size, rep.prune_recall = prune_stats(table, test)
        if "percentile" in metrics:
            try:
                rep.percentile_curve, rep.spearman = survival_percentile_curve(test, net)
            except ValueError as exc:
                log.warning("%s: percentile curve skipped (%s)", label, exc)
        rep.extra["action_counts"] = np.bincount(policy(test.states), minlength=net.output_dim).tolist()
    elif metrics & {"wis", "delta_mr", "overlap", "percentile"}:
        log.info("%s: no test split; offline metrics skipped", label)
    if "return" in metrics:
        if cfg["eval"]["method"] == "exact":
            rep.rollout_return = exact_return(policy, env, cfg["env"]["max_steps"])
        else:
            rep.rollout_return, rep.rollout_stderr = rollout_return(
                policy, env, cfg["eval"]["n_episodes"], stage_rng(seed, "final-eval", label), cfg["env"]["max_steps"])
    if table is not None and "prune" in metrics and rep.mean_prune_size is None:
        rep.mean_prune_size = table.mean_size()
    return rep


_SCALARS = ("wis_value", "delta_mr", "mean_prune_size", "prune_recall", "behavior_overlap", "spearman",
            "rollout_return")


def aggregate(reports: dict[str, list[EvaluationReport]]) -> dict:
    """Mean and standard error across seeds for every scalar metric of every policy."""
    out = {}
    for label, reps in sorted(reports.items()):
        row = {"seeds": [r.seeds[0] for r in reps]}
        for key in _SCALARS:
            vals = np.array([getattr(r, key) for r in reps if getattr(r, key) is not None], dtype=np.float64)
            if vals.size:
                row[key] = float(vals.mean())
                row[f"{key}_stderr"] = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        out[label] = row
    return out


def cmd_eval(cfg: dict, out: Path, manifest: Manifest) -> None:
    env = make_env(cfg)
    reports: dict[str, list[EvaluationReport]] = {}
    for seed in cfg["seeds"]:
        t0 = time.perf_counter()
        d = seed_dir(out, seed)
        splits = load_splits(out, seed)
        behavior = None
        files = []
        if len(splits["test"]) or (d / "behavior.ckpt").exists():
            behavior, files = _behavior(cfg, d, splits)
        policies = _policies(cfg, d, behavior)
        if not policies:
            raise MissingPrerequisite(f"no trained policies in {d}; run `train` first")
        (d / "reports").mkdir(exist_ok=True)
        for label, (policy, net, table) in policies.items():
            rep = evaluate_policy(cfg, policy, net, table, splits["test"], behavior, env, seed, label)
            rep.extra.update(config_hash=config_mod.config_hash(cfg),
                             checkpoint=file_digest(d / f"{label}.ckpt")[:16])
            rep.write_json(d / "reports" / f"{label}.json")
            rep.write_csv(d / "reports" / f"{label}.csv")
            files += [d / "reports" / f"{label}.json", d / "reports" / f"{label}.csv"]
            reports.setdefault(label, []).append(rep)
        manifest.record("eval", seed, files, time.perf_counter() - t0)
    agg = aggregate(reports)
    (out / "reports").mkdir(exist_ok=True)
    agg_json = out / "reports" / "aggregate.json"
    agg_json.write_text(json.dumps({"config_hash": config_mod.config_hash(cfg), "policies": agg},
                                   indent=2, sort_keys=True) + "\n")
    agg_csv = out / "reports" / "aggregate.csv"
    _write_table(agg_csv, [{"policy": k, **{m: v for m, v in row.items() if m != "seeds"}} for k, row in agg.items()])
    manifest.record("eval", -1, [agg_json, agg_csv], 0.0)


def _write_table(path: Path, rows: list[dict]) -> None:
    cols: list[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})


def cmd_report(run_dirs: list[Path], out: Path) -> None:
    """Side-by-side metrics, best-so-far learning curves, sweep rows and action histograms."""
    out.mkdir(parents=True, exist_ok=True)
    comparison, curves, sweep, hist = [], [], [], []
    for run in run_dirs:
        agg_path = run / "reports" / "aggregate.json"
        if not agg_path.exists():
            raise MissingPrerequisite(f"{agg_path} not found; run `eval` for {run} first")
        agg = json.loads(agg_path.read_text())["policies"]
        cfg = config_mod.resolve(path=run / "config.yaml") if (run / "config.yaml").exists() else {}
        for label, row in agg.items():
            comparison.append({"run": run.name, "policy": label,
                               **{k: v for k, v in row.items() if k != "seeds"}})
            if cfg:
                conc = cfg["phase1"]["concentration"]
                sweep.append({"run": run.name, "policy": label, "noise_std": cfg["env"]["noise_std"],
                              "weight_scale": conc[1] / conc[0] if len(conc) > 1 else 1.0,
                              "return": row.get("rollout_return"),
                              "return_stderr": row.get("rollout_return_stderr"),
                              "wis": row.get("wis_value"), "delta_mr": row.get("delta_mr")})
        for seed_path in sorted(run.glob("seed*")):
            for log_csv in sorted(seed_path.glob("*.csv")):
                if log_csv.stem == "phase1":
                    continue
                best = -np.inf
                with open(log_csv) as fh:
                    for r in csv.DictReader(fh):
                        if r.get("eval_return"):
                            best = max(best, float(r["eval_return"]))
                            curves.append({"run": run.name, "seed": seed_path.name, "policy": log_csv.stem,
                                           "update_index": int(r["update_index"]), "best_return": best})
            for rep_path in sorted((seed_path / "reports").glob("*.json")):
                counts = json.loads(rep_path.read_text()).get("extra", {}).get("action_counts", [])
                for a, c in enumerate(counts):
                    hist.append({"run": run.name, "seed": seed_path.name, "policy": rep_path.stem,
                                 "action": a, "count": c})
    _write_table(out / "comparison.csv", comparison)
    _write_table(out / "learning_curves.csv", curves)
    _write_table(out / "sweep.csv", sweep)
    _write_table(out / "action_histogram.csv", hist)


# -- argument handling --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunedql", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="YAML experiment config")
        s.add_argument("--seed", type=int, action="append", help="run only these seeds (repeatable)")
        s.add_argument("--out", type=Path, default=Path("runs/default"))
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. phase2.total_updates=1000")
        if name == "train":
            s.add_argument("--stage", action="append", choices=STAGES + ("all",), required=True)
        if name in ("train", "eval"):
            s.add_argument("--beta", type=float, action="append", help="prune inverse temperature (repeatable)")
            s.add_argument("--m", type=int, help="softmax draws per state when pruning")
            s.add_argument("--alpha", type=float, help="conservative penalty for phase 1 and phase 2")
    r = sub.add_parser("report")
    r.add_argument("runs", type=Path, nargs="+")
    r.add_argument("--out", type=Path, default=Path("runs/report"))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args) -> dict:
    stored = args.out / "config.yaml"
    path = args.config or (stored if stored.exists() else None)
    sets = list(args.set)
    if getattr(args, "beta", None):
        sets.append(f"prune.beta={sorted(set(args.beta))}")
    if getattr(args, "m", None) is not None:
        sets.append(f"prune.m={args.m}")
    if getattr(args, "alpha", None) is not None:
        sets += [f"phase1.alpha={args.alpha}", f"phase2.alpha={args.alpha}"]
    cfg = config_mod.resolve(path=path, sets=sets)
    if args.seed:
        cfg["seeds"] = sorted(set(args.seed))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.runs, args.out)
            return 0
        cfg = _load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        stored = dict(cfg, seeds=sorted(set(cfg["seeds"]) | set(_stored_seeds(args.out))))
        config_mod.dump(stored, args.out / "config.yaml")
        manifest = Manifest(args.out, cfg)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out, manifest)
        elif args.command == "train":
            stages = list(STAGES) if "all" in args.stage else [s for s in STAGES if s in args.stage]
            cmd_train(cfg, args.out, manifest, stages)
        else:
            cmd_eval(cfg, args.out, manifest)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except MissingPrerequisite as exc:
        log.error("missing prerequisite: %s", exc)
        return 3
    except (NumericalError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return 4
    return 0


def _stored_seeds(out: Path) -> list[int]:
    return sorted(int(p.name[4:]) for p in out.glob("seed*") if p.name[4:].isdigit())


if __name__ == "__main__":
    sys.exit(main())

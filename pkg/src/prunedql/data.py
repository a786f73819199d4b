"""Transition datasets: container, JSONL persistence and trajectory-level splits.

File format, one JSON object per line::

    {"meta": {"action_count": 8, "channel_count": 5, "state_dim": 17, ...}}   (optional first line)
    {"traj": 0, "step": 0, "s": [...], "a": 3, "s2": [...], "r": [...], "terminal": false}

Records may also carry ``"sid"``/``"sid2"`` integer state ids for
discrete-state data; when present they are used as state keys.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    reward_vec: np.ndarray
    terminal: bool
    trajectory_id: int
    step_index: int


def _rows(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    return x.reshape(n, -1) if n else x.reshape(0, 0)


@dataclass
class TransitionDataset:
    """Transitions stored column-wise, trajectories contiguous and step-ordered."""

    traj: np.ndarray
    step: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    action_count: int
    state_ids: np.ndarray | None = None
    next_state_ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.traj = np.asarray(self.traj, dtype=np.int64).reshape(-1)
        self.step = np.asarray(self.step, dtype=np.int64).reshape(-1)
        n = self.traj.size
        self.states = _rows(self.states, n)
        self.next_states = _rows(self.next_states, n)
        if self.next_states.shape != self.states.shape:
            raise DatasetError("states and next_states differ in shape")
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        self.rewards = _rows(self.rewards, n)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(-1)
        if self.state_ids is not None:
            self.state_ids = np.asarray(self.state_ids, dtype=np.int64).reshape(-1)
            self.next_state_ids = np.asarray(self.next_state_ids, dtype=np.int64).reshape(-1)
        for name in ("step", "actions", "terminals"):
            if getattr(self, name).size != n:
                raise DatasetError(f"column {name!r} has {getattr(self, name).size} rows, expected {n}")
        if self.rewards.shape[0] != n:
            raise DatasetError("reward rows do not match transition count")
        if n and (self.actions.min() < 0 or self.actions.max() >= self.action_count):
            raise DatasetError(f"action outside [0, {self.action_count})")

    def __len__(self) -> int:
        return self.traj.size

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def channel_count(self) -> int:
        return self.rewards.shape[1]

    @classmethod
    def empty(cls, state_dim: int, action_count: int, channel_count: int, meta: dict | None = None,
              with_ids: bool = False) -> "TransitionDataset":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros((0, state_dim)), z, np.zeros((0, state_dim)),
                   np.zeros((0, channel_count)), np.zeros(0, dtype=bool), action_count,
                   z if with_ids else None, z if with_ids else None, dict(meta or {}))

    def trajectory_slices(self) -> list[slice]:
        if not len(self):
            return []
        cut = np.flatnonzero(np.diff(self.traj) != 0) + 1
        bounds = np.concatenate([[0], cut, [len(self)]])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def trajectory_ids(self) -> np.ndarray:
        return np.array([self.traj[s.start] for s in self.trajectory_slices()], dtype=np.int64)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectory_slices())

    def select(self, index: np.ndarray) -> "TransitionDataset":
        ids = None if self.state_ids is None else self.state_ids[index]
        ids2 = None if self.next_state_ids is None else self.next_state_ids[index]
        return TransitionDataset(self.traj[index], self.step[index], self.states[index],
                                 self.actions[index], self.next_states[index], self.rewards[index],
                                 self.terminals[index], self.action_count, ids, ids2, dict(self.meta))

    def select_trajectories(self, traj_ids: Sequence[int]) -> "TransitionDataset":
        return self.select(np.flatnonzero(np.isin(self.traj, np.asarray(traj_ids, dtype=np.int64))))

    def replace(self, **changes) -> "TransitionDataset":
        kw = {name: getattr(self, name) for name in self.__dataclass_fields__}
        kw.update(changes)
        return TransitionDataset(**kw)

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield Transition(self.states[i], int(self.actions[i]), self.next_states[i],
                             self.rewards[i], bool(self.terminals[i]), int(self.traj[i]),
                             int(self.step[i]))

    def validate(self) -> None:
        """Check trajectory contiguity, step order and terminal placement."""
        seen = set()
        for sl in self.trajectory_slices():
            tid = int(self.traj[sl.start])
            if tid in seen:
                raise DatasetError(f"trajectory {tid} is not contiguous")
            seen.add(tid)
            steps = self.step[sl]
            if np.any(np.diff(steps) <= 0):
                raise DatasetError(f"trajectory {tid} steps are not increasing")
            if np.any(self.terminals[sl][:-1]):
                raise DatasetError(f"trajectory {tid} continues after a terminal transition")

    def equals(self, other: "TransitionDataset") -> bool:
        cols = ("traj", "step", "states", "actions", "next_states", "rewards", "terminals")
        if self.action_count != other.action_count:
            return False
        if any(not np.array_equal(getattr(self, c), getattr(other, c)) for c in cols):
            return False
        if (self.state_ids is None) != (other.state_ids is None):
            return False
        if self.state_ids is not None and not (np.array_equal(self.state_ids, other.state_ids) and
                                               np.array_equal(self.next_state_ids, other.next_state_ids)):
            return False
        return True


def concat(datasets: Sequence[TransitionDataset]) -> TransitionDataset:
    datasets = [d for d in datasets if len(d)] or list(datasets[:1])
    first = datasets[0]
    has_ids = all(d.state_ids is not None for d in datasets)
    return TransitionDataset(
        np.concatenate([d.traj for d in datasets]), np.concatenate([d.step for d in datasets]),
        np.concatenate([d.states for d in datasets]), np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.next_states for d in datasets]), np.concatenate([d.rewards for d in datasets]),
        np.concatenate([d.terminals for d in datasets]), first.action_count,
        np.concatenate([d.state_ids for d in datasets]) if has_ids else None,
        np.concatenate([d.next_state_ids for d in datasets]) if has_ids else None,
        dict(first.meta))


# -- JSONL ------------------------------------------------------------------

def _float_list(x: np.ndarray) -> list[float]:
    return [float(v) for v in x]


def save_dataset(dataset: TransitionDataset, path: str | Path) -> None:
    meta = dict(dataset.meta)
    meta.update(action_count=dataset.action_count, channel_count=dataset.channel_count,
                state_dim=dataset.state_dim)
    lines = [json.dumps({"meta": meta}, sort_keys=True)]
    for i in range(len(dataset)):
        rec = {"traj": int(dataset.traj[i]), "step": int(dataset.step[i]),
               "s": _float_list(dataset.states[i]), "a": int(dataset.actions[i]),
               "s2": _float_list(dataset.next_states[i]), "r": _float_list(dataset.rewards[i]),
               "terminal": bool(dataset.terminals[i])}
        if dataset.state_ids is not None:
            rec["sid"] = int(dataset.state_ids[i])
            rec["sid2"] = int(dataset.next_state_ids[i])
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


_REQUIRED = ("traj", "step", "s", "a", "s2", "r", "terminal")


def load_dataset(path: str | Path, action_count: int | None = None) -> TransitionDataset:
    """Parse a JSONL dataset; errors name the offending line number."""
    meta: dict = {}
    rows: list[dict] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            if "meta" in rec and not rows and not meta:
                meta = dict(rec["meta"])
                continue
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise DatasetError(f"{path}:{lineno}: missing field(s) {missing}")
            rec["_line"] = lineno
            rows.append(rec)

    n_actions = action_count if action_count is not None else meta.get("action_count")
    if not rows:
        return TransitionDataset.empty(int(meta.get("state_dim", 0)), int(n_actions or 0),
                                       int(meta.get("channel_count", 0)), meta)
    dim, d = len(rows[0]["s"]), len(rows[0]["r"])
    with_ids = "sid" in rows[0]
    if n_actions is None:
        n_actions = max(int(r["a"]) for r in rows) + 1
    for r in rows:
        where = f"{path}:{r['_line']}"
        if len(r["s"]) != dim or len(r["s2"]) != dim:
            raise DatasetError(f"{where}: state dimension differs from first record ({dim})")
        if len(r["r"]) != d:
            raise DatasetError(f"{where}: reward length differs from first record ({d})")
        a = r["a"]
        if not isinstance(a, int) or isinstance(a, bool) or not 0 <= a < n_actions:
            raise DatasetError(f"{where}: action {a!r} outside [0, {n_actions})")
        if ("sid" in r) != with_ids:
            raise DatasetError(f"{where}: state ids present on some records only")
        if not isinstance(r["terminal"], bool):
            raise DatasetError(f"{where}: terminal must be a boolean")
    ds = TransitionDataset(
        [r["traj"] for r in rows], [r["step"] for r in rows], [r["s"] for r in rows],
        [r["a"] for r in rows], [r["s2"] for r in rows], [r["r"] for r in rows],
        [r["terminal"] for r in rows], int(n_actions),
        [r["sid"] for r in rows] if with_ids else None,
        [r["sid2"] for r in rows] if with_ids else None, meta)
    ds.validate()
    return ds


# -- splitting --------------------------------------------------------------

def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``total``, as close as possible to ``total * f``."""
    exact = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(exact).astype(int)
    short = total - counts.sum()
    # ties go to the earlier split
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts.tolist()


def split(dataset: TransitionDataset, fractions: Sequence[float] = (0.8, 0.05, 0.15),
          seed: int = 0) -> list[TransitionDataset]:
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1: {fractions}")
    ids = dataset.trajectory_ids()
    if len(ids) < sum(1 for f in fractions if f > 0):
        raise ValueError(f"{len(ids)} trajectories cannot fill {len(fractions)} splits")
    perm = np.random.default_rng(seed).permutation(ids)
    counts = largest_remainder(len(ids), fractions)
    tags = ("train", "validation", "test") if len(counts) == 3 else [f"part{i}" for i in range(len(counts))]
    out, start = [], 0
    for tag, c in zip(tags, counts):
        part = dataset.select_trajectories(perm[start:start + c])
        part.meta["split"] = tag
        out.append(part)
        start += c
    return out

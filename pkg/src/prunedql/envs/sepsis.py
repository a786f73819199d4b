"""Discrete sepsis simulator with a five-channel reward.

State: heart rate, blood pressure, oxygen, glucose, diabetic flag and the three
treatment flags set by the previous action (1440 states). Action: antibiotics,
vasopressors, ventilation as bits ``a = 4*abx + 2*vaso + vent``.

Reward channel 0 is +100 on discharge and -100 on death; channels 1-4 are +1/-1
when heart rate, blood pressure, oxygen or glucose move abnormal->normal or
normal->abnormal.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

DIMS = (3, 3, 2, 5, 2, 2, 2, 2)  # hr, bp, o2, glucose, diabetic, abx, vaso, vent
N_STATES = int(np.prod(DIMS))
N_ACTIONS = 8
N_CHANNELS = 5
N_FEATURES = 3 + 3 + 2 + 5 + 4
NORMAL = np.array([1, 1, 1, 2])  # normal level of each vital
VITAL_DIMS = DIMS[:4]
N_VITALS = int(np.prod(VITAL_DIMS))
DISCHARGE_REWARD = 100.0
DEATH_REWARD = -100.0

NONE, DISCHARGE, DEATH, TIMEOUT = 0, 1, 2, 3


@dataclass(frozen=True)
class TransitionTable:
    abx_hr_high_to_normal: float = 0.5
    abx_bp_high_to_normal: float = 0.5
    abx_off_hr_normal_to_high: float = 0.1
    abx_off_bp_normal_to_high: float = 0.1
    vent_o2_low_to_normal: float = 0.7
    vent_off_o2_normal_to_low: float = 0.1
    vaso_bp_low_to_normal: float = 0.7
    vaso_diabetic_bp_up: float = 0.5
    vaso_diabetic_glucose_up: float = 0.5
    vaso_off_bp_down: float = 0.1
    vaso_off_bp_down_diabetic: float = 0.05
    fluctuation: float = 0.1
    fluctuation_glucose_diabetic: float = 0.3

    def __post_init__(self):
        for f in fields(self):
            p = getattr(self, f.name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{f.name}={p} is not a probability")
        if self.fluctuation > 0.5 or self.fluctuation_glucose_diabetic > 0.5:
            raise ValueError("per-direction fluctuation probabilities must be <= 0.5")


_YAML_KEYS = {
    ("antibiotics", "given", "heart_rate_high_to_normal"): "abx_hr_high_to_normal",
    ("antibiotics", "given", "blood_pressure_high_to_normal"): "abx_bp_high_to_normal",
    ("antibiotics", "withdrawn", "heart_rate_normal_to_high"): "abx_off_hr_normal_to_high",
    ("antibiotics", "withdrawn", "blood_pressure_normal_to_high"): "abx_off_bp_normal_to_high",
    ("ventilation", "given", "oxygen_low_to_normal"): "vent_o2_low_to_normal",
    ("ventilation", "withdrawn", "oxygen_normal_to_low"): "vent_off_o2_normal_to_low",
    ("vasopressors", "given_nondiabetic", "blood_pressure_low_to_normal"): "vaso_bp_low_to_normal",
    ("vasopressors", "given_diabetic", "blood_pressure_up"): "vaso_diabetic_bp_up",
    ("vasopressors", "given_diabetic", "glucose_up"): "vaso_diabetic_glucose_up",
    ("vasopressors", "withdrawn", "blood_pressure_down"): "vaso_off_bp_down",
    ("vasopressors", "withdrawn", "blood_pressure_down_diabetic"): "vaso_off_bp_down_diabetic",
    ("fluctuation", "vital"): "fluctuation",
    ("fluctuation", "glucose_diabetic"): "fluctuation_glucose_diabetic",
}


def _flatten(tree: dict, prefix: tuple = ()) -> dict[tuple, object]:
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out.update(_flatten(v, prefix + (k,)))
        else:
            out[prefix + (k,)] = v
    return out


def table_from_dict(tree: dict) -> TransitionTable:
    flat = _flatten(tree or {})
    unknown = [".".join(k) for k in flat if k not in _YAML_KEYS]
    if unknown:
        raise ValueError(f"unknown transition-table keys: {unknown}")
    return TransitionTable(**{_YAML_KEYS[k]: float(v) for k, v in flat.items()})


def load_table(path: str | Path | None = None) -> TransitionTable:
    """Load a transition table; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("prunedql.resources").joinpath("sepsis_table.yaml").read_text()
    else:
        text = Path(path).read_text()
    return table_from_dict(yaml.safe_load(text))


def encode(hr, bp, o2, glu, diab, abx, vaso, vent) -> np.ndarray:
    return np.ravel_multi_index((hr, bp, o2, glu, diab, abx, vaso, vent), DIMS)


def decode(state_ids) -> tuple[np.ndarray, ...]:
    return np.unravel_index(np.asarray(state_ids, dtype=np.int64), DIMS)


def action_bits(actions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.asarray(actions, dtype=np.int64)
    return (a >> 2) & 1, (a >> 1) & 1, a & 1


def n_abnormal(hr, bp, o2, glu) -> np.ndarray:
    return (hr != 1).astype(int) + (bp != 1) + (o2 != 1) + (glu != 2)


def outcome(state_ids) -> np.ndarray:
    """Terminal kind implied by a (post-transition) state: NONE, DISCHARGE or DEATH."""
    hr, bp, o2, glu, _, abx, vaso, vent = decode(state_ids)
    bad = n_abnormal(hr, bp, o2, glu)
    kind = np.full(bad.shape, NONE)
    kind[(bad == 0) & (abx == 0) & (vaso == 0) & (vent == 0)] = DISCHARGE
    kind[bad >= 3] = DEATH
    return kind


def features(state_ids) -> np.ndarray:
    """One-hot vitals plus the diabetic and treatment flags (17 columns)."""
    hr, bp, o2, glu, diab, abx, vaso, vent = decode(np.atleast_1d(state_ids))
    n = hr.size
    out = np.zeros((n, N_FEATURES))
    rows = np.arange(n)
    out[rows, hr] = 1
    out[rows, 3 + bp] = 1
    out[rows, 6 + o2] = 1
    out[rows, 8 + glu] = 1
    out[:, 13] = diab
    out[:, 14] = abx
    out[:, 15] = vaso
    out[:, 16] = vent
    return out


def ids_from_features(feats: np.ndarray) -> np.ndarray:
    f = np.atleast_2d(np.asarray(feats))
    return encode(f[:, 0:3].argmax(1), f[:, 3:6].argmax(1), f[:, 6:8].argmax(1),
                  f[:, 8:13].argmax(1), f[:, 13].round().astype(int), f[:, 14].round().astype(int),
                  f[:, 15].round().astype(int), f[:, 16].round().astype(int))


class SepsisSimulator:
    n_states = N_STATES
    n_actions = N_ACTIONS
    n_channels = N_CHANNELS
    state_dim = N_FEATURES

    def __init__(self, table: TransitionTable | None = None, diabetic_prob: float = 0.2):
        self.table = table or load_table()
        if not 0.0 <= diabetic_prob <= 1.0:
            raise ValueError("diabetic_prob must lie in [0, 1]")
        self.diabetic_prob = diabetic_prob
        hr, bp, o2, glu = np.unravel_index(np.arange(N_VITALS), VITAL_DIMS)
        bad = n_abnormal(hr, bp, o2, glu)
        # non-terminal starts: at least one and at most two abnormal vitals
        self._start_vitals = np.flatnonzero((bad >= 1) & (bad <= 2))
        self._outcome = outcome(np.arange(N_STATES))

    features = staticmethod(features)

    # -- sampling ---------------------------------------------------------

    def reset(self, n: int, rng: np.random.Generator) -> np.ndarray:
        v = rng.choice(self._start_vitals, size=n)
        diab = (rng.random(n) < self.diabetic_prob).astype(int)
        hr, bp, o2, glu = np.unravel_index(v, VITAL_DIMS)
        zero = np.zeros(n, dtype=int)
        return encode(hr, bp, o2, glu, diab, zero, zero, zero)

    def step(self, state_ids, actions, rng: np.random.Generator):
        """Sample one transition per row.

        Returns ``(next_ids, rewards[n, 5], kinds)`` with kinds in
        {NONE, DISCHARGE, DEATH}.
        """
        t = self.table
        hr, bp, o2, glu, diab, abx0, vaso0, vent0 = (np.array(x) for x in decode(np.atleast_1d(state_ids)))
        abx, vaso, vent = action_bits(np.atleast_1d(actions))
        if abx.shape != hr.shape:
            raise ValueError("state and action arrays differ in length")
        before = np.stack([hr, bp, o2, glu], axis=1)
        u = rng.random((hr.size, 11))
        diabetic = diab == 1

        abx_on, abx_off = abx == 1, (abx0 == 1) & (abx == 0)
        hr[abx_on & (hr == 2) & (u[:, 0] < t.abx_hr_high_to_normal)] = 1
        bp[abx_on & (bp == 2) & (u[:, 1] < t.abx_bp_high_to_normal)] = 1
        hr[abx_off & (hr == 1) & (u[:, 0] < t.abx_off_hr_normal_to_high)] = 2
        bp[abx_off & (bp == 1) & (u[:, 1] < t.abx_off_bp_normal_to_high)] = 2

        vent_on, vent_off = vent == 1, (vent0 == 1) & (vent == 0)
        o2[vent_on & (o2 == 0) & (u[:, 2] < t.vent_o2_low_to_normal)] = 1
        o2[vent_off & (o2 == 1) & (u[:, 2] < t.vent_off_o2_normal_to_low)] = 0

        vaso_on, vaso_off = vaso == 1, (vaso0 == 1) & (vaso == 0)
        m = vaso_on & ~diabetic & (bp == 0) & (u[:, 3] < t.vaso_bp_low_to_normal)
        bp[m] = 1
        m = vaso_on & diabetic & (u[:, 3] < t.vaso_diabetic_bp_up)
        bp[m] = np.minimum(bp[m] + 1, 2)
        m = vaso_on & diabetic & (u[:, 4] < t.vaso_diabetic_glucose_up)
        glu[m] = np.minimum(glu[m] + 1, 4)
        p_down = np.where(diabetic, t.vaso_off_bp_down_diabetic, t.vaso_off_bp_down)
        m = vaso_off & (u[:, 5] < p_down)
        bp[m] = np.maximum(bp[m] - 1, 0)

        touched_hr = abx_on | abx_off
        touched_bp = abx_on | abx_off | vaso_on | vaso_off
        touched_o2 = vent_on | vent_off
        touched_glu = vaso_on & diabetic
        p_glu = np.where(diabetic, t.fluctuation_glucose_diabetic, t.fluctuation)
        for vital, top, touched, p, col in ((hr, 2, touched_hr, t.fluctuation, 6),
                                            (bp, 2, touched_bp, t.fluctuation, 7),
                                            (o2, 1, touched_o2, t.fluctuation, 8),
                                            (glu, 4, touched_glu, p_glu, 9)):
            down = ~touched & (u[:, col] < p)
            up = ~touched & (u[:, col] >= p) & (u[:, col] < 2 * p)
            vital[down] = np.maximum(vital[down] - 1, 0)
            vital[up] = np.minimum(vital[up] + 1, top)

        nxt = encode(hr, bp, o2, glu, diab, abx, vaso, vent)
        after = np.stack([hr, bp, o2, glu], axis=1)
        rewards = np.zeros((hr.size, N_CHANNELS))
        rewards[:, 1:] = (after == NORMAL).astype(float) - (before == NORMAL)
        kinds = self._outcome[nxt]
        rewards[kinds == DISCHARGE, 0] = DISCHARGE_REWARD
        rewards[kinds == DEATH, 0] = DEATH_REWARD
        return nxt, rewards, kinds

    # -- exact model --------------------------------------------------------

    @functools.cached_property
    def vital_transitions(self) -> np.ndarray:
        """Exact P[diabetic, prev_treatments, action, vitals, vitals'] by enumeration."""
        out = np.zeros((2, 8, 8, N_VITALS, N_VITALS))
        for diab in (0, 1):
            for prev in range(8):
                for a in range(8):
                    for v in range(N_VITALS):
                        for v2, p in _enumerate_step(self.table, v, diab, prev, a).items():
                            out[diab, prev, a, v, v2] += p
        return out

    @functools.cached_property
    def start_distribution(self) -> np.ndarray:
        p = np.zeros(N_STATES)
        k = len(self._start_vitals)
        hr, bp, o2, glu = np.unravel_index(self._start_vitals, VITAL_DIMS)
        for diab, w in ((0, 1 - self.diabetic_prob), (1, self.diabetic_prob)):
            z = np.zeros(k, dtype=int)
            p[encode(hr, bp, o2, glu, np.full(k, diab), z, z, z)] += w / k
        return p

    def next_state_distribution(self, state_ids, actions) -> tuple[np.ndarray, np.ndarray]:
        """Next-state ids ``(n, 90)`` and their probabilities under the exact model."""
        hr, bp, o2, glu, diab, abx0, vaso0, vent0 = decode(np.atleast_1d(state_ids))
        v = np.ravel_multi_index((hr, bp, o2, glu), VITAL_DIMS)
        prev = 4 * abx0 + 2 * vaso0 + vent0
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        probs = self.vital_transitions[diab, prev, a, v]                       # (n, 90)
        nhr, nbp, no2, nglu = np.unravel_index(np.arange(N_VITALS), VITAL_DIMS)
        abx, vaso, vent = action_bits(a)
        ids = encode(nhr[None], nbp[None], no2[None], nglu[None], diab[:, None],
                     abx[:, None], vaso[:, None], vent[:, None])
        return ids, probs

    def _one_step(self, actions: np.ndarray):
        ids, probs = self.next_state_distribution(np.arange(N_STATES), actions)
        kind = self._outcome[ids]
        r = np.where(kind == DISCHARGE, DISCHARGE_REWARD, np.where(kind == DEATH, DEATH_REWARD, 0.0))
        return ids, probs, r, kind == NONE

    def expected_return(self, policy_actions: np.ndarray, horizon: int = 20) -> float:
        """Exact expected main-channel return of a deterministic state->action table."""
        pi = np.asarray(policy_actions, dtype=np.int64)
        if pi.shape != (N_STATES,):
            raise ValueError(f"policy table must have shape ({N_STATES},)")
        ids, probs, r, cont = self._one_step(pi)
        value = np.zeros(N_STATES)
        for _ in range(horizon):
            value = (probs * (r + cont * value[ids])).sum(axis=1)
        return float(self.start_distribution @ value)

    def optimal_policy(self, horizon: int = 20) -> np.ndarray:
        """Action table that is greedy for the optimal ``horizon``-step values (ties to the lowest action)."""
        steps = [self._one_step(np.full(N_STATES, a)) for a in range(N_ACTIONS)]
        value = np.zeros(N_STATES)
        q = np.zeros((N_STATES, N_ACTIONS))
        for _ in range(horizon):
            q = np.stack([(probs * (r + cont * value[ids])).sum(axis=1) for ids, probs, r, cont in steps], axis=1)
            value = q.max(axis=1)
        return q.argmax(axis=1)


def _enumerate_step(t: TransitionTable, v: int, diab: int, prev: int, a: int) -> dict[int, float]:
    """Branch over every stochastic effect of one step; independent of :meth:`SepsisSimulator.step`."""
    abx0, vaso0, vent0 = (prev >> 2) & 1, (prev >> 1) & 1, prev & 1
    abx, vaso, vent = (a >> 2) & 1, (a >> 1) & 1, a & 1
    hr, bp, o2, glu = (int(x) for x in np.unravel_index(v, VITAL_DIMS))
    dist = {(hr, bp, o2, glu): 1.0}

    def branch(fn):
        nonlocal dist
        new: dict = {}
        for s, p in dist.items():
            for s2, q in fn(list(s)):
                if q > 0:
                    new[s2] = new.get(s2, 0.0) + p * q
        dist = new

    def coin(s, idx, cond, p, value):
        if not cond(s) or p == 0:
            return [(tuple(s), 1.0)]
        s2 = list(s)
        s2[idx] = value(s[idx])
        return [(tuple(s2), p), (tuple(s), 1.0 - p)]

    # heart rate and blood pressure use separate uniforms under antibiotics
    if abx:
        branch(lambda s: coin(s, 0, lambda s: s[0] == 2, t.abx_hr_high_to_normal, lambda x: 1))
        branch(lambda s: coin(s, 1, lambda s: s[1] == 2, t.abx_bp_high_to_normal, lambda x: 1))
    elif abx0:
        branch(lambda s: coin(s, 0, lambda s: s[0] == 1, t.abx_off_hr_normal_to_high, lambda x: 2))
        branch(lambda s: coin(s, 1, lambda s: s[1] == 1, t.abx_off_bp_normal_to_high, lambda x: 2))
    if vent:
        branch(lambda s: coin(s, 2, lambda s: s[2] == 0, t.vent_o2_low_to_normal, lambda x: 1))
    elif vent0:
        branch(lambda s: coin(s, 2, lambda s: s[2] == 1, t.vent_off_o2_normal_to_low, lambda x: 0))
    if vaso and not diab:
        branch(lambda s: coin(s, 1, lambda s: s[1] == 0, t.vaso_bp_low_to_normal, lambda x: 1))
    elif vaso and diab:
        branch(lambda s: coin(s, 1, lambda s: True, t.vaso_diabetic_bp_up, lambda x: min(x + 1, 2)))
        branch(lambda s: coin(s, 3, lambda s: True, t.vaso_diabetic_glucose_up, lambda x: min(x + 1, 4)))
    elif vaso0:
        p = t.vaso_off_bp_down_diabetic if diab else t.vaso_off_bp_down
        branch(lambda s: coin(s, 1, lambda s: True, p, lambda x: max(x - 1, 0)))

    touched = [abx or abx0, abx or abx0 or vaso or vaso0, vent or vent0, vaso and diab]
    tops = [2, 2, 1, 4]
    for i in range(4):
        if touched[i]:
            continue
        p = t.fluctuation_glucose_diabetic if (i == 3 and diab) else t.fluctuation

        def fluct(s, i=i, p=p):
            down, up, stay = list(s), list(s), list(s)
            down[i] = max(s[i] - 1, 0)
            up[i] = min(s[i] + 1, tops[i])
            return [(tuple(down), p), (tuple(up), p), (tuple(stay), 1.0 - 2 * p)]
        branch(fluct)

    return {int(np.ravel_multi_index(s, VITAL_DIMS)): p for s, p in dist.items()}


def clinician_policy(feats: np.ndarray) -> np.ndarray:
    """Rule of thumb: antibiotics for high HR/BP, vasopressors for low BP, ventilation for low O2."""
    f = np.atleast_2d(feats)
    abx = (f[:, 2] == 1) | (f[:, 5] == 1)
    vaso = f[:, 3] == 1
    vent = f[:, 6] == 1
    return 4 * abx.astype(int) + 2 * vaso + vent

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prunedql.data import TransitionDataset
from prunedql.envs.sepsis import DEATH, DEATH_REWARD, SepsisSimulator
from prunedql.evaluation import (EvaluationReport, SoftenedPolicy, behavior_overlap, delta_mr, exact_return,
                                 outcome_labels, prune_stats, rollout_return, survival_percentile_curve, wis)
from prunedql.multiobjective import PruneTable
from prunedql.policies import soften


class FixedProbs:
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def predict_probs(self, states):
        return np.tile(self.probs, (len(states), 1))


def bandit(n, behaviour, payoff_prob, rng):
    """One-step trajectories: action drawn from ``behaviour``, reward +100 w.p. ``payoff_prob[a]`` else -100."""
    a = rng.choice(len(behaviour), size=n, p=behaviour)
    r = np.where(rng.random(n) < np.asarray(payoff_prob)[a], 100.0, -100.0)
    z = np.zeros((n, 1))
    return TransitionDataset(np.arange(n), np.zeros(n), z, a, z, r[:, None], np.ones(n, bool), len(behaviour))


def outcome_dataset(rng, n_traj, death_prob=0.3, max_len=5, unlabeled_prob=0.0):
    """Trajectories of random length ending in death (-100), discharge (+100) or an unlabeled end."""
    lengths = rng.integers(1, max_len + 1, size=n_traj)
    traj = np.repeat(np.arange(n_traj), lengths)
    step = np.concatenate([np.arange(k) for k in lengths])
    n = traj.size
    last = np.cumsum(lengths) - 1
    rewards = np.zeros((n, 1))
    died = rng.random(n_traj) < death_prob
    rewards[last, 0] = np.where(died, DEATH_REWARD, 100.0)
    unlabeled = rng.random(n_traj) < unlabeled_prob
    rewards[last[unlabeled], 0] = 0.0
    terminals = np.zeros(n, bool)
    terminals[last] = True
    states = rng.normal(size=(n, 2))
    ds = TransitionDataset(traj, step, states, rng.integers(3, size=n), states, rewards, terminals, 3)
    return ds, died, unlabeled


# -- WIS --------------------------------------------------------------------

def test_wis_with_evaluation_equal_to_behaviour_is_mean_return():
    ds, _, _ = outcome_dataset(np.random.default_rng(0), 500, unlabeled_prob=0.2)
    probs = soften(np.zeros(1, int), 0.3, 3)[0]
    value, diag = wis(ds, FixedProbs(probs), FixedProbs(probs))
    returns = np.bincount(ds.traj, weights=ds.rewards[:, 0])
    assert abs(value - returns.mean()) < 1e-9
    assert diag["ess"] == pytest.approx(500)


def test_wis_single_trajectory_returns_its_return():
    ds, _, _ = outcome_dataset(np.random.default_rng(1), 1)
    value, _ = wis(ds, FixedProbs([0.9, 0.05, 0.05]), FixedProbs([0.1, 0.1, 0.8]))
    assert value == ds.rewards[:, 0].sum()


def test_wis_matches_closed_form_bandit_value():
    pi_b, pi_e, payoff = [0.5, 0.5], [0.3, 0.7], [0.6, 0.35]
    ds = bandit(100_000, pi_b, payoff, np.random.default_rng(2))
    truth = sum(p * (200 * q - 100) for p, q in zip(pi_e, payoff))
    value, _ = wis(ds, FixedProbs(pi_e), FixedProbs(pi_b))
    assert abs(value - truth) <= 1.0


def test_wis_is_invariant_to_weight_scale():
    ds = bandit(300, [0.2, 0.3, 0.5], [0.5, 0.2, 0.7], np.random.default_rng(3))
    pi_b = FixedProbs([0.2, 0.3, 0.5])
    v1, _ = wis(ds, FixedProbs([0.6, 0.3, 0.1]), pi_b)
    # one-step trajectories: doubling every evaluation probability doubles every weight
    v2, _ = wis(ds, FixedProbs([1.2, 0.6, 0.2]), pi_b)
    assert v1 == pytest.approx(v2, rel=1e-12)


def test_wis_errors():
    ds, _, _ = outcome_dataset(np.random.default_rng(4), 10)
    with pytest.raises(ValueError, match="zero probability"):
        wis(ds, FixedProbs([1 / 3] * 3), FixedProbs([0.0, 0.5, 0.5]))
    with pytest.raises(ValueError, match="undefined"):
        wis(ds, FixedProbs([0.0, 0.0, 0.0]), FixedProbs([1 / 3] * 3))
    with pytest.raises(ValueError):
        wis(ds.select(np.zeros(0, int)), FixedProbs([1 / 3] * 3), FixedProbs([1 / 3] * 3))


def test_wis_clipping_reports_clipped_steps():
    ds = bandit(1000, [0.99, 0.01], [0.5, 0.5], np.random.default_rng(5))
    _, diag = wis(ds, FixedProbs([0.01, 0.99]), FixedProbs([0.99, 0.01]), clip=10.0)
    assert diag["clipped_steps"] == int(np.sum(ds.actions == 1))


def test_softened_policy_probabilities():
    pol = SoftenedPolicy(lambda s: np.array([2, 0]), 0.1, 4)
    p = pol.predict_probs(np.zeros((2, 1)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert p[0, 2] == pytest.approx(0.9)
    with pytest.raises(ValueError):
        SoftenedPolicy(lambda s: s, 1.0, 4)


# -- mortality by quartile ---------------------------------------------------

def test_outcome_labels():
    ds, died, unlabeled = outcome_dataset(np.random.default_rng(6), 200, unlabeled_prob=0.3)
    expected = np.where(unlabeled, -1, died.astype(int))
    np.testing.assert_array_equal(outcome_labels(ds), expected)


def test_perfect_separation_gives_hundred():
    ds, died, _ = outcome_dataset(np.random.default_rng(7), 400)
    q = np.where(np.repeat(died, np.bincount(ds.traj)), -1.0, 1.0)
    assert delta_mr(ds, q) == 100.0


@pytest.mark.parametrize("seed", range(10))
def test_constant_q_gives_near_zero(seed):
    ds, _, _ = outcome_dataset(np.random.default_rng(100 + seed), 100_000)
    assert abs(delta_mr(ds, np.zeros(len(ds)))) < 2.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-5, 5), scale=st.floats(0.1, 10))
def test_delta_mr_invariant_under_monotone_maps(seed, shift, scale):
    rng = np.random.default_rng(seed)
    ds, _, _ = outcome_dataset(rng, 300, unlabeled_prob=0.1)
    q = rng.integers(-20, 20, size=len(ds)).astype(float)      # integers, so ties are present
    base = delta_mr(ds, q)
    assert delta_mr(ds, scale * q + shift) == base
    assert delta_mr(ds, np.exp(q / 7.0)) == base
    assert delta_mr(ds, q ** 3) == base


def test_delta_mr_needs_four_labeled_pairs():
    ds, _, _ = outcome_dataset(np.random.default_rng(8), 1, max_len=3)
    with pytest.raises(ValueError):
        delta_mr(ds.select(np.arange(min(3, len(ds)))), np.zeros(min(3, len(ds))))
    with pytest.raises(ValueError):
        delta_mr(ds, np.zeros(len(ds) + 1))


# -- prune statistics and overlap -------------------------------------------

def _keyed(ds):
    return [str(i) for i in range(len(ds))]


def test_full_table_stats():
    ds, _, _ = outcome_dataset(np.random.default_rng(9), 50)
    keys = _keyed(ds)
    assert prune_stats(PruneTable.full(keys, 3), ds, keys) == (3.0, 100.0)


def test_random_singletons_have_chance_recall():
    rng = np.random.default_rng(10)
    n, n_actions = 20_000, 8
    z = np.zeros((n, 1))
    ds = TransitionDataset(np.arange(n), np.zeros(n), z, rng.integers(n_actions, size=n), z, z,
                           np.ones(n, bool), n_actions)
    keys = _keyed(ds)
    table = PruneTable({k: (int(a),) for k, a in zip(keys, rng.integers(n_actions, size=n))}, n_actions, 1.0, 1)
    size, recall = prune_stats(table, ds, keys)
    assert size == 1.0 and abs(recall - 100 / n_actions) < 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_recall_non_increasing_when_sets_shrink(seed):
    rng = np.random.default_rng(seed)
    ds, _, _ = outcome_dataset(rng, 40)
    keys = _keyed(ds)
    big = {k: tuple(sorted(rng.choice(3, size=rng.integers(1, 4), replace=False).tolist())) for k in keys}
    small = {k: v[:1] if rng.random() < 0.5 else v for k, v in big.items()}
    r_big = prune_stats(PruneTable(big, 3, 1.0, 3), ds, keys)[1]
    r_small = prune_stats(PruneTable(small, 3, 1.0, 3), ds, keys)[1]
    assert r_small <= r_big


def test_behaviour_overlap():
    rng = np.random.default_rng(11)
    n = 50_000
    z = np.zeros((n, 1))
    ds = TransitionDataset(np.arange(n), np.zeros(n), z, rng.integers(25, size=n), z, z, np.ones(n, bool), 25)
    assert behavior_overlap(lambda s: ds.actions, ds) == 100.0
    assert abs(behavior_overlap(lambda s: rng.integers(25, size=len(s)), ds) - 4.0) < 0.5


# -- survival curve ---------------------------------------------------------

def test_discriminative_q_gives_step_curve():
    ds, died, _ = outcome_dataset(np.random.default_rng(12), 1000, death_prob=0.3)
    q = np.where(np.repeat(died, np.bincount(ds.traj)), -1.0, 1.0)
    curve, rho = survival_percentile_curve(ds, q)
    rates = np.array([r for _, r in curve])
    assert len(curve) == 100
    assert np.all(np.diff(rates) >= 0) and rates[0] == 0.0 and rates[-1] == 100.0
    assert rho > 0.8


def test_constant_q_gives_flat_curve():
    # deaths alternate, so every two-trajectory bin holds one of each
    n = 200
    traj = np.arange(n)
    r = np.where(traj % 2 == 0, DEATH_REWARD, 100.0)[:, None]
    z = np.zeros((n, 1))
    ds = TransitionDataset(traj, np.zeros(n), z, np.zeros(n, int), z, r, np.ones(n, bool), 2)
    curve, rho = survival_percentile_curve(ds, np.zeros(n))
    assert {rate for _, rate in curve} == {50.0} and rho is None


def test_few_trajectories_use_coarser_bins(caplog):
    ds, _, _ = outcome_dataset(np.random.default_rng(13), 30)
    curve, _ = survival_percentile_curve(ds, np.zeros(len(ds)))
    assert len(curve) == 30 and "bins" in caplog.text


# -- rollouts ---------------------------------------------------------------

class DoomedSimulator(SepsisSimulator):
    """Every step ends in death."""

    def step(self, state_ids, actions, rng):
        nxt, rewards, kinds = super().step(state_ids, actions, rng)
        rewards[:, 0] = DEATH_REWARD
        return nxt, rewards, np.full_like(kinds, DEATH)


def test_forced_death_returns_minus_hundred():
    mean, se = rollout_return(lambda s: np.zeros(len(s), int), DoomedSimulator(), 50, np.random.default_rng(0))
    assert mean == -100.0 and se == 0.0


def test_rollout_returns_bounded_and_stderr_scales():
    env = SepsisSimulator()
    policy = lambda s: np.random.default_rng(0).integers(8, size=len(s))  # noqa: E731
    m1, se100 = rollout_return(policy, env, 100, np.random.default_rng(1))
    m2, se400 = rollout_return(policy, env, 400, np.random.default_rng(2))
    assert -100 <= m1 <= 100 and -100 <= m2 <= 100
    assert 0.35 < se400 / se100 < 0.7     # 1/sqrt(4) = 0.5


def test_exact_return_agrees_with_rollouts():
    env = SepsisSimulator()
    policy = lambda s: np.full(len(s), 7)  # noqa: E731
    mean, se = rollout_return(policy, env, 4000, np.random.default_rng(3))
    assert abs(exact_return(policy, env) - mean) < 4 * se


# -- reports ----------------------------------------------------------------

def test_report_round_trip(tmp_path):
    rep = EvaluationReport(wis_value=1.5, delta_mr=10.0, behavior_overlap=40.0, prune_recall=90.0,
                           percentile_curve=[(0, 10.0), (1, 20.0)], seeds=[0, 1], stderr={"wis_value": 0.2},
                           extra={"config_hash": "abc"})
    rep.write_json(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["extra"]["config_hash"] == "abc"
    rep.write_csv(tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert "wis_value,1.5" in text and "stderr_wis_value,0.2" in text and "survival_bin_1,20.0" in text
    with pytest.raises(ValueError):
        EvaluationReport(behavior_overlap=101.0)

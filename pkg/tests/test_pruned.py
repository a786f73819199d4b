import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import five_state_chain, tabular_net
from prunedql.data import Transition
from prunedql.multiobjective import PruneTable, state_keys
from prunedql.nn import DenseNetwork
from prunedql.pruned import PrunedTrainer, greedy_action, pruned_cql_update, pruned_target, pruned_update
from prunedql.qlearning import Batch, QTrainer, ReplayBuffer, TrainerConfig, dqn_target

ID_KEYS = lambda states: [str(int(i)) for i in np.argmax(states, axis=1)]  # noqa: E731


def _trainer(table, n_states=3, n_actions=3, q=None, qt=None, **cfg):
    trainer = PrunedTrainer(n_states, n_actions, table, TrainerConfig(**cfg), rng=np.random.default_rng(0),
                            key_fn=ID_KEYS, q_net=q)
    if qt is not None:
        trainer.target_net = qt
    return trainer


def _transition(s2, r, n=3, terminal=False):
    eye = np.eye(n)
    return Transition(eye[0], 0, eye[s2], np.asarray(r, dtype=np.float64), terminal, 0, 0)


def test_full_table_target_equals_dqn_target():
    rng = np.random.default_rng(1)
    q, qt = DenseNetwork.create(3, 3, (5,), rng), DenseNetwork.create(3, 3, (5,), rng)
    trainer = _trainer(PruneTable.full(["0", "1", "2"], 3), q=q, qt=qt, gamma=0.9)
    t = _transition(2, [1.0, 4.0])
    assert pruned_target(t, trainer) == dqn_target(t, q, qt, 0.9)


def test_singleton_set_evaluates_that_action():
    q = tabular_net(3, 3, np.arange(9.0).reshape(3, 3))
    qt = tabular_net(3, 3, 10 * np.arange(9.0).reshape(3, 3))
    trainer = _trainer(PruneTable({"1": (0,)}, 3, 1.0, 3), q=q, qt=qt, gamma=0.5)
    assert pruned_target(_transition(1, [2.0]), trainer) == 2.0 + 0.5 * 30.0


def test_restricted_argmax_picks_best_permitted_action():
    # Q(s') = [1, 4, 9]: unrestricted argmax is action 2, permitted {0, 1} picks 1, evaluated by Q'
    q = tabular_net(3, 3, [[0, 0, 0], [1.0, 4.0, 9.0], [0, 0, 0]])
    qt = tabular_net(3, 3, [[0, 0, 0], [100.0, 7.0, 50.0], [0, 0, 0]])
    trainer = _trainer(PruneTable({"1": (0, 1)}, 3, 1.0, 3), q=q, qt=qt, gamma=1.0)
    assert pruned_target(_transition(1, [0.5]), trainer) == 7.5


def test_terminal_ignores_the_table():
    trainer = _trainer(PruneTable({"1": (0,)}, 3, 1.0, 3))
    assert pruned_target(_transition(1, [-100.0, 3.0], terminal=True), trainer) == -100.0


def test_missing_key_falls_back_and_counts():
    q = tabular_net(3, 3, [[0, 0, 0], [0, 0, 0], [1.0, 9.0, 2.0]])
    trainer = _trainer(PruneTable({"1": (0,)}, 3, 1.0, 3), q=q, qt=q.clone(), gamma=1.0)
    assert pruned_target(_transition(2, [0.0]), trainer) == 9.0
    assert trainer.fallback_count == 1


def test_greedy_action_examples():
    q = tabular_net(1, 4, [[9.0, 2.0, 8.0, 5.0]])
    s = np.ones(1)
    table = PruneTable({"k": (3, 1)}, 4, 1.0, 4)
    assert greedy_action(q, s, table, key="k") == 3
    assert greedy_action(q, s) == 0
    assert greedy_action(q, s, PruneTable({"k": (1,)}, 4, 1.0, 4), key="k") == 1
    ties = tabular_net(1, 4, [[1.0, 5.0, 5.0, 5.0]])
    assert greedy_action(ties, s, PruneTable({"k": (3, 2)}, 4, 1.0, 4), key="k") == 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), allowed=st.sets(st.integers(0, 5), min_size=1))
def test_greedy_action_stays_in_permitted_set(seed, allowed):
    rng = np.random.default_rng(seed)
    q = DenseNetwork.create(4, 6, (5,), rng)
    state = rng.normal(size=4)
    key = state_keys(state[None])[0]
    table = PruneTable({key: tuple(sorted(allowed))}, 6, 1.0, 6)
    assert greedy_action(q, state, table) in allowed


def _chain_buffer(seed):
    data = five_state_chain(0.9).all_transitions(repeat=3)
    return data, ReplayBuffer.from_dataset(data, np.random.default_rng(seed))


def test_full_table_training_is_bit_identical_to_baseline():
    data, _ = _chain_buffer(0)
    cfg = TrainerConfig(gamma=0.9, batch_size=8, hidden=(8,), target_update_period=7)
    base = QTrainer(5, 2, cfg, rng=np.random.default_rng(3))
    base_log = base.train(ReplayBuffer.from_dataset(data, np.random.default_rng(4)), 60, log_every=20)
    pruned = PrunedTrainer(5, 2, PruneTable.full([str(i) for i in range(5)], 2), cfg,
                           rng=np.random.default_rng(3), key_fn=ID_KEYS)
    pruned_log = pruned.train(ReplayBuffer.from_dataset(data, np.random.default_rng(4)), 60, log_every=20)
    assert [r["loss"] for r in base_log.rows] == [r["loss"] for r in pruned_log.rows]
    for a, b in zip(base.q_net.params(), pruned.q_net.params()):
        np.testing.assert_array_equal(a, b)


def test_secondary_channels_do_not_affect_updates():
    data, _ = _chain_buffer(0)
    rng = np.random.default_rng(5)
    batch = Batch.from_dataset(data)
    rewards = np.concatenate([batch.rewards, rng.normal(size=(len(batch), 3))], axis=1)
    noisy = Batch(batch.states, batch.actions, batch.next_states, rewards, batch.terminals, batch.index)
    rewards2 = rewards.copy()
    rewards2[:, 1:] = rng.normal(size=(len(batch), 3)) * 100
    noisier = Batch(batch.states, batch.actions, batch.next_states, rewards2, batch.terminals, batch.index)
    table = PruneTable({str(i): (1,) for i in range(5)}, 2, 1.0, 2)
    cfg = dict(gamma=0.9, hidden=(8,), cql_alpha=0.01)
    t1, t2 = _trainer(table, 5, 2, **cfg), _trainer(table, 5, 2, **cfg)
    for _ in range(5):
        assert pruned_update(noisy, t1) == pruned_update(noisier, t2)
    for a, b in zip(t1.q_net.params(), t2.q_net.params()):
        np.testing.assert_array_equal(a, b)


def test_zero_alpha_cql_equals_pruned_update():
    data, _ = _chain_buffer(1)
    batch = Batch.from_dataset(data)
    table = PruneTable({str(i): (0, 1) for i in range(4)}, 2, 1.0, 2)
    t1, t2 = _trainer(table, 5, 2, gamma=0.9, hidden=(8,)), _trainer(table, 5, 2, gamma=0.9, hidden=(8,))
    for _ in range(3):
        assert pruned_cql_update(batch, t1, alpha=0.0) == pruned_update(batch, t2)
    with pytest.raises(ValueError):
        pruned_cql_update(batch, t1, alpha=-1.0)


def test_cql_penalty_suppresses_unlogged_action():
    data, _ = _chain_buffer(2)
    data = data.select(np.flatnonzero(data.actions == 1))
    table = PruneTable.full([str(i) for i in range(5)], 2)
    out = {}
    for alpha in (0.0, 0.001):
        trainer = PrunedTrainer(5, 2, table, TrainerConfig(gamma=0.9, batch_size=8, hidden=(8,), cql_alpha=alpha,
                                                           learning_rate=1e-3, target_update_period=50),
                                rng=np.random.default_rng(6), key_fn=ID_KEYS)
        trainer.train(ReplayBuffer.from_dataset(data, np.random.default_rng(7)), 500)
        out[alpha] = trainer.q_net.forward(np.eye(5))[:, 0].mean()
    assert out[0.001] < out[0.0]


def test_buffer_masks_use_next_state_ids():
    data, buf = _chain_buffer(3)
    table = PruneTable({str(i): (0,) for i in range(5)}, 2, 1.0, 2)
    trainer = _trainer(table, 5, 2)
    trainer.attach(buf)
    batch = buf.sample(6)
    assert trainer.next_mask_for(batch).tolist() == [[True, False]] * 6


def test_constructor_checks():
    with pytest.raises(ValueError):
        PrunedTrainer(3, 4, PruneTable({"0": (0,)}, 3, 1.0, 3), TrainerConfig())
    with pytest.raises(ValueError):
        PrunedTrainer(3, 3, PruneTable({"0": (0,)}, 3, 1.0, 3), TrainerConfig(reward_weights=(1.0, 1.0)))

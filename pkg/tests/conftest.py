import numpy as np

from prunedql.envs.chain import ChainMDP
from prunedql.nn import DenseNetwork


def tabular_net(n_states: int, n_outputs: int, table: np.ndarray | None = None) -> DenseNetwork:
    """Linear net on one-hot inputs: output row s is ``table[s]`` (bias starts at zero)."""
    w = np.zeros((n_states, n_outputs)) if table is None else np.asarray(table, dtype=np.float64).copy()
    return DenseNetwork([w], [np.zeros(n_outputs)])


def net_table(net: DenseNetwork, n_states: int) -> np.ndarray:
    return net.forward(np.eye(n_states))


def five_state_chain(gamma: float = 0.9) -> ChainMDP:
    """Actions: 0 left, 1 right. Reaching the right end pays 1 and ends the episode."""
    nxt = np.array([[max(s - 1, 0), min(s + 1, 4)] for s in range(5)])
    rewards = np.zeros((5, 2, 1))
    terminal = np.zeros((5, 2), dtype=bool)
    rewards[3, 1, 0] = rewards[4, 1, 0] = 1.0
    terminal[3, 1] = terminal[4, 1] = True
    rewards[0, 0, 0] = -0.1
    return ChainMDP(nxt, rewards, gamma, terminal)


def small_vector_mdp(seed: int = 0, identical: bool = False):
    """Random 4-state, 3-action, 2-channel deterministic MDP with gamma 0.9."""
    rng = np.random.default_rng(seed)
    nxt = rng.integers(4, size=(4, 3))
    r = rng.uniform(0, 1, size=(4, 3, 2))
    if identical:
        r[..., 1] = r[..., 0]
    return ChainMDP(nxt, r, 0.9)


def train_tabular_mql(mdp: ChainMDP, prior, beta: float, n_updates: int, seed: int = 0,
                      period: int = 20, step: float = 0.05):
    """Full-batch MQL on a one-hot vector Q table; returns the learned (S, A, d) table.

    ``step`` is the per-entry SGD step on the squared error; the learning rate
    is scaled so that the shared bias does not amplify it past 1.
    """
    from prunedql.multiobjective import VectorQNetwork, mql_update
    from prunedql.nn import SGD, copy_parameters
    from prunedql.qlearning import Batch, TrainerConfig

    s, a, d = mdp.n_states, mdp.n_actions, mdp.n_channels
    vq = VectorQNetwork(tabular_net(s, a * d), a, d)
    target = vq.clone()
    batch = Batch.from_dataset(mdp.all_transitions())
    cfg = TrainerConfig(gamma=mdp.gamma, beta=beta, grad_clip=None)
    opt = SGD(step * len(batch) / (2 * (s + 1)))
    rng = np.random.default_rng(seed)
    for k in range(1, n_updates + 1):
        mql_update(batch, vq, target, prior, opt, cfg, rng)
        if k % period == 0:
            copy_parameters(vq.net, target.net)
    return vq.q_matrix(np.eye(s))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from relgap.envs.tabular import random_mdp_pair
from relgap.mdp import TabularMdp, TabularPolicy, soft_policy_evaluation
from relgap.envs.cartpole import cartpole_step_gradient
from relgap.soft_rl import Batch, ReplayBuffer, SoftQLearner, soft_q_update
from relgap.transfer import normalize_weights, rto_tabular_loss_grad


def random_policy(rng, n_states, n_actions, floor=1e-3):
    w = rng.dirichlet(np.ones(n_actions), size=n_states)
    return TabularPolicy.normalized(floor + w)


def random_mdp(seed, n_states=5, n_actions=3, gamma=0.9):
    return random_mdp_pair(seed, n_states, n_actions, gamma, 0.0)[0]


@pytest.fixture
def mdp53():
    return random_mdp(11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def chain(n_states=1, reward=1.0, gamma=0.9):
    """Deterministic cycle through ``n_states`` states with one action."""
    p = np.zeros((n_states, 1, n_states))
    for s in range(n_states):
        p[s, 0, (s + 1) % n_states] = 1.0
    rho = np.zeros(n_states)
    rho[0] = 1.0
    return TabularMdp(p, np.full((n_states, 1, n_states), reward), rho, gamma)


def full_batch(mdp, copies=1):
    """Every (s, a, s') triple once per copy."""
    s, a, s2 = np.meshgrid(np.arange(mdp.n_states), np.arange(mdp.n_actions), np.arange(mdp.n_states), indexing="ij")
    s, a, s2 = s.ravel(), a.ravel(), s2.ravel()
    return Batch(np.tile(s, copies), np.tile(a, copies), np.tile(mdp.reward[s, a, s2], copies),
                 np.tile(s2, copies), np.zeros(len(s) * copies, dtype=bool))


def converge_soft_q(seed, updates=100_000, lr=0.005):
    """Soft Q-learning on a seeded 5x3 MDP from the large-buffer limit.

    The buffer holds every (s, a, s') triple and is sampled with weight
    P(s'|s, a), i.e. uniform (s, a) with exact next-state frequencies.
    """
    m = random_mdp(seed, 5, 3, 0.9)
    learner = SoftQLearner(5, 3, 0.9, alpha=0.2, lr=lr, polyak=0.99)
    rng = np.random.default_rng(seed)
    b = full_batch(m)
    buf = ReplayBuffer()
    for i in range(len(b)):
        buf.add(b.state[i], b.action[i], b.reward[i], b.next_state[i], False)
    w = m.transition[b.state, b.action, b.next_state]
    p = w / w.sum()
    for _ in range(updates // 100):
        for row in rng.choice(len(b), size=(100, 32), p=p):
            soft_q_update(learner, buf.take(row))
    return m, learner


def soft_gap(m, learner):
    """Max-norm distance between the Q table and the exact soft evaluation of its own policy."""
    pi = TabularPolicy(learner.policy())
    return float(np.max(np.abs(soft_policy_evaluation(m, pi, learner.alpha).q_soft - learner.q)))


def finite_difference_check(seed, probes=1, h=1e-5):
    rng = np.random.default_rng(seed)
    n_s, n_a = int(rng.integers(2, 7)), int(rng.integers(1, 4))
    logits = rng.normal(scale=2.0, size=(n_s, n_a, n_s))
    n = int(rng.integers(1, 40))
    s, a, s2 = rng.integers(n_s, size=n), rng.integers(n_a, size=n), rng.integers(n_s, size=n)
    w_hat = normalize_weights(rng.exponential(size=logits.shape), 0.5)
    _, g = rto_tabular_loss_grad(logits, s, a, s2, w_hat)
    errs = []
    for _ in range(probes):
        d = rng.normal(size=logits.shape)
        lp, _ = rto_tabular_loss_grad(logits + h * d, s, a, s2, w_hat)
        lm, _ = rto_tabular_loss_grad(logits - h * d, s, a, s2, w_hat)
        fd = (lp - lm) / (2 * h)
        an = float((g * d).sum())
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return max(errs)


def richardson_ratio(params, s, action, h):
    """(D(h) - D(h/2)) / (D(h/2) - D(h/4)) for central differences D; tends to 4 for O(h^2) error.

    Taken on the component with the largest denominator.
    """
    d = [cartpole_step_gradient(params, s, action, h / k) for k in (1, 2, 4)]
    num, den = d[0] - d[1], d[1] - d[2]
    i = int(np.argmax(np.abs(den)))
    return num[i] / den[i]


def random_cartpole_states(rng, n):
    lo = np.array([-2.0, -2.0, -0.2, -2.0])
    return rng.uniform(lo, -lo, size=(n, 4))


# -- acceptance report: one line per criterion, shown after the run

ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

"""Seeded tabular source/target pairs and a softmax-parameterized dynamics model."""
from __future__ import annotations

import numpy as np

from ..mdp import TabularMdp, softmax


def _dirichlet_rows(rng, n_states, n_actions):
    rows = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    return rows / rows.sum(axis=2, keepdims=True)


def random_mdp_pair(seed, n_states, n_actions, gamma, mix_weight):
    """Source MDP with Dirichlet(1) rows and a target mixed toward an independent draw.

    Rewards are uniform in [0, 1] on (s, a, s') and shared, as are the
    initial distribution and discount. The independent draw is taken
    before ``mix_weight`` is used, so for a fixed seed the target moves
    along a straight line as ``mix_weight`` grows.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be positive")
    if not 0.0 <= mix_weight <= 1.0:
        raise ValueError("mix_weight must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    p_src = _dirichlet_rows(rng, n_states, n_actions)
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_states))
    rho = rng.dirichlet(np.ones(n_states))
    rho = rho / rho.sum()
    p_other = _dirichlet_rows(rng, n_states, n_actions)
    # Convex mix of normalized rows; left unrenormalized so mix 0 is bit-identical.
    p_tgt = (1.0 - mix_weight) * p_src + mix_weight * p_other
    source = TabularMdp(p_src, reward, rho, gamma)
    target = TabularMdp(p_tgt, reward, rho, gamma)
    return source, target


def gridworld_pair(size=4, slip_source=0.05, slip_target=0.3, gamma=0.95):
    """Slippery gridworld: goal in the far corner, four moves.

    With probability ``slip`` the agent moves in a uniformly random
    direction instead of the intended one. Reward 1 on entering the goal,
    which is absorbing.
    """
    n = size * size
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    goal = n - 1

    def build(slip):
        p = np.zeros((n, 4, n))
        for s in range(n):
            if s == goal:
                p[s, :, s] = 1.0
                continue
            r, c = divmod(s, size)
            for a in range(4):
                for b, (dr, dc) in enumerate(moves):
                    w = (1.0 - slip) * (a == b) + slip / 4.0
                    rr = min(max(r + dr, 0), size - 1)
                    cc = min(max(c + dc, 0), size - 1)
                    p[s, a, rr * size + cc] += w
        return p

    reward = np.zeros((n, 4, n))
    reward[:, :, goal] = 1.0
    reward[goal, :, goal] = 0.0
    rho = np.zeros(n)
    rho[0] = 1.0
    return (
        TabularMdp(build(slip_source), reward, rho, gamma),
        TabularMdp(build(slip_target), reward, rho, gamma),
    )


class TabularDynamicsModel:
    """Trainable P_phi(s'|s,a) = softmax(logits[s, a, :])."""

    def __init__(self, logits):
        self.logits = np.array(logits, dtype=float)

    @classmethod
    def from_transition(cls, transition, floor=1e-8):
        p = np.maximum(np.asarray(transition, dtype=float), floor)
        return cls(np.log(p))

    @property
    def transition(self) -> np.ndarray:
        p = softmax(self.logits)
        return p / p.sum(axis=2, keepdims=True)

    def as_mdp(self, like: TabularMdp) -> TabularMdp:
        return like.with_transition(self.transition)

    def copy(self) -> "TabularDynamicsModel":
        return TabularDynamicsModel(self.logits.copy())

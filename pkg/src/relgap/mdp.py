"""Finite MDPs and exact solvers.

Every infinite discounted sum here is computed with a direct linear solve.
Iterative schemes (value iteration, forward propagation of marginals) are
kept only where a finite object is wanted or as cross-checks in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with rewards on (s, a, s') triples.

    ``transition[s, a, s2]`` and ``reward[s, a, s2]``; rewards of shape
    (S, A) or (S,) are broadcast to the triple form.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    discount: float
    r_max: float = field(init=False)

    def __post_init__(self):
        p = _frozen(self.transition)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        n_s, n_a, _ = p.shape
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("transition entries must be finite and non-negative")
        if np.max(np.abs(p.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ValueError("transition rows must sum to 1")

        r = np.asarray(self.reward, dtype=float)
        if r.shape == (n_s,):
            r = np.broadcast_to(r[:, None, None], (n_s, n_a, n_s))
        elif r.shape == (n_s, n_a):
            r = np.broadcast_to(r[:, :, None], (n_s, n_a, n_s))
        elif r.shape != (n_s, n_a, n_s):
            raise ValueError(f"reward shape {r.shape} incompatible with {p.shape}")
        r = _frozen(r)
        if not np.all(np.isfinite(r)):
            raise ValueError("reward entries must be finite")

        rho = _frozen(self.initial_dist)
        if rho.shape != (n_s,):
            raise ValueError(f"initial_dist must have shape ({n_s},), got {rho.shape}")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > PROB_TOL:
            raise ValueError("initial_dist must be a probability vector")

        gamma = float(self.discount)
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {gamma}")

        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "discount", gamma)
        object.__setattr__(self, "r_max", float(r.max()))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def expected_reward(self) -> np.ndarray:
        """r(s, a) = sum_s' P(s'|s,a) r(s,a,s')."""
        return np.einsum("ijk,ijk->ij", self.transition, self.reward)

    def with_transition(self, transition) -> "TabularMdp":
        return TabularMdp(transition, self.reward, self.initial_dist, self.discount)

    def same_task(self, other: "TabularMdp") -> bool:
        """True when rewards, start distribution and discount coincide."""
        return (
            self.transition.shape == other.transition.shape
            and self.discount == other.discount
            and np.array_equal(self.reward, other.reward)
            and np.array_equal(self.initial_dist, other.initial_dist)
        )


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ValueError(f"policy must be a (S, A) matrix, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("policy entries must be finite and non-negative")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > PROB_TOL:
            raise ValueError("policy rows must sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def normalized(cls, weights) -> "TabularPolicy":
        """Build a policy from non-negative weights, renormalizing rows exactly."""
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum(axis=1, keepdims=True))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @property
    def full_support(self) -> bool:
        return bool(np.all(self.probs > 0))

    def entropy(self) -> np.ndarray:
        p = self.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(p), 0.0)
        return -terms.sum(axis=1)


@dataclass(frozen=True)
class ValueBundle:
    v: np.ndarray
    q: np.ndarray
    advantage: np.ndarray
    j: float


@dataclass(frozen=True)
class SoftValueBundle:
    q_soft: np.ndarray
    v_soft: np.ndarray
    temperature: float
    j_soft: float


@dataclass(frozen=True)
class OccupancyReport:
    d_state: np.ndarray
    d_state_action: np.ndarray
    time_marginals: np.ndarray  # shape (T + 1, S)
    horizon_T: int


def _check_pair(mdp: TabularMdp, pi: TabularPolicy):
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {pi.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def state_transition(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    """P_pi[s, s'] = sum_a pi(a|s) P(s'|s,a)."""
    return np.einsum("ij,ijk->ik", pi.probs, mdp.transition)


def _solve(a, b):
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:  # cannot happen for gamma < 1
        raise RuntimeError("singular Bellman system") from exc


def policy_evaluation(mdp: TabularMdp, pi: TabularPolicy) -> ValueBundle:
    _check_pair(mdp, pi)
    r_sa = mdp.expected_reward
    r_pi = np.einsum("ij,ij->i", pi.probs, r_sa)
    p_pi = state_transition(mdp, pi)
    v = _solve(np.eye(mdp.n_states) - mdp.discount * p_pi, r_pi)
    q = r_sa + mdp.discount * mdp.transition @ v
    return ValueBundle(v=v, q=q, advantage=q - v[:, None], j=float(mdp.initial_dist @ v))


def soft_policy_evaluation(mdp: TabularMdp, pi: TabularPolicy, alpha: float) -> SoftValueBundle:
    """Fixed point of the soft Bellman operator for a fixed policy."""
    _check_pair(mdp, pi)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not pi.full_support:
        raise ValueError("soft evaluation needs a full-support policy")
    log_pi = np.log(pi.probs)
    r_sa = mdp.expected_reward
    # Soft value obeys v = r_pi + alpha * H_pi + gamma P_pi v.
    bonus = np.einsum("ij,ij->i", pi.probs, r_sa - alpha * log_pi)
    p_pi = state_transition(mdp, pi)
    v_soft = _solve(np.eye(mdp.n_states) - mdp.discount * p_pi, bonus)
    q_soft = r_sa + mdp.discount * mdp.transition @ v_soft
    return SoftValueBundle(
        q_soft=q_soft, v_soft=v_soft, temperature=float(alpha), j_soft=float(mdp.initial_dist @ v_soft)
    )


def soft_state_value(q: np.ndarray, probs: np.ndarray, alpha: float) -> np.ndarray:
    """V(s) = sum_a pi(a|s) (q(s,a) - alpha log pi(a|s))."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * (q - alpha * np.log(probs)), 0.0)
    return terms.sum(axis=-1)


def truncation_horizon(gamma: float, truncation_tol: float) -> int:
    """Smallest T with gamma^(T+1) / (1 - gamma) < truncation_tol."""
    if truncation_tol <= 0:
        raise ValueError("truncation_tol must be positive")
    t = 0
    while gamma ** (t + 1) / (1.0 - gamma) >= truncation_tol:
        t += 1
    return t


def time_marginals(mdp: TabularMdp, pi: TabularPolicy, horizon: int) -> np.ndarray:
    """State distributions p_0..p_horizon by forward propagation."""
    _check_pair(mdp, pi)
    p_pi = state_transition(mdp, pi)
    out = np.empty((horizon + 1, mdp.n_states))
    out[0] = mdp.initial_dist
    for t in range(horizon):
        out[t + 1] = out[t] @ p_pi
    return out


def discounted_occupancy(mdp: TabularMdp, pi: TabularPolicy, truncation_tol: float = 1e-10) -> OccupancyReport:
    _check_pair(mdp, pi)
    gamma = mdp.discount
    p_pi = state_transition(mdp, pi)
    d = _solve(np.eye(mdp.n_states) - gamma * p_pi.T, (1.0 - gamma) * mdp.initial_dist)
    horizon = truncation_horizon(gamma, truncation_tol)
    return OccupancyReport(
        d_state=d,
        d_state_action=d[:, None] * pi.probs,
        time_marginals=time_marginals(mdp, pi, horizon),
        horizon_T=horizon,
    )


def occupancy(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    """Normalized discounted state occupancy only (no marginals)."""
    _check_pair(mdp, pi)
    p_pi = state_transition(mdp, pi)
    return _solve(np.eye(mdp.n_states) - mdp.discount * p_pi.T, (1.0 - mdp.discount) * mdp.initial_dist)


def soft_greedy_improvement(q_soft, alpha: float) -> TabularPolicy:
    """pi(a|s) proportional to exp(q(s,a) / alpha)."""
    q = np.asarray(q_soft, dtype=float)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not np.all(np.isfinite(q)):
        raise ValueError("q_soft must be finite")
    return TabularPolicy(softmax(q / alpha))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_value_iteration(mdp: TabularMdp, alpha: float, tol: float = 1e-12, max_iter: int = 1_000_000):
    """Optimal soft Q and its Boltzmann policy.

    Returns (q_star, pi_star). The soft-optimal policy maximizes the
    entropy-regularized return; its plain return is reported by callers
    via :func:`policy_evaluation`.
    """
    r_sa = mdp.expected_reward
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        m = q.max(axis=1)
        v = m + alpha * np.log(np.exp((q - m[:, None]) / alpha).sum(axis=1))
        q_new = r_sa + mdp.discount * mdp.transition @ v
        if np.max(np.abs(q_new - q)) < tol:
            q = q_new
            break
        q = q_new
    return q, soft_greedy_improvement(q, alpha)


def sample_trajectory_returns(mdp: TabularMdp, pi: TabularPolicy, n: int, horizon: int, rng) -> np.ndarray:
    """Discounted returns of ``n`` vectorized rollouts truncated at ``horizon``."""
    s = rng.choice(mdp.n_states, size=n, p=mdp.initial_dist)
    cum_pi = np.cumsum(pi.probs, axis=1)
    cum_p = np.cumsum(mdp.transition, axis=2)
    ret = np.zeros(n)
    disc = 1.0
    for _ in range(horizon):
        a = np.minimum((rng.random(n)[:, None] > cum_pi[s]).sum(axis=1), mdp.n_actions - 1)
        s2 = np.minimum((rng.random(n)[:, None] > cum_p[s, a]).sum(axis=1), mdp.n_states - 1)
        ret += disc * mdp.reward[s, a, s2]
        disc *= mdp.discount
        s = s2
    return ret

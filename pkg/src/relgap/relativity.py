"""Return-gap decomposition across two MDPs and numerical checks of its bounds.

All expectations over trajectories are realized with exact discounted
occupancies or forward-propagated time marginals, so every identity can be
checked to round-off.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np

from .mdp import (
    TabularMdp,
    TabularPolicy,
    occupancy,
    policy_evaluation,
    time_marginals,
)
from .envs.tabular import random_mdp_pair

SLACK_TOL = -1e-9

BOUND_NAMES = ("gap_identity", "theorem2", "proposition1", "theorem3", "marginal_lemma", "value_lemma")


@dataclass(frozen=True)
class GapReport:
    total_gap: float
    dynamics_induced: float
    policy_induced: float
    direct_total: float


@dataclass(frozen=True)
class BoundConstants:
    delta1: float
    delta2: float
    eps_adv: float
    r_max: float
    c1: float
    c2: float
    c3: float
    delta_model: float = 0.0
    c3_policy_variant: float = 0.0


@dataclass(frozen=True)
class BoundCheckReport:
    instance_id: int
    bound_name: str
    lhs: float
    rhs: float
    slack: float
    holds: bool

    @classmethod
    def lower(cls, seed, name, lhs, rhs):
        slack = float(lhs - rhs)
        return cls(seed, name, float(lhs), float(rhs), slack, slack >= SLACK_TOL)

    @classmethod
    def upper(cls, seed, name, lhs, rhs):
        slack = float(rhs - lhs)
        return cls(seed, name, float(lhs), float(rhs), slack, slack >= SLACK_TOL)


def _check_same_task(*mdps: TabularMdp):
    first = mdps[0]
    for m in mdps[1:]:
        if m.transition.shape != first.transition.shape:
            raise ValueError("MDPs must share state and action spaces")
        if not np.array_equal(m.reward, first.reward):
            raise ValueError("MDPs must share the reward tensor")
        if not np.array_equal(m.initial_dist, first.initial_dist):
            raise ValueError("MDPs must share the initial state distribution")
        if m.discount != first.discount:
            raise ValueError("MDPs must share the discount")


def _check_policies(mdp: TabularMdp, *pis: TabularPolicy):
    for pi in pis:
        if pi.probs.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError("policy shape does not match the MDP")


def _backup(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """sum_s' P(s'|s,a) (r(s,a,s') + gamma v(s')) as an (S, A) matrix."""
    return np.einsum("ijk,ijk->ij", mdp.transition, mdp.reward + mdp.discount * v[None, None, :])


def relativity_gap(p_prime: TabularMdp, pi: TabularPolicy, p: TabularMdp, pi_prime: TabularPolicy) -> GapReport:
    """Split J(P', pi) - J(P, pi') into dynamics- and policy-induced parts."""
    _check_same_task(p_prime, p)
    _check_policies(p, pi, pi_prime)
    gamma = p.discount
    vals_p_pi = policy_evaluation(p, pi)
    vals_p_piold = policy_evaluation(p, pi_prime)

    d_dyn = occupancy(p_prime, pi)[:, None] * pi.probs
    td = _backup(p_prime, vals_p_pi.v) - vals_p_pi.q
    dynamics_induced = float((d_dyn * td).sum() / (1.0 - gamma))

    d_pol = occupancy(p, pi)[:, None] * pi.probs
    policy_induced = float((d_pol * vals_p_piold.advantage).sum() / (1.0 - gamma))

    direct = policy_evaluation(p_prime, pi).j - vals_p_piold.j
    return GapReport(
        total_gap=dynamics_induced + policy_induced,
        dynamics_induced=dynamics_induced,
        policy_induced=policy_induced,
        direct_total=float(direct),
    )


def tv_divergence_dynamics(p_prime: TabularMdp, p: TabularMdp) -> float:
    a = p_prime.transition if isinstance(p_prime, TabularMdp) else np.asarray(p_prime)
    b = p.transition if isinstance(p, TabularMdp) else np.asarray(p)
    if a.shape != b.shape:
        raise ValueError("dynamics shapes differ")
    return float(min(1.0, 0.5 * np.abs(a - b).sum(axis=-1).max()))


def tv_divergence_policy(pi_prime: TabularPolicy, pi: TabularPolicy) -> float:
    if pi_prime.probs.shape != pi.probs.shape:
        raise ValueError("policy shapes differ")
    return float(min(1.0, 0.5 * np.abs(pi_prime.probs - pi.probs).sum(axis=-1).max()))


def surrogate_policy(p_prime: TabularMdp, p: TabularMdp, pi: TabularPolicy, pi_prime: TabularPolicy) -> float:
    """Dynamics gap of ``pi`` approximated with states and values from ``pi_prime``."""
    _check_same_task(p_prime, p)
    _check_policies(p, pi, pi_prime)
    vals = policy_evaluation(p, pi_prime)
    d = occupancy(p_prime, pi_prime)
    td = _backup(p_prime, vals.v) - vals.q
    return float((d[:, None] * pi.probs * td).sum() / (1.0 - p.discount))


def surrogate_dynamics(p_prime: TabularMdp, p_phi: TabularMdp, p_phi_old: TabularMdp, pi: TabularPolicy) -> float:
    """Dynamics gap of ``p_phi`` with next-state values taken under ``p_phi_old``."""
    _check_same_task(p_prime, p_phi, p_phi_old)
    _check_policies(p_prime, pi)
    v_old = policy_evaluation(p_phi_old, pi).v
    d_sa = occupancy(p_prime, pi)[:, None] * pi.probs
    diff = _backup(p_prime, v_old) - _backup(p_phi, v_old)
    return float((d_sa * diff).sum() / (1.0 - p_prime.discount))


def _policy_gap_factor(gamma, delta2):
    return min(delta2 * (gamma**2 + 2.0) / (1.0 - gamma), 1.0 + delta2 / (1.0 - gamma))


def bound_constants(p_prime, p, pi, pi_prime, p_phi_old=None) -> BoundConstants:
    """Divergences and the three bound constants.

    ``c3`` treats ``p`` as the model P_phi and ``p_phi_old`` as P_phi';
    without ``p_phi_old`` the model divergence is taken as zero, so
    ``c3 = 0`` and the Theorem-3 check reduces to an exact identity.
    """
    _check_same_task(p_prime, p)
    _check_policies(p, pi, pi_prime)
    gamma = p.discount
    r_max = p.r_max
    delta1 = tv_divergence_dynamics(p_prime, p)
    delta2 = tv_divergence_policy(pi_prime, pi)
    eps_adv = float(np.abs(policy_evaluation(p, pi).advantage).max())
    scale = gamma / (1.0 - gamma) ** 2
    factor = _policy_gap_factor(gamma, delta2)
    c1 = 4.0 * scale * r_max * delta1 * factor
    c2 = 2.0 * scale * eps_adv * (delta1 + 2.0 * delta2**2) + 4.0 * scale * r_max * factor
    delta_model = 0.0 if p_phi_old is None else tv_divergence_dynamics(p, p_phi_old)
    c3 = 4.0 * scale * delta1 * r_max * min(delta_model * (gamma**2 + 1.0) / (1.0 - gamma), 1.0)
    c3_policy = 4.0 * scale * delta1 * r_max * min(delta2 * (gamma**2 + 1.0) / (1.0 - gamma), 1.0)
    return BoundConstants(
        delta1=delta1,
        delta2=delta2,
        eps_adv=eps_adv,
        r_max=r_max,
        c1=c1,
        c2=c2,
        c3=c3,
        delta_model=delta_model,
        c3_policy_variant=c3_policy,
    )


@dataclass(frozen=True)
class RelativityInstance:
    """Target P', source P (also the model P_phi), old model P_phi', and two policies."""

    seed: int
    p_prime: TabularMdp
    p: TabularMdp
    p_phi_old: TabularMdp
    pi: TabularPolicy
    pi_prime: TabularPolicy

    @property
    def gamma(self):
        return self.p.discount


def _floored_policy(rng, n_states, n_actions, floor=1e-3):
    w = rng.dirichlet(np.ones(n_actions), size=n_states)
    return floor + (1.0 - n_actions * floor) * w


def make_instance(
    seed: int,
    state_range=(2, 10),
    action_range=(2, 4),
    gammas=(0.5, 0.9, 0.95),
    mix_range=(0.0, 1.0),
    model_step_range=(0.0, 0.2),
) -> RelativityInstance:
    rng = np.random.default_rng([seed, 0x5EED])
    n_s = int(rng.integers(state_range[0], state_range[1] + 1))
    n_a = int(rng.integers(action_range[0], action_range[1] + 1))
    gamma = float(gammas[int(rng.integers(len(gammas)))])
    mix = float(rng.uniform(*mix_range))
    source, target = random_mdp_pair(int(rng.integers(2**31)), n_s, n_a, gamma, mix)

    pi_prime = _floored_policy(rng, n_s, n_a)
    blend = rng.uniform()
    pi = (1.0 - blend) * pi_prime + blend * _floored_policy(rng, n_s, n_a)

    step = rng.uniform(*model_step_range)
    other = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
    p_old = (1.0 - step) * source.transition + step * other
    p_old = p_old / p_old.sum(axis=2, keepdims=True)
    return RelativityInstance(
        seed=seed,
        p_prime=target,
        p=source,
        p_phi_old=source.with_transition(p_old),
        pi=TabularPolicy.normalized(pi),
        pi_prime=TabularPolicy.normalized(pi_prime),
    )


def instance_from_mdp(mdp: TabularMdp, seed: int, mix_range=(0.0, 1.0), model_step_range=(0.0, 0.2)) -> RelativityInstance:
    """Like ``make_instance`` but with ``mdp`` as the source; the target mixes in random rows."""
    rng = np.random.default_rng([seed, 0xF11E])
    n_s, n_a = mdp.n_states, mdp.n_actions

    def mixed(weight):
        other = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
        p = (1.0 - weight) * mdp.transition + weight * other
        return p / p.sum(axis=2, keepdims=True)

    target = mdp.with_transition(mixed(rng.uniform(*mix_range)))
    pi_prime = _floored_policy(rng, n_s, n_a)
    blend = rng.uniform()
    pi = (1.0 - blend) * pi_prime + blend * _floored_policy(rng, n_s, n_a)
    p_old = mdp.with_transition(mixed(rng.uniform(*model_step_range)))
    return RelativityInstance(seed, target, mdp, p_old, TabularPolicy.normalized(pi), TabularPolicy.normalized(pi_prime))


def verify_gap_identity(inst: RelativityInstance) -> BoundCheckReport:
    g = relativity_gap(inst.p_prime, inst.pi, inst.p, inst.pi_prime)
    err = abs(g.total_gap - g.direct_total)
    return BoundCheckReport.upper(inst.seed, "gap_identity", err, 1e-8)


def verify_theorem2(inst: RelativityInstance) -> BoundCheckReport:
    delta = relativity_gap(inst.p_prime, inst.pi, inst.p, inst.pi).dynamics_induced
    lpi = surrogate_policy(inst.p_prime, inst.p, inst.pi, inst.pi_prime)
    c = bound_constants(inst.p_prime, inst.p, inst.pi, inst.pi_prime)
    return BoundCheckReport.lower(inst.seed, "theorem2", delta, lpi - c.c1)


def proposition1_surrogate(p_prime, p, pi, pi_prime) -> float:
    """Importance-weighted one-step objective under (P', pi') with values of (P, pi')."""
    vals = policy_evaluation(p, pi_prime)
    d = occupancy(p_prime, pi_prime)
    # E_{a ~ pi'} [pi/pi' * g] is computed as sum_a pi * g, which is the same
    # quantity whenever pi' has full support.
    ratio = pi.probs / pi_prime.probs
    g = _backup(p_prime, vals.v) - vals.v[:, None]
    return float((d[:, None] * pi_prime.probs * ratio * g).sum() / (1.0 - p.discount))


def verify_proposition1(inst: RelativityInstance) -> BoundCheckReport:
    lhs = policy_evaluation(inst.p_prime, inst.pi).j - policy_evaluation(inst.p, inst.pi_prime).j
    sur = proposition1_surrogate(inst.p_prime, inst.p, inst.pi, inst.pi_prime)
    c = bound_constants(inst.p_prime, inst.p, inst.pi, inst.pi_prime)
    return BoundCheckReport.lower(inst.seed, "proposition1", lhs, sur - c.c2)


def verify_theorem3(inst: RelativityInstance) -> BoundCheckReport:
    delta = relativity_gap(inst.p_prime, inst.pi, inst.p, inst.pi).dynamics_induced
    lphi = surrogate_dynamics(inst.p_prime, inst.p, inst.p_phi_old, inst.pi)
    c = bound_constants(inst.p_prime, inst.p, inst.pi, inst.pi_prime, inst.p_phi_old)
    return BoundCheckReport.upper(inst.seed, "theorem3", abs(delta), abs(lphi) + c.c3)


def verify_marginal_lemma(inst: RelativityInstance, t_max: int = 50) -> BoundCheckReport:
    """Worst slack over t <= t_max of both marginal-difference bounds."""
    delta1 = tv_divergence_dynamics(inst.p_prime, inst.p)
    delta2 = tv_divergence_policy(inst.pi_prime, inst.pi)
    m_pp = time_marginals(inst.p_prime, inst.pi, t_max)
    m_p = time_marginals(inst.p, inst.pi, t_max)
    m_pq = time_marginals(inst.p, inst.pi_prime, t_max)
    t = np.arange(t_max + 1)
    lhs_dyn = np.abs(m_pp - m_p).sum(axis=1)
    lhs_pol = np.abs(m_pq - m_p).sum(axis=1)
    # t = 0 is tight by construction (shared start distribution); report the worst t >= 1.
    slack_dyn = (2 * t * delta1 - lhs_dyn)[1:]
    slack_pol = (2 * t * delta2 - lhs_pol)[1:]
    if abs(lhs_dyn[0]) > 1e-12 or abs(lhs_pol[0]) > 1e-12:
        return BoundCheckReport.upper(inst.seed, "marginal_lemma", max(lhs_dyn[0], lhs_pol[0]), 0.0)
    if t_max == 0:
        return BoundCheckReport.upper(inst.seed, "marginal_lemma", 0.0, 0.0)
    if slack_dyn.min() <= slack_pol.min():
        k = int(slack_dyn.argmin()) + 1
        return BoundCheckReport.upper(inst.seed, "marginal_lemma", lhs_dyn[k], 2 * k * delta1)
    k = int(slack_pol.argmin()) + 1
    return BoundCheckReport.upper(inst.seed, "marginal_lemma", lhs_pol[k], 2 * k * delta2)


def verify_value_lemma(inst: RelativityInstance) -> BoundCheckReport:
    """Worst state of the two single-state value-difference bounds at t = 0."""
    gamma = inst.gamma
    r_max = inst.p.r_max
    delta1 = tv_divergence_dynamics(inst.p_prime, inst.p)
    delta2 = tv_divergence_policy(inst.pi_prime, inst.pi)
    v = policy_evaluation(inst.p, inst.pi).v
    gap_dyn = np.abs(policy_evaluation(inst.p_prime, inst.pi).v - v).max()
    gap_pol = np.abs(policy_evaluation(inst.p, inst.pi_prime).v - v).max()
    cap = 2.0 * r_max / (1.0 - gamma)
    rhs_dyn = min(2.0 * r_max * delta1 / (1.0 - gamma) ** 2, cap)
    rhs_pol = min(2.0 * r_max * delta2 / (1.0 - gamma) ** 2, cap)
    if rhs_dyn - gap_dyn <= rhs_pol - gap_pol:
        return BoundCheckReport.upper(inst.seed, "value_lemma", gap_dyn, rhs_dyn)
    return BoundCheckReport.upper(inst.seed, "value_lemma", gap_pol, rhs_pol)


VERIFIERS = {
    "gap_identity": verify_gap_identity,
    "theorem2": verify_theorem2,
    "proposition1": verify_proposition1,
    "theorem3": verify_theorem3,
    "marginal_lemma": verify_marginal_lemma,
    "value_lemma": verify_value_lemma,
}


def run_suite(name, seeds, t_max=50, mdp: TabularMdp | None = None, **instance_kw):
    """Run one verifier over seeded instances; ``mdp`` fixes the source of every instance."""
    fn = VERIFIERS[name]
    out = []
    for seed in seeds:
        if mdp is None:
            inst = make_instance(seed, **instance_kw)
        else:
            keep = {k: v for k, v in instance_kw.items() if k in ("mix_range", "model_step_range")}
            inst = instance_from_mdp(mdp, seed, **keep)
        out.append(fn(inst, t_max) if name == "marginal_lemma" else fn(inst))
    return out


def slack_summary(reports):
    slacks = np.array([r.slack for r in reports])
    return {
        "n": len(reports),
        "violations": int(sum(not r.holds for r in reports)),
        "min_slack": float(slacks.min()) if len(slacks) else float("nan"),
        "mean_slack": float(slacks.mean()) if len(slacks) else float("nan"),
    }


CSV_FIELDS = ("seed", "bound_name", "lhs", "rhs", "slack", "holds")


def write_reports_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in reports:
            d = asdict(r)
            w.writerow([d["instance_id"], d["bound_name"], repr(d["lhs"]), repr(d["rhs"]), repr(d["slack"]), str(d["holds"]).lower()])

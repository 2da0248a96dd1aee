import numpy as np
import pytest

from relgap.envs.cartpole import CartPoleEnv, CartPoleParams
from relgap.envs.tabular import TabularDynamicsModel, random_mdp_pair
from relgap.config import PretrainConfig, TabularSetup
from relgap.experiments import pretrain_tabular, tabular_pair
from relgap.mdp import TabularPolicy, policy_evaluation, softmax, time_marginals
from relgap.soft_rl import SOURCE, TARGET, Batch, ReplayBuffer, SoftQLearner, collect_episode
from relgap.transfer import (
    Actor,
    CartPoleWorld,
    RtoWeight,
    TabularWorld,
    TransferConfig,
    TransferLog,
    kl_step,
    max_tv,
    normalize_weights,
    physical_raw_weights,
    rpo_update,
    rpto_run,
    rto_physical_loss_grad,
    rto_tabular_loss_grad,
    rto_update_physical,
    rto_update_tabular,
    source_turn,
    tabular_raw_weights,
)

from conftest import finite_difference_check

CFG = TransferConfig()


def tabular_batch(mdp, rng, n):
    s = rng.integers(mdp.n_states, size=n)
    a = rng.integers(mdp.n_actions, size=n)
    cum = np.cumsum(mdp.transition[s, a], axis=1)
    s2 = np.minimum((rng.random(n)[:, None] > cum).sum(axis=1), mdp.n_states - 1)
    return Batch(s, a, mdp.reward[s, a, s2], s2, np.zeros(n, dtype=bool))


def cartpole_batch(params, rng, n):
    env = CartPoleEnv(params)
    buf = ReplayBuffer(obs_dim=4)
    while buf.size < n:
        collect_episode(env, np.full((env.n_states, 2), 0.5), rng, buf)
    return buf.take(np.arange(n))


# -- configuration

def test_config_validation():
    with pytest.raises(ValueError):
        TransferConfig(alternate_frequency=0)
    with pytest.raises(ValueError):
        TransferConfig(rto_min_weight=0.0)
    with pytest.raises(ValueError):
        TransferConfig(rpo_lr=1.5)
    with pytest.raises(ValueError):
        TransferConfig.from_config({"bogus": "1"})
    c = TransferConfig.from_config({"alternate_frequency": "3", "rpo_lr": "0.5"})
    assert c.alternate_frequency == 3 and c.rpo_lr == 0.5


def test_published_defaults():
    # one source batch after every four target batches, one dynamics update per step, minimum weight 0.5
    c = TransferConfig()
    assert (c.alternate_frequency, c.dynamics_replay_ratio, c.rto_min_weight) == (5, 1, 0.5)
    actor, turns = Actor(np.full((2, 2), 0.5)), []
    for _ in range(10):
        turns.append(source_turn(actor, c))
        actor.updates += 1
    assert turns == ([False] * 4 + [True]) * 2
    assert CartPoleParams().pole_length == 1.0


# -- RPO

def test_kl_step_limits():
    p = np.array([[0.2, 0.8]])
    g = np.array([[0.9, 0.1]])
    assert np.allclose(kl_step(p, g, 0.0), p)
    assert np.allclose(kl_step(p, g, 1.0), g)
    mid = kl_step(p, g, 0.5)
    assert np.allclose(mid, np.sqrt(p * g) / np.sqrt(p * g).sum())
    # complementary zeros stay finite
    assert np.all(np.isfinite(kl_step(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 0.3)))


@pytest.mark.parametrize("f,n", [(5, 23), (1, 7), (3, 30), (7, 6)])
def test_source_alternation_count(f, n):
    cfg = TransferConfig(alternate_frequency=f)
    actor = Actor(np.full((3, 2), 0.5))
    tb = Batch(np.array([0]), np.array([0]), np.array([0.0]), np.array([1]), np.array([False]))
    sb = Batch(np.array([2]), np.array([0]), np.array([0.0]), np.array([1]), np.array([False]))
    tags = [rpo_update(actor, np.zeros((3, 2)), 0.2, tb, sb, cfg) for _ in range(n)]
    assert actor.source_updates == n // f == tags.count(SOURCE)
    assert tags.count(TARGET) == n - n // f
    assert all((t == SOURCE) == ((i + 1) % f == 0) for i, t in enumerate(tags))


def test_rpo_moves_only_batch_states():
    actor = Actor(np.full((3, 2), 0.5))
    q = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    tb = Batch(np.array([1, 1]), np.array([0, 1]), np.zeros(2), np.array([0, 0]), np.zeros(2, dtype=bool))
    rpo_update(actor, q, 0.2, tb, None, CFG)
    assert np.array_equal(actor.probs[[0, 2]], np.full((2, 2), 0.5))
    assert actor.probs[1, 0] > 0.5


def test_rpo_errors():
    actor = Actor(np.full((3, 2), 0.5))
    tb = Batch(np.array([0]), np.array([0]), np.zeros(1), np.array([0]), np.zeros(1, dtype=bool))
    with pytest.raises(ValueError):
        rpo_update(actor, np.zeros((4, 2)), 0.2, tb, None, CFG)
    cfg = TransferConfig(alternate_frequency=1)
    with pytest.raises(ValueError):
        rpo_update(actor, np.zeros((3, 2)), 0.2, tb, None, cfg)
    empty = Batch(*(np.zeros(0, dtype=t) for t in (int, int, float, int, bool)))
    with pytest.raises(ValueError):
        rpo_update(actor, np.zeros((3, 2)), 0.2, empty, None, CFG)


def test_rpo_equals_sac_step_when_dynamics_coincide():
    # Same MDP for "source" and "target": identical seeded batches give identical
    # actors whether the states are labelled target or source.
    m = random_mdp_pair(2, 6, 3, 0.9, 0.0)[0]
    q = np.random.default_rng(0).normal(size=(6, 3))
    cfg = TransferConfig(alternate_frequency=4)
    rpo = Actor(np.full((6, 3), 1 / 3))
    sac = rpo.probs.copy()
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    for _ in range(40):
        tb = tabular_batch(m, r1, 16)
        sb = tabular_batch(m, r1, 16) if source_turn(rpo, cfg) else None
        rpo_update(rpo, q, 0.2, tb, sb, cfg)
        # plain soft policy improvement step on freshly sampled states
        # mirror the draws: on a source turn the second batch is the one used
        b = tabular_batch(m, r2, 16)
        if rpo.updates % cfg.alternate_frequency == 0:
            b = tabular_batch(m, r2, 16)
        st = np.unique(b.state)
        sac[st] = kl_step(sac[st], softmax(q[st] / 0.2), cfg.rpo_lr)
    assert np.max(np.abs(rpo.probs - sac)) <= 1e-12


def test_actor_copy_and_entropy():
    a = Actor(np.full((2, 2), 0.5))
    b = a.copy()
    b.probs[0] = [1.0, 0.0]
    assert a.probs[0, 0] == 0.5
    assert a.entropy() == pytest.approx(np.log(2))
    assert b.entropy() == pytest.approx(np.log(2) / 2)


# -- RTO weights

def test_normalization_extremes_exact():
    rng = np.random.default_rng(0)
    for eps in (0.5, 1e-3, 2.0):
        raw = rng.exponential(size=200)
        w = normalize_weights(raw, eps)
        assert w.min() == eps and w.max() == 1 + eps


def test_normalization_degenerate_and_clipped():
    assert np.all(normalize_weights(np.full(5, 3.0), 0.5) == 0.5)
    w = normalize_weights(np.array([-1.0, 0.5, 9.0]), 0.1, w_min=0.0, w_max=1.0)
    assert w.tolist() == [0.1, 0.6, 1.1]
    with pytest.raises(FloatingPointError):
        normalize_weights(np.array([np.nan, 1.0]), 0.5)
    rw = RtoWeight.from_raw([1.0, 3.0], 0.5)
    assert rw.w_min == 1.0 and rw.w_max == 3.0 and rw.normalized.tolist() == [0.5, 1.5]


def test_raw_weights():
    r = np.zeros((2, 1, 2))
    w = tabular_raw_weights(r, np.array([1.0, 2.0]), 0.5)
    assert w[0, 0].tolist() == [0.25, 1.0]
    w = physical_raw_weights([1.0, 1.0], [0, 1], [False, True], np.array([2.0, 4.0]), 0.5)
    assert w.tolist() == [4.0, 1.0]


# -- RTO tabular

def test_uniform_weight_gradient_collinear_with_plain_fit():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 2, 4))
    b = tabular_batch(random_mdp_pair(1, 4, 2, 0.9, 0.0)[0], rng, 64)
    eps = 0.5
    _, g_w = rto_tabular_loss_grad(logits, b.state, b.action, b.next_state, np.full(logits.shape, eps))
    _, g_1 = rto_tabular_loss_grad(logits, b.state, b.action, b.next_state, np.ones(logits.shape))
    u, v = g_w.ravel(), g_1.ravel()
    cos = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
    assert abs(1 - cos) <= 1e-10
    assert np.max(np.abs(u - eps * v)) <= 1e-12


def test_gradient_mean_zero_at_target():
    src, tgt = random_mdp_pair(3, 4, 2, 0.9, 0.3)
    model = TabularDynamicsModel.from_transition(tgt.transition)
    raw = tabular_raw_weights(src.reward, np.random.default_rng(0).uniform(0, 5, 4), 0.9)
    w_hat = normalize_weights(raw, 0.5)
    rng = np.random.default_rng(7)
    n = 10_000
    b = tabular_batch(tgt, rng, n)
    grads = np.empty((n, model.logits.size))
    for i in range(n):
        _, g = rto_tabular_loss_grad(model.logits, b.state[i:i + 1], b.action[i:i + 1], b.next_state[i:i + 1], w_hat)
        grads[i] = g.ravel()
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.linalg.norm(mean) <= 3 * np.linalg.norm(se)
    # the loss itself is the irreducible one-hot variance term
    loss, _ = rto_tabular_loss_grad(model.logits, b.state, b.action, b.next_state, w_hat)
    p = tgt.transition[b.state, b.action]
    w = w_hat[b.state, b.action]
    expected = (w * p * (1 - p)).sum(axis=1).mean()
    assert loss == pytest.approx(expected, rel=0.05)


def test_tabular_gradient_matches_finite_differences():
    errs = [finite_difference_check(seed) for seed in range(100)]
    assert max(errs) <= 1e-5, max(errs)


def test_rto_tabular_update_reduces_loss():
    src, tgt = random_mdp_pair(0, 4, 2, 0.9, 0.5)
    model = TabularDynamicsModel.from_transition(src.transition)
    b = tabular_batch(tgt, np.random.default_rng(0), 256)
    w_hat = np.full(model.logits.shape, 0.5)
    first = rto_update_tabular(model, b, w_hat, CFG)
    for _ in range(50):
        last = rto_update_tabular(model, b, w_hat, CFG)
    assert last < first
    with pytest.raises(ValueError):
        rto_update_tabular(model, b, np.ones((2, 2)), CFG)


# -- RTO physical

def test_physical_gradient_zero_when_lengths_match():
    p = CartPoleParams()
    b = cartpole_batch(p, np.random.default_rng(0), 300)
    _, g = rto_physical_loss_grad(p, b.obs, b.action, b.next_obs, np.ones(300))
    assert abs(g) <= 1e-8


def test_physical_loss_non_increasing_small_lr():
    b = cartpole_batch(CartPoleParams(pole_length=1.5), np.random.default_rng(1), 400)
    params = CartPoleParams()
    w = np.ones(400)
    losses = []
    for _ in range(200):
        params, loss = rto_update_physical(params, b, w, CFG, lr=1e-3)
        losses.append(loss)
    assert all(b_ <= a_ + 1e-15 for a_, b_ in zip(losses, losses[1:]))
    assert params.pole_length > 1.0


def test_physical_update_recovers_length_on_fixed_batch():
    b = cartpole_batch(CartPoleParams(pole_length=2.0), np.random.default_rng(2), 500)
    params = CartPoleParams()
    for _ in range(2000):
        params, _ = rto_update_physical(params, b, np.ones(500), CFG, lr=1.0)
    assert params.pole_length == pytest.approx(2.0, rel=1e-3)


def test_physical_update_needs_observations():
    b = Batch(np.array([0]), np.array([0]), np.zeros(1), np.array([0]), np.zeros(1, dtype=bool))
    with pytest.raises(ValueError):
        rto_update_physical(CartPoleParams(), b, np.ones(1), CFG)


# -- the loop

def tabular_learner(seed, src):
    return pretrain_tabular(seed, src, PretrainConfig(env="tabular", steps=5_000)).learner


def small_cfg(**kw):
    base = dict(target_step_budget=2_000, eval_every=500)
    base.update(kw)
    return TransferConfig(**base)


def test_loop_telemetry_and_slots():
    src, tgt = random_mdp_pair(0, 5, 2, 0.9, 0.3)
    learner = tabular_learner(0, src)
    log = rpto_run(TabularWorld(src, tgt), learner, small_cfg(target_step_budget=2_020), np.random.default_rng(0))
    assert [s for s, _ in log.evals] == [0, 500, 1000, 1500, 2000, 2020]
    assert log.rows[-1][0] == 2020
    steps = [r[0] for r in log.rows]
    assert steps == sorted(steps)
    assert all(r[5] is not None and r[6] > 0 for r in log.rows)
    assert log.rows[-1][4] < log.rows[0][4] + 1e-12 or log.rows[-1][4] <= max_tv(src.transition, tgt.transition)


@pytest.mark.parametrize("method", ["rpto", "rpo", "rto", "sac_warm"])
def test_loop_methods_fill_expected_columns(method):
    src, tgt = random_mdp_pair(1, 4, 2, 0.9, 0.3)
    learner = tabular_learner(1, src)
    log = rpto_run(TabularWorld(src, tgt), learner, small_cfg(target_step_budget=300), np.random.default_rng(0), method)
    row = log.rows[-1]
    assert (row[1] > 0) == (method in ("rpto", "rpo"))
    assert (row[5] is not None) == (method in ("rpto", "rto"))
    if method in ("rpo", "sac_warm"):
        assert row[4] == pytest.approx(max_tv(src.transition, tgt.transition))


def test_loop_source_alternation_and_pacing():
    src, tgt = random_mdp_pair(2, 4, 2, 0.9, 0.3)
    world = TabularWorld(src, tgt)
    calls = []
    step = world.rto_step
    world.rto_step = lambda batch, config: calls.append(1) or step(batch, config)
    cfg = small_cfg(target_step_budget=1_000, dynamics_replay_ratio=2, alternate_frequency=5)
    log = rpto_run(world, tabular_learner(2, src), cfg, np.random.default_rng(0))
    n_updates = log.actor.updates
    assert n_updates == log.rows[-1][0]                 # policy replay ratio 1
    assert log.actor.source_updates == n_updates // 5
    assert len(calls) == 2 * log.rows[-1][0]
    assert len(calls) / log.rows[-1][0] <= cfg.dynamics_replay_ratio


def test_loop_deterministic():
    src, tgt = random_mdp_pair(3, 4, 2, 0.9, 0.3)
    learner = tabular_learner(3, src)
    runs = [rpto_run(TabularWorld(src, tgt), learner, small_cfg(), np.random.default_rng([3, 1])) for _ in range(2)]
    assert runs[0].rows == runs[1].rows and runs[0].evals == runs[1].evals


def test_loop_rejects():
    src, tgt = random_mdp_pair(3, 4, 2, 0.9, 0.3)
    learner = SoftQLearner(4, 2, 0.9)
    with pytest.raises(ValueError):
        rpto_run(TabularWorld(src, tgt), learner, small_cfg(), np.random.default_rng(0), "bogus")
    other = random_mdp_pair(4, 4, 2, 0.9, 0.3)[1]
    with pytest.raises(ValueError):
        TabularWorld(src, other)


def test_loop_nan_aborts():
    src, tgt = random_mdp_pair(3, 4, 2, 0.9, 0.3)
    learner = SoftQLearner(4, 2, 0.9)
    world = TabularWorld(src, tgt)
    world.gap = lambda: float("nan")
    with pytest.raises(FloatingPointError):
        rpto_run(world, learner, small_cfg(), np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(4))
def test_no_op_transfer_keeps_return(seed):
    src, _ = random_mdp_pair(seed, 5, 2, 0.9, 0.0)
    learner = tabular_learner(seed, src)
    j0 = policy_evaluation(src, TabularPolicy(learner.policy())).j
    log = rpto_run(TabularWorld(src, src), learner, small_cfg(target_step_budget=5_000), np.random.default_rng(seed))
    worst = min(r[2] for r in log.rows)
    print(f"seed {seed}: pretrained {j0:.4f}, worst target return {worst:.4f}")
    assert worst >= 0.95 * j0
    assert all(abs(r[2] - r[3]) <= 1e-8 for r in log.rows)


def test_steps_to_threshold():
    log = TransferLog("rpo", evals=[(0, 1.0), (500, 3.0), (1000, 5.0)])
    assert log.steps_to(2.0) == 500
    assert log.steps_to(0.5) == 0
    assert log.steps_to(9.0) is None
    assert log.final_eval == 5.0


def test_cartpole_world_short_run():
    src = CartPoleParams()
    world = CartPoleWorld(src, src.with_length(1.5))
    learner = SoftQLearner(world.discretizer.n_cells, 2, 0.99, alpha=0.05, q_init=100.0)
    cfg = TransferConfig(target_step_budget=600, eval_every=300, eval_episodes=2)
    log = rpto_run(world, learner, cfg, np.random.default_rng(0), "rto")
    assert log.rows[-1][3] is None           # no exact source return for cart-pole
    assert log.rows[-1][4] > 1.0             # length moved toward 1.5
    assert [s for s, _ in log.evals] == [0, 300, 600]


# -- eight-seed examples on the default 5x2 pair

def pretrained_pair(seed, mix):
    src, tgt = tabular_pair(seed, TabularSetup(mix=mix))
    return src, tgt, pretrain_tabular(seed, src, PretrainConfig(env="tabular")).learner


@pytest.mark.slow
def test_rpo_small_mix_does_not_hurt_target_return():
    diffs = []
    for seed in range(8):
        src, tgt, learner = pretrained_pair(seed, 0.05)
        j0 = policy_evaluation(tgt, TabularPolicy(learner.policy())).j
        log = rpto_run(TabularWorld(src, tgt), learner, TransferConfig(), np.random.default_rng([seed, 1]), "rpo")
        diffs.append(policy_evaluation(tgt, TabularPolicy(log.actor.probs)).j - j0)
    print("J(target) after rpo minus before:", np.round(diffs, 5).tolist())
    assert np.median(diffs) >= 0.0


@pytest.fixture(scope="module")
def rto_runs():
    out = []
    for seed in range(8):
        src, tgt, learner = pretrained_pair(seed, 0.3)
        pi = TabularPolicy(learner.policy())
        # per-step visitation of (s, a) in the 50-step target episodes
        cover = time_marginals(tgt, pi, 50).mean(axis=0)[:, None] * pi.probs
        world = TabularWorld(src, tgt)
        delta1 = world.gap()
        rpto_run(world, learner, TransferConfig(), np.random.default_rng([seed, 1]), "rto")
        tv = 0.5 * np.abs(world.model.transition - tgt.transition).sum(axis=-1)
        out.append((delta1, tv, cover))
    return out


@pytest.mark.slow
def test_rto_closes_tv_gap_on_covered_pairs(rto_runs):
    for delta1, tv, cover in rto_runs:
        assert tv.max() < delta1
        assert tv[cover >= 0.03].max() < 0.05


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="pairs the pretrained policy rarely visits keep max-TV above 0.05")
def test_rto_max_tv_below_threshold(rto_runs):
    final = [tv.max() for _, tv, _ in rto_runs]
    print("final max-TV per seed:", np.round(final, 3).tolist())
    assert np.median(final) < 0.05

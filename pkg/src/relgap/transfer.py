"""Policy transfer across dynamics: RPO, RTO and their combination RPTO.

RPO keeps an explicit actor table and nudges it toward softmax(Q_source / alpha)
at states drawn from the target buffer, so the Q-values come from the source
while the state distribution comes from the target. RTO fits the source model
(tabular logits or the cart-pole length) to target transitions under a
value-dependent weight. RPTO runs both and collects source data from the
current model, so the source environment drifts toward the target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .envs.cartpole import CartPoleEnv, CartPoleParams, Discretizer, integrate_batch, length_gradient_batch
from .envs.tabular import TabularDynamicsModel
from .mdp import TabularMdp, TabularPolicy, policy_evaluation, soft_state_value, softmax
from .soft_rl import (
    SOURCE,
    TARGET,
    Batch,
    ReplayBuffer,
    SoftQLearner,
    TabularEnv,
    collect_episode,
    evaluate,
    soft_q_update,
)

METHODS = ("rpto", "rpo", "rto", "sac_warm")
MIN_POLE_LENGTH = 1e-3


@dataclass(frozen=True)
class TransferConfig:
    alternate_frequency: int = 5
    policy_replay_ratio: int = 1
    dynamics_replay_ratio: int = 1
    rto_min_weight: float = 0.5
    rto_lr_tabular: float = 0.5
    rto_lr_physical: float = 1e-2
    rto_grad_clip: float = 1.0
    rpo_lr: float = 0.1
    batch_size: int = 32
    dynamics_batch_size: int = 64
    target_step_budget: int = 50_000
    episodes_per_iteration: int = 1
    buffer_capacity: int = 100_000
    eval_every: int = 2_500
    eval_episodes: int = 10

    def __post_init__(self):
        if self.alternate_frequency < 1:
            raise ValueError("alternate_frequency must be >= 1")
        if self.policy_replay_ratio < 1 or self.dynamics_replay_ratio < 1:
            raise ValueError("replay ratios must be >= 1")
        if not self.rto_min_weight > 0:
            raise ValueError("rto_min_weight must be > 0")
        for name in ("rto_lr_tabular", "rto_lr_physical", "rto_grad_clip", "rpo_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.rpo_lr > 1:
            raise ValueError("rpo_lr is an interpolation weight and must be <= 1")
        for name in ("batch_size", "dynamics_batch_size", "episodes_per_iteration", "buffer_capacity",
                     "eval_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_config(cls, block: dict) -> "TransferConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(block) - set(types)
        if unknown:
            raise ValueError(f"unknown transfer keys: {sorted(unknown)}")
        return cls(**{k: (float(v) if types[k] == "float" else int(v)) for k, v in block.items()})


# ---------------------------------------------------------------- RPO

class Actor:
    """Explicit tabular policy, decoupled from the Q table it is improved against."""

    def __init__(self, probs):
        self.probs = TabularPolicy(probs).probs.copy()
        self.updates = 0
        self.source_updates = 0

    @classmethod
    def from_learner(cls, learner: SoftQLearner) -> "Actor":
        return cls(learner.policy())

    @property
    def n_states(self):
        return self.probs.shape[0]

    def entropy(self) -> float:
        p = self.probs
        return float(-(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=1).mean())

    def copy(self) -> "Actor":
        a = Actor(self.probs)
        a.updates, a.source_updates = self.updates, self.source_updates
        return a


def source_turn(actor: Actor, config: TransferConfig) -> bool:
    """Whether the actor's next update is one of the every-f-th source updates."""
    return (actor.updates + 1) % config.alternate_frequency == 0


def kl_step(probs_rows, goal_rows, step):
    """Minimizer of (1-step) KL(pi || old) + step KL(pi || goal): a normalized geometric blend."""
    tiny = np.finfo(float).tiny
    logp = (1.0 - step) * np.log(np.maximum(probs_rows, tiny)) + step * np.log(np.maximum(goal_rows, tiny))
    return softmax(logp)


def rpo_update(actor: Actor, q_source, alpha, target_batch: Batch, source_batch: Batch | None,
               config: TransferConfig) -> int:
    """One relative policy step; returns the origin tag of the batch whose states were used.

    The improvement direction always comes from ``q_source``; only the states
    change. Every ``alternate_frequency``-th call consumes ``source_batch``.
    """
    q_source = np.asarray(q_source, dtype=float)
    if q_source.shape != actor.probs.shape:
        raise ValueError(f"Q table shape {q_source.shape} does not match actor {actor.probs.shape}")
    use_source = source_turn(actor, config)
    batch = source_batch if use_source else target_batch
    if batch is None:
        raise ValueError("this update is a source turn and needs a source batch")
    if len(batch) == 0:
        raise ValueError("empty batch")
    states = np.unique(np.asarray(batch.state))
    if states[0] < 0 or states[-1] >= actor.n_states:
        raise ValueError("batch states fall outside the actor's state space")
    goal = softmax(q_source[states] / alpha)
    actor.probs[states] = kl_step(actor.probs[states], goal, config.rpo_lr)
    actor.updates += 1
    if use_source:
        actor.source_updates += 1
        return SOURCE
    return TARGET


# ---------------------------------------------------------------- RTO weights

@dataclass(frozen=True)
class RtoWeight:
    """Raw dynamics weights and their min-max normalization, elementwise."""

    raw: np.ndarray
    normalized: np.ndarray
    w_min: float
    w_max: float

    @classmethod
    def from_raw(cls, raw, eps_w, w_min=None, w_max=None) -> "RtoWeight":
        raw = np.asarray(raw, dtype=float)
        return cls(raw, normalize_weights(raw, eps_w, w_min, w_max),
                   float(raw.min() if w_min is None else w_min), float(raw.max() if w_max is None else w_max))


def normalize_weights(raw, eps_w, w_min=None, w_max=None) -> np.ndarray:
    """(w - w_min) / (w_max - w_min) + eps_w.

    The range defaults to the extremes of ``raw``. When it is given from a
    larger snapshot, values are clipped into it. A degenerate range gives
    ``eps_w`` everywhere.
    """
    raw = np.asarray(raw, dtype=float)
    lo = float(raw.min()) if w_min is None else float(w_min)
    hi = float(raw.max()) if w_max is None else float(w_max)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise FloatingPointError("non-finite dynamics weights")
    if hi <= lo:
        return np.full(raw.shape, float(eps_w))
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0) + eps_w


def tabular_raw_weights(reward, v_soft, gamma) -> np.ndarray:
    """w(s, a, s') = (r(s, a, s') + gamma * V_soft(s'))^2 for every s', shape (S, A, S)."""
    reward = np.asarray(reward, dtype=float)
    return (reward + gamma * np.asarray(v_soft, dtype=float)[None, None, :]) ** 2


def physical_raw_weights(rewards, next_states, dones, v_table, gamma) -> np.ndarray:
    """Per-transition w = (r + gamma * (1 - done) * V_soft(s'))^2 with s' discretized."""
    v = np.asarray(v_table, dtype=float)[np.asarray(next_states)]
    return (np.asarray(rewards, dtype=float) + gamma * (~np.asarray(dones, dtype=bool)) * v) ** 2


# ---------------------------------------------------------------- RTO, tabular

def rto_tabular_loss_grad(logits, states, actions, next_states, w_hat):
    """Weighted one-hot square loss and its gradient w.r.t. the logits.

    loss = mean_i sum_s' w_hat[s_i, a_i, s'] (1[s' = s'_i] - P(s' | s_i, a_i))^2

    The weight is taken per s' rather than per observed s', which keeps the
    expected loss equal to the weighted square distance to the true row plus
    a constant.
    """
    states = np.asarray(states)
    actions = np.asarray(actions)
    n = len(states)
    z = logits[states, actions]
    p = softmax(z)
    e = np.zeros_like(p)
    e[np.arange(n), np.asarray(next_states)] = 1.0
    w = w_hat[states, actions]
    diff = e - p
    loss = float((w * diff**2).sum() / n)
    d = w * diff
    g_rows = -2.0 * p * (d - (d * p).sum(axis=1, keepdims=True)) / n
    grad = np.zeros_like(logits)
    np.add.at(grad, (states, actions), g_rows)
    return loss, grad


def rto_update_tabular(model: TabularDynamicsModel, batch: Batch, w_hat, config: TransferConfig) -> float:
    """One gradient step on the model logits; returns the pre-step loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    w_hat = np.asarray(w_hat, dtype=float)
    if w_hat.shape != model.logits.shape:
        raise ValueError("weight table must have shape (S, A, S)")
    loss, grad = rto_tabular_loss_grad(model.logits, batch.state, batch.action, batch.next_state, w_hat)
    model.logits -= config.rto_lr_tabular * grad
    return loss


# ---------------------------------------------------------------- RTO, physical

def _forces(params: CartPoleParams, actions):
    return np.where(np.asarray(actions) == 1, params.force_magnitude, -params.force_magnitude)


def rto_physical_loss_grad(params: CartPoleParams, obs, actions, next_obs, w_hat):
    """mean_i w_hat_i * |s'_i - f_L(s_i, a_i)|^2 and its derivative in the pole length."""
    forces = _forces(params, actions)
    resid = np.asarray(next_obs, dtype=float) - integrate_batch(params, obs, forces)
    w_hat = np.asarray(w_hat, dtype=float)
    loss = float(np.mean(w_hat * (resid**2).sum(axis=1)))
    dfdl = length_gradient_batch(params, obs, forces)
    grad = float(np.mean(w_hat * -2.0 * (resid * dfdl).sum(axis=1)))
    return loss, grad


def rto_update_physical(params: CartPoleParams, batch: Batch, w_hat, config: TransferConfig, lr=None):
    """One clipped gradient step on pole_length; returns (new params, pre-step loss)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.obs is None or batch.next_obs is None:
        raise ValueError("physical RTO needs continuous states in the batch")
    loss, grad = rto_physical_loss_grad(params, batch.obs, batch.action, batch.next_obs, w_hat)
    if not math.isfinite(grad):
        raise FloatingPointError("non-finite pole-length gradient")
    grad = max(-config.rto_grad_clip, min(config.rto_grad_clip, grad))
    step = config.rto_lr_physical if lr is None else lr
    new_len = max(params.pole_length - step * grad, MIN_POLE_LENGTH)
    return params.with_length(new_len), loss


# ---------------------------------------------------------------- worlds

def max_tv(p, q) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1).max())


class TabularWorld:
    """Source/target pair of tabular MDPs; the model starts at the source dynamics."""

    obs_dim = 0

    def __init__(self, source: TabularMdp, target: TabularMdp, horizon: int = 50):
        if not source.same_task(target):
            raise ValueError("source and target must share states, actions, rewards and discount")
        self.source = source
        self.target = target
        self.horizon = horizon
        self.model = TabularDynamicsModel.from_transition(source.transition)
        self._model_env = TabularEnv(source, horizon)
        self._fixed_env = TabularEnv(source, horizon)
        self.target_env = TabularEnv(target, horizon)
        self.visited = np.zeros((source.n_states, source.n_actions), dtype=bool)
        self.w_hat = None

    def source_env(self, use_model: bool):
        return self._model_env if use_model else self._fixed_env

    def sync_model(self):
        self._model_env.set_transition(self.model.transition)

    def note_target(self, buffer: ReplayBuffer, start: int, count: int):
        idx = (start + np.arange(count)) % buffer.capacity
        self.visited[buffer.state[idx], buffer.action[idx]] = True

    def prepare_weights(self, buffer, v_soft, gamma, eps_w):
        raw = tabular_raw_weights(self.source.reward, v_soft, gamma)
        snap = raw[self.visited]
        self.w_hat = normalize_weights(raw, eps_w, snap.min(), snap.max())

    def rto_step(self, batch, config):
        return rto_update_tabular(self.model, batch, self.w_hat, config)

    def gap(self) -> float:
        return max_tv(self.model.transition, self.target.transition)

    def returns(self, probs):
        pi = TabularPolicy(probs)
        return policy_evaluation(self.target, pi).j, policy_evaluation(self.source, pi).j

    def eval_return(self, probs, rng, episodes) -> float:
        return policy_evaluation(self.target, TabularPolicy(probs)).j


class CartPoleWorld:
    """Cart-pole source/target pair differing in pole length; the model is the source length."""

    obs_dim = 4

    def __init__(self, source: CartPoleParams, target: CartPoleParams, discretizer: Discretizer | None = None):
        self.source = source
        self.target = target
        self.discretizer = discretizer or Discretizer.uniform()
        self.params = source
        self.target_env = CartPoleEnv(target, self.discretizer)
        self._fixed_env = CartPoleEnv(source, self.discretizer)
        self._model_env = CartPoleEnv(source, self.discretizer)
        self.w_range = (0.0, 0.0)
        self.v_table = None
        self.gamma = 0.0
        self.eps_w = 1.0

    def source_env(self, use_model: bool):
        return self._model_env if use_model else self._fixed_env

    def sync_model(self):
        self._model_env.params = self.params

    def note_target(self, buffer, start, count):
        pass

    def prepare_weights(self, buffer, v_soft, gamma, eps_w):
        n = buffer.size
        raw = physical_raw_weights(buffer.reward[:n], buffer.next_state[:n], buffer.done[:n], v_soft, gamma)
        self.w_range = (float(raw.min()), float(raw.max()))
        self.v_table, self.gamma, self.eps_w = v_soft, gamma, eps_w

    def rto_step(self, batch, config):
        raw = physical_raw_weights(batch.reward, batch.next_state, batch.done, self.v_table, self.gamma)
        w_hat = normalize_weights(raw, self.eps_w, *self.w_range)
        self.params, loss = rto_update_physical(self.params, batch, w_hat, config)
        return loss

    def gap(self) -> float:
        return self.params.pole_length

    def returns(self, probs):
        return None

    def eval_return(self, probs, rng, episodes) -> float:
        return evaluate(CartPoleEnv(self.target, self.discretizer), probs, rng, episodes)


# ---------------------------------------------------------------- the loop

RUN_FIELDS = ("target_steps", "source_steps", "target_return", "source_return",
              "pole_length_or_tv_gap", "rto_loss", "rpo_entropy")


@dataclass
class TransferLog:
    method: str
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)   # (slot in target steps, eval_return)
    actor: Actor | None = None
    learner: SoftQLearner | None = None

    def steps_to(self, threshold) -> int | None:
        """Slot of the first evaluation reaching ``threshold``; None if never."""
        for steps, ret in self.evals:
            if ret >= threshold:
                return steps
        return None

    @property
    def final_eval(self) -> float:
        return self.evals[-1][1]


def _check_finite(row):
    for v in row:
        if v is not None and not math.isfinite(v):
            raise FloatingPointError(f"non-finite telemetry value in {row}")


def rpto_run(world, learner: SoftQLearner, config: TransferConfig, rng, method: str = "rpto",
             eval_seed: int = 0) -> TransferLog:
    """Run one transfer from a pretrained ``learner``.

    method:
      rpto      source data from the current model, RPO and RTO updates
      rpo       source data from the fixed source, RPO updates only
      rto       fixed policy, only the model is fitted to target data
      sac_warm  the learner keeps training on target data alone

    Each iteration collects ``episodes_per_iteration`` source episodes (rpo,
    rpto) and one target episode, then runs the Q, policy and dynamics
    updates paced by the replay ratios. Evaluations happen every
    ``eval_every`` target steps and use common random numbers across methods.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if config.target_step_budget <= 0:
        raise ValueError("target step budget must be positive")
    learner = learner.copy()
    uses_source = method in ("rpto", "rpo")
    uses_actor = uses_source
    uses_rto = method in ("rpto", "rto")
    use_model = method == "rpto"
    actor = Actor.from_learner(learner) if uses_actor else None
    src_buf = ReplayBuffer(config.buffer_capacity, origin=SOURCE)
    tgt_buf = ReplayBuffer(config.buffer_capacity, obs_dim=world.obs_dim, origin=TARGET)
    log = TransferLog(method, actor=actor, learner=learner)
    policy = (lambda: actor.probs) if uses_actor else learner.policy

    def record_eval(slots):
        ev = world.eval_return(policy(), np.random.default_rng([eval_seed, 7]), config.eval_episodes)
        log.evals.extend((slot, float(ev)) for slot in slots)

    target_steps = source_steps = 0
    record_eval([0])
    next_eval = config.eval_every
    while target_steps < config.target_step_budget:
        n_src = 0
        src_ret = None
        if uses_source:
            env = world.source_env(use_model)
            total = 0.0
            for _ in range(config.episodes_per_iteration):
                ret, n = collect_episode(env, policy(), rng, src_buf)
                total += ret
                n_src += n
            src_ret = total / config.episodes_per_iteration
            source_steps += n_src
        start = tgt_buf.ptr
        tgt_ret, n_tgt = collect_episode(world.target_env, policy(), rng, tgt_buf,
                                         max_steps=config.target_step_budget - target_steps)
        world.note_target(tgt_buf, start, n_tgt)
        target_steps += n_tgt

        ratio = config.policy_replay_ratio
        if uses_source:
            for _ in range(ratio * n_src):
                b = src_buf.sample(rng, config.batch_size)
                soft_q_update(learner, b, actor.probs[b.next_state])
            for _ in range(ratio * n_tgt):
                tb = tgt_buf.sample(rng, config.batch_size)
                sb = src_buf.sample(rng, config.batch_size) if source_turn(actor, config) else None
                rpo_update(actor, learner.q, learner.alpha, tb, sb, config)
        elif method == "sac_warm":
            for _ in range(ratio * n_tgt):
                soft_q_update(learner, tgt_buf.sample(rng, config.batch_size))

        rto_loss = None
        if uses_rto:
            probs = policy()
            v_soft = soft_state_value(learner.q, probs, learner.alpha)
            world.prepare_weights(tgt_buf, v_soft, learner.gamma, config.rto_min_weight)
            losses = [world.rto_step(tgt_buf.sample(rng, config.dynamics_batch_size), config)
                      for _ in range(config.dynamics_replay_ratio * n_tgt)]
            rto_loss = float(np.mean(losses))
            if use_model:
                world.sync_model()

        exact = world.returns(policy())
        if exact is not None:
            tgt_ret, src_ret = exact
        entropy = actor.entropy() if actor is not None else float(learner.entropy().mean())
        row = (target_steps, source_steps, float(tgt_ret), src_ret, world.gap(), rto_loss, entropy)
        _check_finite(row[2:])
        log.rows.append(row)
        # One entry per crossed slot keeps evaluations aligned across seeds.
        slots = []
        while next_eval <= target_steps:
            slots.append(next_eval)
            next_eval += config.eval_every
        if target_steps >= config.target_step_budget and (slots[-1] if slots else log.evals[-1][0]) != target_steps:
            slots.append(target_steps)
        if slots:
            record_eval(slots)
    return log

"""Tabular soft Q-learning with replay buffers.

The policy is implicit: pi = softmax(q / alpha). For a tabular,
unconstrained policy this is the exact minimizer of the soft
policy-improvement objective, so no separate actor is kept here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .mdp import TabularMdp, softmax, soft_state_value

SOURCE, TARGET = 0, 1


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool
    origin: int = SOURCE


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling (with replacement).

    ``obs_dim`` > 0 additionally stores continuous observations for each
    transition (used by the physical dynamics fit).
    """

    def __init__(self, capacity: int = 100_000, obs_dim: int = 0, origin: int = SOURCE):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.origin = origin
        self.state = np.zeros(capacity, dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.next_state = np.zeros(capacity, dtype=np.int64)
        self.done = np.zeros(capacity, dtype=bool)
        self.obs_dim = obs_dim
        if obs_dim:
            self.obs = np.zeros((capacity, obs_dim))
            self.next_obs = np.zeros((capacity, obs_dim))
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, state, action, reward, next_state, done, obs=None, next_obs=None):
        i = self.ptr
        self.state[i] = state
        self.action[i] = action
        self.reward[i] = reward
        self.next_state[i] = next_state
        self.done[i] = done
        if self.obs_dim:
            self.obs[i] = obs
            self.next_obs[i] = next_obs
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, t: Transition):
        self.add(t.state, t.action, t.reward, t.next_state, t.done)

    def indices(self, rng, batch_size: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, rng, batch_size: int) -> "Batch":
        return self.take(self.indices(rng, batch_size))

    def take(self, idx) -> "Batch":
        return Batch(
            self.state[idx],
            self.action[idx],
            self.reward[idx],
            self.next_state[idx],
            self.done[idx],
            self.obs[idx] if self.obs_dim else None,
            self.next_obs[idx] if self.obs_dim else None,
        )

    def all(self) -> "Batch":
        return self.take(np.arange(self.size))

    def transitions(self):
        for i in range(self.size):
            yield Transition(int(self.state[i]), int(self.action[i]), float(self.reward[i]),
                             int(self.next_state[i]), bool(self.done[i]), self.origin)


@dataclass
class Batch:
    state: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    done: np.ndarray
    obs: np.ndarray | None = None
    next_obs: np.ndarray | None = None

    def __len__(self):
        return len(self.state)

    @classmethod
    def of(cls, transitions):
        ts = list(transitions)
        return cls(
            np.array([t.state for t in ts], dtype=np.int64),
            np.array([t.action for t in ts], dtype=np.int64),
            np.array([t.reward for t in ts], dtype=float),
            np.array([t.next_state for t in ts], dtype=np.int64),
            np.array([t.done for t in ts], dtype=bool),
        )


class SoftQLearner:
    """Q table, Polyak-averaged target table and fixed temperature.

    The target table is blended lazily: an entry is brought up to date only
    when it is read or when its Q entry is about to change. Between writes
    the Q entry is constant, so k skipped blends collapse to one blend with
    weight polyak**k and the result matches the eager update.
    """

    def __init__(self, n_states, n_actions, gamma, alpha=0.2, lr=0.1, polyak=0.995, q_init=0.0):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.q = np.full((n_states, n_actions), float(q_init))
        self._target = self.q.copy()
        self._synced = np.zeros((n_states, n_actions), dtype=np.int64)
        self._acc = np.zeros((n_states, n_actions))
        self._cnt = np.zeros((n_states, n_actions), dtype=np.int64)
        self.updates = 0
        self.gamma = gamma
        self.alpha = alpha
        self.lr = lr
        self.polyak = polyak

    @property
    def n_states(self):
        return self.q.shape[0]

    @property
    def n_actions(self):
        return self.q.shape[1]

    @property
    def target_q(self) -> np.ndarray:
        self._sync(np.arange(self.q.size))
        return self._target.copy()

    @target_q.setter
    def target_q(self, value):
        self._target = np.array(value, dtype=float)
        self._synced = np.full(self.q.shape, self.updates, dtype=np.int64)

    def _sync(self, flat):
        t = self._target.ravel()
        lag = self.updates - self._synced.ravel()[flat]
        keep = self.polyak ** lag
        t[flat] = keep * t[flat] + (1.0 - keep) * self.q.ravel()[flat]
        self._synced.ravel()[flat] = self.updates

    def target_rows(self, states) -> np.ndarray:
        n_a = self.n_actions
        flat = (np.asarray(states)[:, None] * n_a + np.arange(n_a)).ravel()
        self._sync(flat)
        return self._target.ravel()[flat].reshape(-1, n_a)

    def policy(self, states=None) -> np.ndarray:
        q = self.q if states is None else self.q[states]
        return softmax(q / self.alpha)

    def entropy(self) -> np.ndarray:
        z = self.q / self.alpha
        logp = z - z.max(axis=1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
        return -(np.exp(logp) * logp).sum(axis=1)

    def copy(self) -> "SoftQLearner":
        out = SoftQLearner(self.n_states, self.n_actions, self.gamma, self.alpha, self.lr, self.polyak)
        out.q = self.q.copy()
        out.target_q = self.target_q
        return out

    def td_targets(self, batch: Batch, probs_next=None) -> np.ndarray:
        """r + gamma (1 - done) V_target(s') with V from the target table.

        ``probs_next`` overrides the bootstrap policy at s' (the actor
        table when one is kept separately).
        """
        if probs_next is None:
            probs_next = softmax(self.q[batch.next_state] / self.alpha)
        v_next = soft_state_value(self.target_rows(batch.next_state), probs_next, self.alpha)
        return batch.reward + self.gamma * (~batch.done) * v_next

    def residual(self, batch: Batch, probs_next=None) -> float:
        err = self.q[batch.state, batch.action] - self.td_targets(batch, probs_next)
        return float(np.mean(err**2))


@numba.njit(cache=True)
def _soft_q_kernel(q, target, synced, updates, states, actions, rewards, next_states, dones,
                   probs_next, use_probs, alpha, gamma, lr, polyak, acc, cnt):
    n = states.shape[0]
    n_a = q.shape[1]
    errs = np.empty(n)
    for i in range(n):
        s2 = next_states[i]
        # bring the bootstrap row of the target table up to date
        for b in range(n_a):
            lag = updates - synced[s2, b]
            if lag > 0:
                keep = polyak**lag
                target[s2, b] = keep * target[s2, b] + (1.0 - keep) * q[s2, b]
                synced[s2, b] = updates
        v = 0.0
        if not dones[i]:
            if use_probs:
                for b in range(n_a):
                    p = probs_next[i, b]
                    if p > 0.0:
                        v += p * (target[s2, b] - alpha * np.log(p))
            else:
                m = q[s2, 0] / alpha
                for b in range(1, n_a):
                    m = max(m, q[s2, b] / alpha)
                z = 0.0
                for b in range(n_a):
                    z += np.exp(q[s2, b] / alpha - m)
                logz = m + np.log(z)
                for b in range(n_a):
                    logp = q[s2, b] / alpha - logz
                    v += np.exp(logp) * (target[s2, b] - alpha * logp)
        e = rewards[i] + gamma * v - q[states[i], actions[i]]
        errs[i] = e
        acc[states[i], actions[i]] += e
        cnt[states[i], actions[i]] += 1
    total = 0.0
    for i in range(n):
        total += errs[i] * errs[i]
        s = states[i]
        a = actions[i]
        c = cnt[s, a]
        if c == 0:
            continue
        lag = updates - synced[s, a]
        if lag > 0:
            keep = polyak**lag
            target[s, a] = keep * target[s, a] + (1.0 - keep) * q[s, a]
        q[s, a] += lr * acc[s, a] / c
        target[s, a] = polyak * target[s, a] + (1.0 - polyak) * q[s, a]
        synced[s, a] = updates + 1
        acc[s, a] = 0.0
        cnt[s, a] = 0
    return total / n


def soft_q_update(learner: SoftQLearner, batch: Batch, probs_next=None) -> float:
    """One step toward the soft Bellman targets; returns the pre-update mean squared residual.

    All targets are computed from the tables as they were before the step.
    Repeated (s, a) pairs in a batch are averaged, so ``lr = 1`` moves each
    visited entry exactly onto its mean target. The target table is then
    Polyak-blended toward the new Q table.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    use_probs = probs_next is not None
    if not use_probs:
        probs_next = _NO_PROBS
    res = _soft_q_kernel(
        learner.q, learner._target, learner._synced, learner.updates,
        np.asarray(batch.state, dtype=np.int64), np.asarray(batch.action, dtype=np.int64),
        np.asarray(batch.reward, dtype=float), np.asarray(batch.next_state, dtype=np.int64),
        np.asarray(batch.done, dtype=np.bool_), np.asarray(probs_next, dtype=float), use_probs,
        float(learner.alpha), float(learner.gamma), float(learner.lr), float(learner.polyak),
        learner._acc, learner._cnt,
    )
    learner.updates += 1
    return float(res)


_NO_PROBS = np.zeros((1, 1))


def sample_action(probs_row, rng) -> int:
    u = rng.random()
    c = 0.0
    for a, p in enumerate(probs_row):
        c += p
        if u < c:
            return a
    return len(probs_row) - 1


class TabularEnv:
    """Sampling wrapper around a TabularMdp with a fixed episode horizon.

    Horizon truncation is not terminal, so stored ``done`` flags stay False.
    """

    def __init__(self, mdp: TabularMdp, horizon: int = 50):
        self.mdp = mdp
        self.horizon = horizon
        self._cum = np.cumsum(mdp.transition, axis=2)
        self._cum_rho = np.cumsum(mdp.initial_dist)
        self.s = 0
        self.t = 0

    @property
    def n_states(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    def set_transition(self, transition):
        self.mdp = self.mdp.with_transition(transition)
        self._cum = np.cumsum(self.mdp.transition, axis=2)

    def reset(self, rng):
        self.rng = rng
        self.s = min(int(np.searchsorted(self._cum_rho, rng.random(), side="right")), self.n_states - 1)
        self.t = 0
        return self.s

    def step(self, action):
        s = self.s
        s2 = min(int(np.searchsorted(self._cum[s, action], self.rng.random(), side="right")), self.n_states - 1)
        r = float(self.mdp.reward[s, action, s2])
        self.s = s2
        self.t += 1
        return s2, r, self.t >= self.horizon, False


def collect_episode(env, probs, rng, buffer: ReplayBuffer | None = None, max_steps: int | None = None):
    """Roll out one episode sampling actions from ``probs`` (an (S, A) table or a learner).

    Returns (undiscounted return, steps taken).
    """
    if isinstance(probs, SoftQLearner):
        probs = probs.policy()
    s = env.reset(rng)
    obs = getattr(env, "state", None)
    total = 0.0
    steps = 0
    while True:
        a = sample_action(probs[s], rng)
        s2, r, done, terminal = env.step(a)
        if buffer is not None:
            if buffer.obs_dim:
                nxt = env.state
                buffer.add(s, a, r, s2, terminal, obs, nxt)
                obs = nxt
            else:
                buffer.add(s, a, r, s2, terminal)
        total += r
        steps += 1
        s = s2
        if done or (max_steps is not None and steps >= max_steps):
            return total, steps


def evaluate(env, probs, rng, episodes: int) -> float:
    """Mean undiscounted return of ``episodes`` sampled rollouts."""
    return float(np.mean([collect_episode(env, probs, rng)[0] for _ in range(episodes)]))


def train_soft_q(env, learner: SoftQLearner, rng, env_steps: int, buffer: ReplayBuffer,
                 batch_size: int = 32, updates_per_step: int = 1, log_every: int = 0, log=None,
                 step_offset: int = 0):
    """Online soft Q-learning: one environment step, then ``updates_per_step`` replay updates.

    Returns the list of completed episode returns.
    """
    returns = []
    steps = 0
    s = env.reset(rng)
    obs = getattr(env, "state", None)
    ep_ret = 0.0
    residual = 0.0
    while steps < env_steps:
        probs = softmax(learner.q[s] / learner.alpha)
        a = sample_action(probs, rng)
        s2, r, done, terminal = env.step(a)
        if buffer.obs_dim:
            buffer.add(s, a, r, s2, terminal, obs, env.state)
            obs = env.state
        else:
            buffer.add(s, a, r, s2, terminal)
        ep_ret += r
        steps += 1
        for _ in range(updates_per_step):
            residual = soft_q_update(learner, buffer.sample(rng, batch_size))
        if log is not None and log_every and steps % log_every == 0:
            log.append((step_offset + steps, returns[-1] if returns else ep_ret, residual, float(learner.entropy().mean())))
        s = s2
        if done:
            returns.append(ep_ret)
            ep_ret = 0.0
            s = env.reset(rng)
            obs = getattr(env, "state", None)
    return returns


def pretrain(env, learner: SoftQLearner, rng, env_steps: int, eval_env, eval_every: int = 10_000,
             eval_episodes: int = 20, eval_seed: int = 0, buffer: ReplayBuffer | None = None,
             batch_size: int = 32, log=None, log_every: int = 0):
    """Train online and keep the best evaluated snapshot.

    Evaluation runs ``eval_episodes`` sampled episodes in ``eval_env`` every
    ``eval_every`` steps with a fixed evaluation seed. Returns
    (best learner, best score, [(step, score), ...]).
    """
    if buffer is None:
        buffer = ReplayBuffer()
    best, best_score, history = learner.copy(), -np.inf, []
    done = 0
    while done < env_steps:
        chunk = min(eval_every, env_steps - done)
        train_soft_q(env, learner, rng, chunk, buffer, batch_size=batch_size, log=log, log_every=log_every,
                     step_offset=done)
        done += chunk
        score = evaluate(eval_env, learner, np.random.default_rng([eval_seed, 99]), eval_episodes)
        history.append((done, score))
        if score > best_score:
            best, best_score = learner.copy(), score
    return best, best_score, history

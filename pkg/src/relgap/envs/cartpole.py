"""Cart-pole with a trainable pole length.

The pole is a uniform rod; ``pole_length`` is the full length and the
equations use the half-length. Integration is semi-implicit Euler:
velocities are advanced first and the new velocities move the positions.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, replace, fields

import numpy as np


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 1.0
    gravity: float = 9.8
    force_magnitude: float = 10.0
    time_step: float = 0.02
    angle_fail_threshold: float = 12.0 * math.pi / 180.0
    position_fail_threshold: float = 2.4
    max_episode_steps: int = 500

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_length", "gravity", "force_magnitude", "time_step",
                     "angle_fail_threshold", "position_fail_threshold"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")

    def with_length(self, pole_length: float) -> "CartPoleParams":
        return replace(self, pole_length=float(pole_length))

    @classmethod
    def from_config(cls, block: dict) -> "CartPoleParams":
        """Build from a config block; angles are given in degrees there."""
        known = {f.name for f in fields(cls)} | {"angle_fail_threshold_deg"}
        unknown = set(block) - known
        if unknown:
            raise ValueError(f"unknown cartpole keys: {sorted(unknown)}")
        kw = {}
        for k, v in block.items():
            if k == "angle_fail_threshold_deg":
                kw["angle_fail_threshold"] = math.radians(float(v))
            elif k == "max_episode_steps":
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


@dataclass(frozen=True)
class CartPoleState:
    cart_position: float = 0.0
    cart_velocity: float = 0.0
    pole_angle: float = 0.0
    pole_angular_velocity: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError("cart-pole state must be finite")

    def as_tuple(self):
        return (self.cart_position, self.cart_velocity, self.pole_angle, self.pole_angular_velocity)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple())


def accelerations(params: CartPoleParams, x_dot, theta, theta_dot, force):
    """(cart acceleration, pole angular acceleration)."""
    total = params.cart_mass + params.pole_mass
    half = 0.5 * params.pole_length
    sin, cos = math.sin(theta), math.cos(theta)
    temp = (force + params.pole_mass * half * theta_dot * theta_dot * sin) / total
    theta_acc = (params.gravity * sin - cos * temp) / (
        half * (4.0 / 3.0 - params.pole_mass * cos * cos / total)
    )
    x_acc = temp - params.pole_mass * half * theta_acc * cos / total
    return x_acc, theta_acc


def integrate(params: CartPoleParams, s, force):
    """One semi-implicit Euler step on a raw (x, x_dot, theta, theta_dot) tuple."""
    x, x_dot, theta, theta_dot = s
    x_acc, theta_acc = accelerations(params, x_dot, theta, theta_dot, force)
    dt = params.time_step
    x_dot = x_dot + dt * x_acc
    theta_dot = theta_dot + dt * theta_acc
    return (x + dt * x_dot, x_dot, theta + dt * theta_dot, theta_dot)


def integrate_batch(params: CartPoleParams, states, forces) -> np.ndarray:
    """Vectorized ``integrate`` over an (n, 4) array of states."""
    states = np.asarray(states, dtype=float)
    x, x_dot, theta, theta_dot = states.T
    total = params.cart_mass + params.pole_mass
    half = 0.5 * params.pole_length
    sin, cos = np.sin(theta), np.cos(theta)
    temp = (forces + params.pole_mass * half * theta_dot**2 * sin) / total
    theta_acc = (params.gravity * sin - cos * temp) / (half * (4.0 / 3.0 - params.pole_mass * cos**2 / total))
    x_acc = temp - params.pole_mass * half * theta_acc * cos / total
    dt = params.time_step
    x_dot = x_dot + dt * x_acc
    theta_dot = theta_dot + dt * theta_acc
    return np.stack([x + dt * x_dot, x_dot, theta + dt * theta_dot, theta_dot], axis=1)


def length_gradient_batch(params: CartPoleParams, states, forces, h=None) -> np.ndarray:
    """Central-difference d(next state)/d(pole_length) for each row; (n, 4)."""
    if h is None:
        h = 1e-4 * params.pole_length
    up = integrate_batch(params.with_length(params.pole_length + h), states, forces)
    down = integrate_batch(params.with_length(params.pole_length - h), states, forces)
    return (up - down) / (2.0 * h)


def failed(params: CartPoleParams, s) -> bool:
    return abs(s[2]) > params.angle_fail_threshold or abs(s[0]) > params.position_fail_threshold


def cartpole_step(params: CartPoleParams, state: CartPoleState, action: int, step_index: int = 0):
    """Advance one step; ``action`` 1 pushes right, 0 pushes left.

    ``step_index`` is the number of steps already taken in the episode, so
    the step that reaches ``max_episode_steps`` reports done. Reward is 1
    unless the step ends in failure.
    """
    if action not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {action}")
    force = params.force_magnitude if action == 1 else -params.force_magnitude
    nxt = integrate(params, state.as_tuple(), force)
    if not all(math.isfinite(v) for v in nxt):
        raise FloatingPointError("cart-pole state diverged")
    fail = failed(params, nxt)
    done = fail or step_index + 1 >= params.max_episode_steps
    return CartPoleState(*nxt), (0.0 if fail else 1.0), done


def cartpole_step_gradient(params: CartPoleParams, state, action: int, h: float | None = None) -> np.ndarray:
    """d(next state)/d(pole_length) by central differences, h = 1e-4 * pole_length by default."""
    s = state.as_tuple() if isinstance(state, CartPoleState) else tuple(state)
    force = params.force_magnitude if action == 1 else -params.force_magnitude
    if h is None:
        h = 1e-4 * params.pole_length
    up = integrate(params.with_length(params.pole_length + h), s, force)
    down = integrate(params.with_length(params.pole_length - h), s, force)
    return (np.array(up) - np.array(down)) / (2.0 * h)


def mechanical_energy(params: CartPoleParams, s) -> float:
    """Kinetic plus potential energy, potential zero at the pivot height."""
    x, x_dot, theta, theta_dot = s
    m, big_m = params.pole_mass, params.cart_mass
    half = 0.5 * params.pole_length
    kinetic = (
        0.5 * (big_m + m) * x_dot**2
        + m * half * x_dot * theta_dot * math.cos(theta)
        + 0.5 * (4.0 / 3.0) * m * half**2 * theta_dot**2
    )
    return kinetic + m * params.gravity * half * math.cos(theta)


@dataclass(frozen=True)
class Discretizer:
    """Uniform bins per dimension with clamping; row-major flattening."""

    edges: tuple

    def __post_init__(self):
        if len(self.edges) != 4:
            raise ValueError("need bin edges for 4 dimensions")
        for e in self.edges:
            e = np.asarray(e, dtype=float)
            if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("bin edges must be strictly increasing with at least 2 entries")
        object.__setattr__(self, "edges", tuple(tuple(float(v) for v in e) for e in self.edges))
        object.__setattr__(self, "_interior", tuple(e[1:-1] for e in self.edges))

    @classmethod
    def uniform(cls, bins=(6, 6, 12, 12), limits=None):
        if limits is None:
            limits = ((-2.4, 2.4), (-3.0, 3.0), (-12 * math.pi / 180, 12 * math.pi / 180), (-3.5, 3.5))
        return cls(tuple(tuple(np.linspace(lo, hi, n + 1)) for n, (lo, hi) in zip(bins, limits)))

    @property
    def bins(self):
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.bins))

    def cell(self, s):
        # Bisecting the interior edges clamps out-of-range values to the end bins.
        return tuple(bisect.bisect_right(inner, v) for v, inner in zip(s, self._interior))

    def index(self, s) -> int:
        if isinstance(s, CartPoleState):
            s = s.as_tuple()
        idx = 0
        for v, inner in zip(s, self._interior):
            idx = idx * (len(inner) + 1) + bisect.bisect_right(inner, v)
        return idx

    def center(self, cell):
        return tuple(0.5 * (e[k] + e[k + 1]) for k, e in zip(cell, self.edges))


def discretize(d: Discretizer, state) -> int:
    return d.index(state)


class CartPoleEnv:
    """Episodic wrapper: reset distribution, step counter, discretized observations."""

    def __init__(self, params: CartPoleParams, discretizer: Discretizer | None = None, init_noise: float = 0.05):
        self.params = params
        self.discretizer = discretizer or Discretizer.uniform()
        self.init_noise = init_noise
        self.state = (0.0, 0.0, 0.0, 0.0)
        self.t = 0

    @property
    def n_states(self):
        return self.discretizer.n_cells

    n_actions = 2

    def reset(self, rng):
        self.state = tuple(float(v) for v in rng.uniform(-self.init_noise, self.init_noise, size=4))
        self.t = 0
        return self.discretizer.index(self.state)

    def step(self, action: int):
        p = self.params
        force = p.force_magnitude if action == 1 else -p.force_magnitude
        prev = self.state
        self.state = integrate(p, prev, force)
        self.t += 1
        fail = failed(p, self.state)
        done = fail or self.t >= p.max_episode_steps
        return self.discretizer.index(self.state), (0.0 if fail else 1.0), done, fail

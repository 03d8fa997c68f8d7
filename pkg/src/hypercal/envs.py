"""Deployment environments: Acrobot, Puddle World and a continuing noisy Cartpole.

Every environment is a small stateful handle with ``reset()`` and ``step(action)``.
The calibration model exposes the same two methods, so agents and the evaluation
loop never need to know which one they are talking to.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from hypercal.seeding import as_generator


class ConfigurationError(ValueError):
    """Raised for unknown environment names or invalid parameter sets."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    action_count: int
    discount: float
    episodic: bool
    state_dim: int


class StepOutcome(NamedTuple):
    next_state: np.ndarray
    reward: float
    terminal: bool
    # continuing tasks jump back to a start state without ending the episode
    restarted: bool = False


@dataclass
class AcrobotParams:
    link_length_1: float = 1.0
    link_length_2: float = 1.0
    link_mass_1: float = 1.0
    link_mass_2: float = 1.0
    link_com_1: float = 0.5
    link_com_2: float = 0.5
    link_moi_1: float = 1.0
    link_moi_2: float = 1.0
    gravity: float = 9.8
    dt: float = 0.05
    substeps: int = 4
    max_vel_1: float = 4 * math.pi
    max_vel_2: float = 9 * math.pi
    goal_height: float = 1.0
    reset_range: float = 0.1

    def changed(self) -> "AcrobotParams":
        """First link twice as long and twice as heavy (centre of mass moves with it)."""
        return AcrobotParams(
            **{
                **asdict(self),
                "link_length_1": 2 * self.link_length_1,
                "link_mass_1": 2 * self.link_mass_1,
                "link_com_1": 2 * self.link_com_1,
            }
        )


@dataclass
class PuddleParams:
    step_size: float = 0.05
    noise_std: float = 0.01
    puddle_radius: float = 0.1
    puddles: tuple = ((0.10, 0.75, 0.45, 0.75), (0.45, 0.40, 0.45, 0.80))
    penalty_scale: float = 400.0
    goal_x: float = 0.95
    goal_y: float = 0.95


@dataclass
class CartpoleParams:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    tau: float = 0.02
    noise_std: float = 0.1
    theta_threshold: float = 12 * 2 * math.pi / 360
    x_threshold: float = 2.4
    failure_reward: float = -1.0
    reset_range: float = 0.05


# state bounds used by the tile coder; velocities follow the clipping limits
ACROBOT_BOUNDS = (
    np.array([-1.0, -1.0, -1.0, -1.0, -4 * math.pi, -9 * math.pi]),
    np.array([1.0, 1.0, 1.0, 1.0, 4 * math.pi, 9 * math.pi]),
)
PUDDLE_BOUNDS = (np.zeros(2), np.ones(2))
CARTPOLE_BOUNDS = (
    np.array([-2.4, -3.0, -0.21, -3.5]),
    np.array([2.4, 3.0, 0.21, 3.5]),
)


@njit(cache=True)
def acrobot_derivs(s, torque, p):
    """Time derivative of (theta1, theta2, dtheta1, dtheta2) under the textbook dynamics.

    ``p`` packs (m1, m2, l1, lc1, lc2, I1, I2, g).
    """
    m1, m2, l1, lc1, lc2, i1, i2, g = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]
    theta1, theta2, dtheta1, dtheta2 = s[0], s[1], s[2], s[3]
    d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * math.cos(theta2)) + i1 + i2
    d2 = m2 * (lc2 ** 2 + l1 * lc2 * math.cos(theta2)) + i2
    phi2 = m2 * lc2 * g * math.cos(theta1 + theta2 - math.pi / 2.0)
    phi1 = (
        -m2 * l1 * lc2 * dtheta2 ** 2 * math.sin(theta2)
        - 2 * m2 * l1 * lc2 * dtheta2 * dtheta1 * math.sin(theta2)
        + (m1 * lc1 + m2 * l1) * g * math.cos(theta1 - math.pi / 2.0)
        + phi2
    )
    ddtheta2 = (
        torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 ** 2 * math.sin(theta2) - phi2
    ) / (m2 * lc2 ** 2 + i2 - d2 ** 2 / d1)
    ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
    out = np.empty(4)
    out[0] = dtheta1
    out[1] = dtheta2
    out[2] = ddtheta1
    out[3] = ddtheta2
    return out


@njit(cache=True)
def acrobot_rk4(s, torque, p, dt, substeps):
    """Fixed-step RK4 integration without wrapping or clipping."""
    y = s.copy()
    for _ in range(substeps):
        k1 = acrobot_derivs(y, torque, p)
        k2 = acrobot_derivs(y + 0.5 * dt * k1, torque, p)
        k3 = acrobot_derivs(y + 0.5 * dt * k2, torque, p)
        k4 = acrobot_derivs(y + dt * k3, torque, p)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


@njit(cache=True)
def _wrap(x):
    two_pi = 2 * math.pi
    while x > math.pi:
        x -= two_pi
    while x < -math.pi:
        x += two_pi
    return x


@njit(cache=True)
def _acrobot_advance(s, torque, p, dt, substeps, max_v1, max_v2):
    y = acrobot_rk4(s, torque, p, dt, substeps)
    y[0] = _wrap(y[0])
    y[1] = _wrap(y[1])
    y[2] = min(max(y[2], -max_v1), max_v1)
    y[3] = min(max(y[3], -max_v2), max_v2)
    return y


class Acrobot:
    """Two-link underactuated swing-up; reward -1 per step until the tip clears the line."""

    torques = (-1.0, 0.0, 1.0)
    bounds = ACROBOT_BOUNDS

    def __init__(self, params: AcrobotParams | None = None, seed=None, name: str = "acrobot"):
        self.params = params or AcrobotParams()
        self.spec = EnvSpec(name, 3, 1.0, True, 6)
        self.rng = as_generator(seed)
        p = self.params
        self._p = np.array(
            [p.link_mass_1, p.link_mass_2, p.link_length_1, p.link_com_1, p.link_com_2,
             p.link_moi_1, p.link_moi_2, p.gravity]
        )
        self.raw = np.zeros(4)

    @staticmethod
    def observe(raw: np.ndarray) -> np.ndarray:
        return np.array(
            [math.cos(raw[0]), math.sin(raw[0]), math.cos(raw[1]), math.sin(raw[1]), raw[2], raw[3]]
        )

    def tip_height(self, raw: np.ndarray) -> float:
        p = self.params
        return -p.link_length_1 * math.cos(raw[0]) - p.link_length_2 * math.cos(raw[0] + raw[1])

    def reset(self) -> np.ndarray:
        r = self.params.reset_range
        self.raw = self.rng.uniform(-r, r, size=4)
        return self.observe(self.raw)

    def step(self, action: int) -> StepOutcome:
        if not 0 <= action < 3:
            raise ValueError(f"acrobot action must be in [0, 3), got {action}")
        p = self.params
        self.raw = _acrobot_advance(
            self.raw, self.torques[action], self._p, p.dt, p.substeps, p.max_vel_1, p.max_vel_2
        )
        terminal = self.tip_height(self.raw) > p.goal_height
        return StepOutcome(self.observe(self.raw), -1.0, terminal)


class PuddleWorld:
    """Unit square with two capsule puddles; goal in the upper-right corner."""

    moves = ((-1.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.0, -1.0))  # left, right, up, down
    bounds = PUDDLE_BOUNDS

    def __init__(self, params: PuddleParams | None = None, seed=None, name: str = "puddleworld"):
        self.params = params or PuddleParams()
        self.spec = EnvSpec(name, 4, 1.0, True, 2)
        self.rng = as_generator(seed)
        self.state = np.zeros(2)

    def in_goal(self, pos) -> bool:
        return pos[0] >= self.params.goal_x and pos[1] >= self.params.goal_y

    def puddle_depth(self, pos) -> float:
        """Depth into the deepest puddle, zero when outside both."""
        depth = 0.0
        x, y = float(pos[0]), float(pos[1])
        for x0, y0, x1, y1 in self.params.puddles:
            dx, dy = x1 - x0, y1 - y0
            t = ((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy)
            t = min(max(t, 0.0), 1.0)
            dist = math.hypot(x - (x0 + t * dx), y - (y0 + t * dy))
            depth = max(depth, self.params.puddle_radius - dist)
        return depth

    def reward_at(self, pos) -> float:
        return -1.0 - self.params.penalty_scale * self.puddle_depth(pos)

    def reset(self) -> np.ndarray:
        while True:
            pos = self.rng.uniform(0.0, 1.0, size=2)
            if not self.in_goal(pos):
                self.state = pos
                return pos.copy()

    def step(self, action: int) -> StepOutcome:
        if not 0 <= action < 4:
            raise ValueError(f"puddle world action must be in [0, 4), got {action}")
        p = self.params
        dx, dy = self.moves[action]
        noise = self.rng.normal(0.0, p.noise_std, size=2) if p.noise_std > 0 else np.zeros(2)
        pos = np.clip(self.state + p.step_size * np.array([dx, dy]) + noise, 0.0, 1.0)
        self.state = pos
        return StepOutcome(pos.copy(), self.reward_at(pos), self.in_goal(pos))


@njit(cache=True)
def _cartpole_euler(s, force, g, mc, mp, hl, tau):
    x, x_dot, theta, theta_dot = s[0], s[1], s[2], s[3]
    total = mc + mp
    pml = mp * hl
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    temp = (force + pml * theta_dot ** 2 * sin_t) / total
    theta_acc = (g * sin_t - cos_t * temp) / (hl * (4.0 / 3.0 - mp * cos_t ** 2 / total))
    x_acc = temp - pml * theta_acc * cos_t / total
    out = np.empty(4)
    out[0] = x + tau * x_dot
    out[1] = x_dot + tau * x_acc
    out[2] = theta + tau * theta_dot
    out[3] = theta_dot + tau * theta_acc
    return out


class Cartpole:
    """Continuing pole balancing: failures cost a reward and teleport to a start state."""

    bounds = CARTPOLE_BOUNDS

    def __init__(self, params: CartpoleParams | None = None, seed=None, name: str = "cartpole"):
        self.params = params or CartpoleParams()
        self.spec = EnvSpec(name, 2, 0.99, False, 4)
        self.rng = as_generator(seed)
        self.state = np.zeros(4)

    def _start(self) -> np.ndarray:
        r = self.params.reset_range
        return self.rng.uniform(-r, r, size=4)

    def failed(self, s) -> bool:
        p = self.params
        return abs(s[0]) > p.x_threshold or abs(s[2]) > p.theta_threshold

    def reset(self) -> np.ndarray:
        self.state = self._start()
        return self.state.copy()

    def step(self, action: int) -> StepOutcome:
        if not 0 <= action < 2:
            raise ValueError(f"cartpole action must be in [0, 2), got {action}")
        p = self.params
        direction = 1.0 if action == 1 else -1.0
        noise = self.rng.normal(0.0, p.noise_std) if p.noise_std > 0 else 0.0
        force = p.force_mag * (direction + noise)
        nxt = _cartpole_euler(
            self.state, force, p.gravity, p.cart_mass, p.pole_mass, p.half_length, p.tau
        )
        if self.failed(nxt):
            self.state = self._start()
            return StepOutcome(self.state.copy(), p.failure_reward, False, True)
        self.state = nxt
        return StepOutcome(nxt.copy(), 0.0, False)


ENV_NAMES = ("acrobot", "acrobot-changed", "puddleworld", "cartpole")


def default_params(name: str):
    if name == "acrobot":
        return AcrobotParams()
    if name == "acrobot-changed":
        return AcrobotParams().changed()
    if name == "puddleworld":
        return PuddleParams()
    if name == "cartpole":
        return CartpoleParams()
    raise ConfigurationError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


def make_env(name: str, seed=None, params=None):
    """Build an environment handle; ``params`` overrides the defaults for ``name``."""
    params = params if params is not None else default_params(name)
    if name in ("acrobot", "acrobot-changed"):
        return Acrobot(params, seed, name)
    if name == "puddleworld":
        return PuddleWorld(params, seed)
    if name == "cartpole":
        return Cartpole(params, seed)
    raise ConfigurationError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


def env_spec(name: str) -> EnvSpec:
    return make_env(name, 0).spec


def env_bounds(name: str) -> tuple[np.ndarray, np.ndarray]:
    return make_env(name, 0).bounds

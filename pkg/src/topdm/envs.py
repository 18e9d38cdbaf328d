"""Desk-scale environment suite.

``point_reach`` and ``arm_reach`` are goal-based reachers with sparse and dense
reward variants. ``rotor_spin`` is a planar spinning task with a tilt penalty
and a drop condition. ``double_integrator`` is a linear-quadratic system whose
optimal return is available in closed form (:func:`riccati_optimal_return`).

All dynamics use semi-implicit Euler with ``dt = 0.05``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .sim import ContractViolation, Env, Observation

DT = 0.05


@dataclass(frozen=True)
class GoalEnvConfig:
    episode_length: int = 50
    distance_tolerance: float = 0.01
    reward_mode: str = "dense"

    def __post_init__(self):
        if self.distance_tolerance <= 0:
            raise ContractViolation("distance_tolerance must be positive")
        if self.episode_length < 1:
            raise ContractViolation("episode_length must be >= 1")
        if self.reward_mode not in ("sparse", "dense"):
            raise ContractViolation(f"unknown reward_mode {self.reward_mode!r}")


@dataclass(frozen=True)
class RotorSpinConfig:
    episode_length: int = 250
    tilt_penalty: float = 15.0
    num_actuators: int = 8
    tilt_limit: float = 0.6

    def __post_init__(self):
        if self.tilt_penalty < 0:
            raise ContractViolation("tilt_penalty must be >= 0")
        if self.num_actuators < 2:
            raise ContractViolation("num_actuators must be >= 2")
        if self.episode_length < 1:
            raise ContractViolation("episode_length must be >= 1")


def goal_reward(distance, d_max, tolerance, mode):
    """Dense: ``1 - min(1, d / d_max)``. Sparse: 1 inside the tolerance, else 0."""
    if mode == "dense":
        return 1.0 - np.minimum(1.0, distance / d_max)
    return (distance < tolerance).astype(np.float64)


class _GoalEnv(Env):
    goal_based = True
    goal_dim = 2
    d_max = 2.0

    def __init__(self, config: GoalEnvConfig):
        self.config = config
        self.episode_length = config.episode_length
        super().__init__()

    def _achieved(self, values):
        raise NotImplementedError

    def _goal(self, values):
        return values[:, -self.goal_dim:]

    def _distance(self, values):
        achieved = self._achieved(values)
        goal = self._goal(values)
        sq = np.zeros(values.shape[0])
        for j in range(self.goal_dim):
            diff = achieved[:, j] - goal[:, j]
            sq = sq + diff * diff
        return np.sqrt(sq)

    def _reward(self, next_values, actions):
        return goal_reward(
            self._distance(next_values),
            self.d_max,
            self.config.distance_tolerance,
            self.config.reward_mode,
        )

    def _success(self, values):
        return self._distance(values) < self.config.distance_tolerance

    def options(self) -> dict:
        return {"episode_length": self.episode_length, "distance_tolerance": self.config.distance_tolerance}

    def with_reward_mode(self, mode: str) -> "_GoalEnv":
        """Same dynamics and state, other reward variant."""
        other = type(self)(**self._ctor_kwargs(replace(self.config, reward_mode=mode)))
        other._values = self._values.copy()
        other._step = self._step
        return other

    def _ctor_kwargs(self, config):
        return {"config": config}

    def _fresh(self):
        return type(self)(**self._ctor_kwargs(self.config))


class PointMassReach(_GoalEnv):
    """2-D point mass pushed by a bounded force toward a goal.

    State layout: ``(x, y, vx, vy, gx, gy)``. The arena is the disc of radius 1,
    so ``d_max = 2``. Starts and goals are drawn uniformly from ``[-0.5, 0.5]^2``.
    """

    state_dim = 6
    action_dim = 2
    force_scale = 2.0
    damping = 0.5
    goal_low, goal_high = -0.5, 0.5

    def __init__(self, config: GoalEnvConfig = GoalEnvConfig()):
        self.env_id = f"point_reach-{config.reward_mode}"
        super().__init__(config)

    def _dynamics(self, values, actions):
        out = values.copy()
        for j in range(2):
            v = values[:, 2 + j] + DT * (self.force_scale * actions[:, j] - self.damping * values[:, 2 + j])
            out[:, 2 + j] = v
            out[:, j] = values[:, j] + DT * v
        return out

    def _achieved(self, values):
        return values[:, 0:2]

    def _observe(self, values):
        row = values[0]
        return Observation(
            components=row[0:4].copy(),
            achieved_goal=row[0:2].copy(),
            desired_goal=row[4:6].copy(),
        )

    def _initial_values(self, rng):
        start = rng.uniform(self.goal_low, self.goal_high, size=2)
        goal = rng.uniform(self.goal_low, self.goal_high, size=2)
        return np.concatenate([start, np.zeros(2), goal])


def forward_kinematics(angles, link_length=1.0):
    """Tip positions (N, 2) of planar chains with relative joint ``angles`` (N, L)."""
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    absolute = np.zeros(angles.shape[0])
    x = np.zeros(angles.shape[0])
    y = np.zeros(angles.shape[0])
    for j in range(angles.shape[1]):
        absolute = absolute + angles[:, j]
        x = x + link_length * np.cos(absolute)
        y = y + link_length * np.sin(absolute)
    return np.stack([x, y], axis=1)


class PlanarArmReach(_GoalEnv):
    """Torque-driven planar chain whose tip must reach a target point.

    Joints are independent damped rotors (no inter-link inertia coupling,
    gravity off). State layout: ``(q_1..q_L, qdot_1..qdot_L, gx, gy)``. The arm
    starts straight along +x at rest; goals are tips of uniformly random joint
    configurations, so they always lie in the disc of radius ``L``.
    """

    torque_scale = 4.0
    damping = 1.0
    link_length = 1.0

    def __init__(self, config: GoalEnvConfig = GoalEnvConfig(), num_links: int = 6):
        if num_links < 2:
            raise ContractViolation("num_links must be >= 2")
        self.num_links = num_links
        self.state_dim = 2 * num_links + 2
        self.action_dim = num_links
        self.d_max = 2.0 * num_links * self.link_length
        self.env_id = f"arm_reach-{config.reward_mode}"
        super().__init__(config)

    def _ctor_kwargs(self, config):
        return {"config": config, "num_links": self.num_links}

    def options(self) -> dict:
        return {**super().options(), "num_links": self.num_links}

    def _dynamics(self, values, actions):
        n = self.num_links
        out = values.copy()
        for j in range(n):
            qd = values[:, n + j] + DT * (self.torque_scale * actions[:, j] - self.damping * values[:, n + j])
            out[:, n + j] = qd
            out[:, j] = values[:, j] + DT * qd
        return out

    def _achieved(self, values):
        return forward_kinematics(values[:, : self.num_links], self.link_length)

    def _observe(self, values):
        row = values[0]
        n = self.num_links
        return Observation(
            components=np.concatenate([np.cos(row[:n]), np.sin(row[:n]), row[n : 2 * n]]),
            achieved_goal=self._achieved(values)[0],
            desired_goal=row[2 * n :].copy(),
        )

    def _initial_values(self, rng):
        n = self.num_links
        target_angles = rng.uniform(-math.pi, math.pi, size=n)
        goal = forward_kinematics(target_angles[None, :], self.link_length)[0]
        return np.concatenate([np.zeros(2 * n), goal])


def rotor_mixing(num_actuators: int, alignment: float, seed: int = 20200415):
    """Fixed pseudo-random actuator mixing vectors ``(spin, tilt)``, unit 2-norm.

    The tilt vector is ``alignment`` parts the spin direction plus a random
    orthogonal direction, so most patterns that spin the rotor also tilt it.
    """
    rng = np.random.default_rng(seed)
    spin = rng.normal(size=num_actuators)
    spin = spin / np.linalg.norm(spin)
    other = rng.normal(size=num_actuators)
    other = other - spin * (other @ spin)
    other = other / np.linalg.norm(other)
    tilt = alignment * spin + math.sqrt(1.0 - alignment * alignment) * other
    return spin, tilt


class RotorSpin(Env):
    """Planar stand-in for pen spinning.

    State layout: ``(theta, omega, phi, phidot, dropped)``. Actuators act on the
    spin axis and the tilt axis through fixed mixing vectors. Spin is opposed
    by viscous damping and Coulomb friction, and a rotor at rest only starts
    turning once the drive exceeds ``static_friction``. Tilt is unstable at
    rest and stiffens as the rotor spins faster. Reward is
    ``omega - tilt_penalty * |phi|``. Once ``|phi|`` exceeds ``tilt_limit`` the
    rotor is dropped: the state freezes and every later step pays ``-1``.
    """

    env_id = "rotor_spin"
    state_dim = 5
    alignment = 0.85
    spin_gain = 3.0
    spin_damping = 1.0
    friction = 1.0
    static_friction = 5.0
    tilt_gain = 2.0
    tilt_instability = 2.0
    gyro = 0.5
    tilt_damping = 0.5

    def __init__(self, config: RotorSpinConfig = RotorSpinConfig()):
        self.config = config
        self.episode_length = config.episode_length
        self.action_dim = config.num_actuators
        self.spin_mix, self.tilt_mix = rotor_mixing(config.num_actuators, self.alignment)
        super().__init__()

    def _fresh(self):
        return type(self)(self.config)

    def options(self) -> dict:
        return asdict(self.config)

    def _dynamics(self, values, actions):
        theta, omega, phi, phidot, dropped = (values[:, i] for i in range(5))
        spin_torque = np.zeros(values.shape[0])
        tilt_torque = np.zeros(values.shape[0])
        for i in range(self.action_dim):
            spin_torque = spin_torque + self.spin_mix[i] * actions[:, i]
            tilt_torque = tilt_torque + self.tilt_mix[i] * actions[:, i]

        drive = self.spin_gain * spin_torque
        w = omega + DT * (drive - self.spin_damping * omega)
        w = np.sign(w) * np.maximum(0.0, np.abs(w) - DT * self.friction)
        stuck = (omega == 0.0) & (np.abs(drive) <= self.static_friction)
        w = np.where(stuck, 0.0, w)
        stiffness = self.tilt_instability - self.gyro * omega * omega
        pd = phidot + DT * (stiffness * np.sin(phi) + self.tilt_gain * tilt_torque - self.tilt_damping * phidot)
        p = phi + DT * pd
        th = theta + DT * w
        now_dropped = np.where(np.abs(p) > self.config.tilt_limit, 1.0, 0.0)

        frozen = dropped > 0.5
        out = np.empty_like(values)
        out[:, 0] = np.where(frozen, theta, th)
        out[:, 1] = np.where(frozen, omega, w)
        out[:, 2] = np.where(frozen, phi, p)
        out[:, 3] = np.where(frozen, phidot, pd)
        out[:, 4] = np.where(frozen, 1.0, now_dropped)
        return out

    def reward_of(self, omega, phi, dropped=0.0):
        """``omega - tilt_penalty * |phi|``, or ``-1`` once dropped."""
        return np.where(
            np.asarray(dropped) > 0.5,
            -1.0,
            np.asarray(omega, dtype=np.float64) - self.config.tilt_penalty * np.abs(phi),
        )

    def _reward(self, next_values, actions):
        return self.reward_of(next_values[:, 1], next_values[:, 2], next_values[:, 4])

    def _observe(self, values):
        row = values[0]
        return Observation(
            components=np.array([math.cos(row[0]), math.sin(row[0]), row[1] / 5.0, row[2], row[3], row[4]])
        )

    def _initial_values(self, rng):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        phi = rng.uniform(-0.05, 0.05)
        return np.array([theta, 0.0, phi, 0.0, 0.0])


class DoubleIntegrator(Env):
    """1-D point mass with reward ``-(x^2 + 0.1 v^2 + 0.01 a^2)``.

    The action drives the mass through ``action_gain``, so ``dv = gain * a * dt``.
    Reward is charged on the post-step state. Resets draw ``|x0|`` from
    ``[0.5, 1]`` with a random sign and ``v0`` from ``[-0.5, 0.5]``. With gain 80
    the unconstrained optimal controls from anywhere in that box stay within
    ``[-1, 1]``, so the Riccati value is also the optimum of the bounded problem.
    """

    env_id = "double_integrator"
    state_dim = 2
    action_dim = 1
    x_weight, v_weight, a_weight = 1.0, 0.1, 0.01
    action_gain = 80.0
    x0_low, x0_high = 0.5, 1.0
    v0_range = 0.5

    def __init__(self, episode_length: int = 50):
        self.episode_length = episode_length
        super().__init__()

    def _fresh(self):
        return DoubleIntegrator(self.episode_length)

    def _dynamics(self, values, actions):
        out = np.empty_like(values)
        v = values[:, 1] + DT * self.action_gain * actions[:, 0]
        out[:, 1] = v
        out[:, 0] = values[:, 0] + DT * v
        return out

    def _reward(self, next_values, actions):
        x, v, a = next_values[:, 0], next_values[:, 1], actions[:, 0]
        return -(self.x_weight * x * x + self.v_weight * v * v + self.a_weight * a * a)

    def _observe(self, values):
        return Observation(components=values[0].copy())

    def _initial_values(self, rng):
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        return np.array([
            sign * rng.uniform(self.x0_low, self.x0_high),
            rng.uniform(-self.v0_range, self.v0_range),
        ])


def riccati_optimal_return(x0, v0, horizon, dt=DT, weights=(1.0, 0.1, 0.01), gain=DoubleIntegrator.action_gain):
    """Optimal unconstrained return of the double integrator over ``horizon`` steps.

    Returns ``(optimal_return, controls)``, ``controls`` being the optimal
    open-loop sequence from ``(x0, v0)``.
    """
    qx, qv, r = weights
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = gain * np.array([[dt * dt], [dt]])
    Q = np.diag([qx, qv])
    R = np.array([[r]])
    P = np.zeros((2, 2))
    gains = []
    for _ in range(horizon):
        S = Q + P
        K = np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
        gains.append(K)
        P = A.T @ S @ A - A.T @ S @ B @ K
    gains.reverse()
    x = np.array([x0, v0], dtype=np.float64)
    value = -float(x @ P @ x)
    controls = []
    for K in gains:
        u = -(K @ x)
        controls.append(float(u[0]))
        x = A @ x + B @ u
    return value, np.array(controls)


def point_mass_reach(config: GoalEnvConfig = GoalEnvConfig()) -> PointMassReach:
    return PointMassReach(config)


def planar_arm_reach(config: GoalEnvConfig = GoalEnvConfig(), num_links: int = 6) -> PlanarArmReach:
    return PlanarArmReach(config, num_links)


def rotor_spin(config: RotorSpinConfig = RotorSpinConfig()) -> RotorSpin:
    return RotorSpin(config)


def double_integrator_goal(episode_length: int = 50) -> DoubleIntegrator:
    return DoubleIntegrator(episode_length)


ENV_IDS = (
    "point_reach-sparse",
    "point_reach-dense",
    "arm_reach-sparse",
    "arm_reach-dense",
    "rotor_spin",
    "double_integrator",
)


def make_env(env_id: str, **options) -> Env:
    """Build an environment from its registry id.

    ``options`` may carry ``episode_length``, ``distance_tolerance``,
    ``num_links`` and the :class:`RotorSpinConfig` fields.
    """
    base, _, mode = env_id.partition("-")
    if base in ("point_reach", "arm_reach"):
        if mode not in ("sparse", "dense"):
            raise ContractViolation(f"unknown env id {env_id!r}")
        cfg = GoalEnvConfig(
            episode_length=int(options.get("episode_length", 50)),
            distance_tolerance=float(options.get("distance_tolerance", 0.01)),
            reward_mode=mode,
        )
        if base == "point_reach":
            return PointMassReach(cfg)
        return PlanarArmReach(cfg, int(options.get("num_links", 6)))
    if env_id == "rotor_spin":
        cfg = RotorSpinConfig(
            episode_length=int(options.get("episode_length", 250)),
            tilt_penalty=float(options.get("tilt_penalty", 15.0)),
            num_actuators=int(options.get("num_actuators", 8)),
            tilt_limit=float(options.get("tilt_limit", 0.6)),
        )
        return RotorSpin(cfg)
    if env_id == "double_integrator":
        return DoubleIntegrator(int(options.get("episode_length", 50)))
    raise ContractViolation(f"unknown env id {env_id!r}")


def known_env_id(env_id: str) -> bool:
    if env_id not in ENV_IDS:
        warnings.warn(f"env id {env_id!r} is not in the registry", stacklevel=2)
        return False
    return True

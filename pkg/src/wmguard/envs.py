"""Minimal deterministic plants with scheduled perturbations.

Two environments are provided:

``planar-hover``
    A point-mass vehicle in the vertical x/y plane (y up). Two thrust
    commands in [-1, 1] produce accelerations ``MAX_THRUST_ACCEL * u``
    along x and y; gravity pulls along -y. The vehicle flies a cyclic
    list of waypoints. Observation (d=10): position(2), velocity(2), the
    kinematic acceleration applied on the last step (2, includes gravity),
    and the offsets from the vehicle to the next two waypoints (4).

``two-link-arm``
    A planar two-link arm in the horizontal plane (gravity has no effect
    on it) with point masses at the link ends and viscous joint damping.
    Two joint torque commands in [-1, 1] scaled by ``ARM_TORQUE``.
    Observation (d=8): sin/cos of each joint angle interleaved
    (sin q1, cos q1, sin q2, cos q2), joint velocities(2), fingertip(2).

Both are integrated with semi-implicit Euler: ``v' = v + dt*a``,
``p' = p + dt*v'``. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

PLANAR_HOVER = "planar-hover"
TWO_LINK_ARM = "two-link-arm"
ENV_KINDS = (PLANAR_HOVER, TWO_LINK_ARM)

GRAVITY_SCALE = "gravity-scale"
ACTUATOR_GAIN = "actuator-gain"
IMPULSE_FORCE = "impulse-force"
PERTURBATION_KINDS = (GRAVITY_SCALE, ACTUATOR_GAIN, IMPULSE_FORCE)

# planar-hover
MAX_THRUST_ACCEL = 2.0 * 9.81  # m/s^2 at |u| = 1
APPROACH_REWARD = 1.0  # per metre of approach
TRAVERSAL_REWARD = 10.0
WAYPOINT_RADIUS = 0.2  # m
UNIT_SQUARE = ((1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0))

# two-link-arm
ARM_MASSES = (1.0, 1.0)  # kg
ARM_LENGTHS = (0.5, 0.5)  # m
ARM_DAMPING = 0.1  # N m s / rad
ARM_TORQUE = 2.0  # N m at |u| = 1
ARM_TARGET = (0.5, 0.5)

OBS_LABELS = {
    PLANAR_HOVER: (
        "x", "y", "vx", "vy", "ax", "ay",
        "wp1_dx", "wp1_dy", "wp2_dx", "wp2_dy",
    ),
    TWO_LINK_ARM: (
        "sin_q1", "cos_q1", "sin_q2", "cos_q2", "dq1", "dq2", "tip_x", "tip_y",
    ),
}
ACTION_DIM = {PLANAR_HOVER: 2, TWO_LINK_ARM: 2}


class EnvError(ValueError):
    """Invalid environment configuration, action or schedule."""


def obs_dim(env_kind: str) -> int:
    return len(OBS_LABELS[env_kind])


def act_dim(env_kind: str) -> int:
    return ACTION_DIM[env_kind]


@dataclass(frozen=True)
class EnvConfig:
    env_kind: str = PLANAR_HOVER
    dt: float = 0.05
    gravity: float = 9.81
    actuator_gains: tuple[float, ...] = (1.0, 1.0)
    waypoints: tuple[tuple[float, float], ...] = UNIT_SQUARE
    episode_len: int = 1000
    seed: int = 0
    sensor_noise: float = 0.0  # std of additive Gaussian sensor noise

    def __post_init__(self) -> None:
        object.__setattr__(self, "actuator_gains", tuple(float(g) for g in self.actuator_gains))
        object.__setattr__(
            self, "waypoints", tuple((float(w[0]), float(w[1])) for w in self.waypoints)
        )

    def validate(self) -> None:
        if self.env_kind not in ENV_KINDS:
            raise EnvError(f"unknown env_kind {self.env_kind!r}")
        if not self.dt > 0:
            raise EnvError(f"dt must be positive, got {self.dt}")
        if self.episode_len <= 0:
            raise EnvError(f"episode_len must be positive, got {self.episode_len}")
        if len(self.actuator_gains) != ACTION_DIM[self.env_kind]:
            raise EnvError(
                f"{self.env_kind} needs {ACTION_DIM[self.env_kind]} actuator gains, "
                f"got {len(self.actuator_gains)}"
            )
        if not all(g > 0 and math.isfinite(g) for g in self.actuator_gains):
            raise EnvError("actuator_gains must all be positive and finite")
        if self.env_kind == PLANAR_HOVER and not self.waypoints:
            raise EnvError("planar-hover needs at least one waypoint")
        if self.sensor_noise < 0:
            raise EnvError("sensor_noise must be non-negative")


@dataclass(frozen=True)
class PerturbationEvent:
    """A scheduled change to the plant.

    ``gravity-scale`` and ``actuator-gain`` persist from ``onset_step`` to the
    end of the episode; ``impulse-force`` adds ``magnitude`` (an acceleration
    for planar-hover, a joint torque for the arm) for ``duration`` steps.
    For ``actuator-gain`` a scalar magnitude multiplies actuator ``target``;
    a vector magnitude multiplies every actuator.
    """

    kind: str
    onset_step: int
    magnitude: float | tuple[float, ...] = 1.0
    duration: int = 1
    target: int | None = None

    def __post_init__(self) -> None:
        if not np.isscalar(self.magnitude):
            object.__setattr__(self, "magnitude", tuple(float(m) for m in self.magnitude))

    def validate(self, n_actuators: int) -> None:
        if self.kind not in PERTURBATION_KINDS:
            raise EnvError(f"unknown perturbation kind {self.kind!r}")
        if self.onset_step < 0:
            raise EnvError("onset_step must be >= 0")
        mag = np.atleast_1d(np.asarray(self.magnitude, dtype=float))
        if not np.all(np.isfinite(mag)):
            raise EnvError("perturbation magnitude must be finite")
        if self.kind == IMPULSE_FORCE:
            if self.duration < 1:
                raise EnvError("impulse duration must be >= 1")
            if mag.size != 2:
                raise EnvError("impulse magnitude must be a 2-vector")
        if self.kind == ACTUATOR_GAIN:
            if mag.size == 1 and self.target is None:
                raise EnvError("scalar actuator-gain needs a target actuator")
            if mag.size not in (1, n_actuators):
                raise EnvError("actuator-gain magnitude must be scalar or per-actuator")
            if self.target is not None and not 0 <= self.target < n_actuators:
                raise EnvError(f"actuator target {self.target} out of range")
        if self.kind == GRAVITY_SCALE and mag.size != 1:
            raise EnvError("gravity-scale magnitude must be scalar")

    def active(self, step: int) -> bool:
        if step < self.onset_step:
            return False
        if self.kind == IMPULSE_FORCE:
            return step < self.onset_step + self.duration
        return True


@dataclass(frozen=True)
class EnvState:
    positions: np.ndarray
    velocities: np.ndarray
    last_accel: np.ndarray
    waypoint_index: int = 0
    step: int = 0
    seed: int = 0


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


@dataclass(frozen=True)
class Effects:
    """Plant parameters in force for one transition."""

    gains: np.ndarray
    gravity: float
    external: np.ndarray = field(default_factory=lambda: np.zeros(2))


def effective_plant(config: EnvConfig, schedule: Sequence[PerturbationEvent], step: int) -> Effects:
    gains = np.array(config.actuator_gains, dtype=float)
    gravity = float(config.gravity)
    external = np.zeros(2)
    for event in schedule:
        if not event.active(step):
            continue
        if event.kind == GRAVITY_SCALE:
            gravity *= float(event.magnitude)
        elif event.kind == ACTUATOR_GAIN:
            mag = np.atleast_1d(np.asarray(event.magnitude, dtype=float))
            if event.target is not None and mag.size == 1:
                gains[event.target] *= mag[0]
            else:
                gains = gains * mag
        else:
            external = external + np.asarray(event.magnitude, dtype=float)
    return Effects(gains=gains, gravity=gravity, external=external)


def env_reset(config: EnvConfig, seed: int | None = None) -> tuple[EnvState, np.ndarray]:
    config.validate()
    seed = config.seed if seed is None else int(seed)
    state = EnvState(
        positions=np.zeros(2),
        velocities=np.zeros(2),
        last_accel=np.zeros(2),
        waypoint_index=0,
        step=0,
        seed=seed,
    )
    return state, observe(state, config)


def fingertip(q: np.ndarray) -> np.ndarray:
    l1, l2 = ARM_LENGTHS
    return np.array(
        [
            l1 * math.cos(q[0]) + l2 * math.cos(q[0] + q[1]),
            l1 * math.sin(q[0]) + l2 * math.sin(q[0] + q[1]),
        ]
    )


def arm_acceleration(q: np.ndarray, dq: np.ndarray, torque: np.ndarray) -> np.ndarray:
    """Joint accelerations of the two-link arm under ``torque``."""
    m1, m2 = ARM_MASSES
    l1, l2 = ARM_LENGTHS
    c2, s2 = math.cos(q[1]), math.sin(q[1])
    m11 = m1 * l1**2 + m2 * (l1**2 + l2**2 + 2.0 * l1 * l2 * c2)
    m12 = m2 * (l2**2 + l1 * l2 * c2)
    m22 = m2 * l2**2
    hc = m2 * l1 * l2 * s2
    bias = np.array([-hc * (2.0 * dq[0] * dq[1] + dq[1] ** 2), hc * dq[0] ** 2])
    rhs = torque - bias - ARM_DAMPING * dq
    det = m11 * m22 - m12 * m12
    return np.array(
        [(m22 * rhs[0] - m12 * rhs[1]) / det, (m11 * rhs[1] - m12 * rhs[0]) / det]
    )


def _check_action(action, config: EnvConfig) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    if a.shape != (ACTION_DIM[config.env_kind],):
        raise EnvError(
            f"action shape {a.shape} does not match {config.env_kind} "
            f"({ACTION_DIM[config.env_kind]},)"
        )
    if not np.all(np.isfinite(a)):
        raise EnvError("action contains NaN or Inf")
    return np.clip(a, -1.0, 1.0)


def env_step(
    state: EnvState,
    action,
    config: EnvConfig,
    schedule: Sequence[PerturbationEvent] = (),
) -> tuple[EnvState, StepResult]:
    a = _check_action(action, config)
    n_act = ACTION_DIM[config.env_kind]
    for event in schedule:
        event.validate(n_act)
    fx = effective_plant(config, schedule, state.step)
    u = a * fx.gains
    p, v = state.positions, state.velocities
    if config.env_kind == PLANAR_HOVER:
        acc = MAX_THRUST_ACCEL * u + fx.external
        acc[1] -= fx.gravity
    else:
        acc = arm_acceleration(p, v, ARM_TORQUE * u + fx.external)
    v_new = v + config.dt * acc
    p_new = p + config.dt * v_new

    index = state.waypoint_index
    if config.env_kind == PLANAR_HOVER:
        wp = np.asarray(config.waypoints[index])
        d_before = float(np.linalg.norm(wp - p))
        d_after = float(np.linalg.norm(wp - p_new))
        reward = APPROACH_REWARD * (d_before - d_after)
        if d_after < WAYPOINT_RADIUS:
            reward += TRAVERSAL_REWARD
            index = (index + 1) % len(config.waypoints)
    else:
        target = np.asarray(config.waypoints[0] if config.waypoints else ARM_TARGET)
        dist = float(np.linalg.norm(fingertip(p_new) - target))
        reward = 1.0 - dist / sum(ARM_LENGTHS)

    new_state = replace(
        state,
        positions=p_new,
        velocities=v_new,
        last_accel=acc,
        waypoint_index=index,
        step=state.step + 1,
    )
    done = new_state.step >= config.episode_len
    return new_state, StepResult(observe(new_state, config), float(reward), done)


def observe(state: EnvState, config: EnvConfig) -> np.ndarray:
    p, v = state.positions, state.velocities
    if config.env_kind == PLANAR_HOVER:
        wps = config.waypoints
        wp1 = np.asarray(wps[state.waypoint_index])
        wp2 = np.asarray(wps[(state.waypoint_index + 1) % len(wps)])
        obs = np.concatenate([p, v, state.last_accel, wp1 - p, wp2 - p])
    else:
        obs = np.concatenate(
            [
                [math.sin(p[0]), math.cos(p[0]), math.sin(p[1]), math.cos(p[1])],
                v,
                fingertip(p),
            ]
        )
    if config.sensor_noise > 0:
        rng = np.random.default_rng([state.seed, state.step])
        obs = obs + rng.normal(0.0, config.sensor_noise, size=obs.shape)
    return obs

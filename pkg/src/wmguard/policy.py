"""Controllers: scripted PD laws on observations and a behaviour-cloned
actor over model states."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import MAX_THRUST_ACCEL, PLANAR_HOVER, TWO_LINK_ARM
from .model import (
    ActorFn,
    ModelState,
    Params,
    WorldModel,
    decode_obs,
    filter_sequence,
    prior_latent,
    sequence_step,
)
from .training import Adam, ReplayBuffer, clip_by_global_norm

NOMINAL_GRAVITY = 9.81


@dataclass(frozen=True)
class ScriptedPolicyConfig:
    """PD gains. On planar-hover the law drives the active-waypoint offset to
    zero and feeds forward hover thrust. On the arm each joint runs
    ``u = -kp*q + kd*(1 - (q/amplitude)^2)*dq``: PD about the home posture
    with amplitude-regulating damping, which keeps the arm swinging."""

    env_kind: str = PLANAR_HOVER
    kp: float = 0.5
    kd: float = 0.2
    amplitude: float = 0.5

    def __post_init__(self) -> None:
        if not (math.isfinite(self.kp) and math.isfinite(self.kd)) or self.kp <= 0:
            raise ValueError("kp must be positive and gains finite")


def default_scripted(env_kind: str) -> ScriptedPolicyConfig:
    if env_kind == TWO_LINK_ARM:
        return ScriptedPolicyConfig(TWO_LINK_ARM, kp=0.5, kd=0.1, amplitude=0.5)
    return ScriptedPolicyConfig(PLANAR_HOVER, kp=0.5, kd=0.2)


def scripted_action(observation: np.ndarray, config: ScriptedPolicyConfig, clip: bool = True) -> np.ndarray:
    obs = np.asarray(observation, dtype=float)
    if config.env_kind == PLANAR_HOVER:
        u = config.kp * obs[..., 6:8] - config.kd * obs[..., 2:4]
        u[..., 1] += NOMINAL_GRAVITY / MAX_THRUST_ACCEL
    else:
        q = np.arctan2(obs[..., [0, 2]], obs[..., [1, 3]])
        dq = obs[..., 4:6]
        u = -config.kp * q + config.kd * (1.0 - (q / config.amplitude) ** 2) * dq
    return np.clip(u, -1.0, 1.0) if clip else u


def scripted_policy(config: ScriptedPolicyConfig):
    return lambda obs: scripted_action(obs, config)


def init_actor(d_in: int, d_act: int, hidden: int, rng: np.random.Generator) -> Params:
    return {
        "w1": rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, d_act)),
        "b2": np.zeros(d_act),
    }


def latent_action(actor: Params, s: ModelState) -> np.ndarray:
    hz = np.concatenate([s.h, s.z], axis=-1)
    if not np.all(np.isfinite(hz)):
        raise FloatingPointError("non-finite model state given to actor")
    return np.tanh(np.tanh(hz @ actor["w1"] + actor["b1"]) @ actor["w2"] + actor["b2"])


def latent_actor(actor: Params) -> ActorFn:
    return lambda s: latent_action(actor, s)


def fallback_actor(model: WorldModel, config: ScriptedPolicyConfig) -> ActorFn:
    """Decode the model state to an observation and run the scripted law on it."""

    def act(s: ModelState) -> np.ndarray:
        return scripted_action(model.denormalize(decode_obs(model.params, s)), config)

    return act


@dataclass(frozen=True)
class CloneConfig:
    steps: int = 30000
    learning_rate: float = 3e-3
    batch_size: int = 256
    hidden: int = 64
    seed: int = 0
    imagined_horizon: int = 16  # 0 disables imagined-state samples
    imagined_stride: int = 4


def filtered_dataset(
    buffer: ReplayBuffer, model: WorldModel, horizon: int = 0, stride: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Model states paired with the action actually taken at that time.

    States come from teacher-forced filtering of every episode. With
    ``horizon > 0`` the set also gets open-loop imagined states: from every
    ``stride``-th filtered state the model is rolled forward on the recorded
    actions, and the state reached after ``i`` steps is labelled with the
    action recorded ``i`` steps later. Those are the states the actor sees
    during imagination.
    """
    states, actions = [], []
    for ep in buffer.episodes:
        H, Z = filter_sequence(model.params, model.normalize(ep.observations[:-1]), ep.actions)
        states.append(np.concatenate([H, Z], axis=1))
        actions.append(ep.actions)
        if horizon <= 1:
            continue
        starts = np.arange(0, len(ep) - horizon + 1, stride)
        h, z = H[starts], Z[starts]
        for i in range(1, horizon):
            h = sequence_step(model.params, h, z, ep.actions[starts + i - 1])
            z = prior_latent(model.params, h)
            states.append(np.concatenate([h, z], axis=1))
            actions.append(ep.actions[starts + i])
    return np.concatenate(states), np.concatenate(actions)


def _actor_grads(actor: Params, S: np.ndarray, A: np.ndarray) -> tuple[Params, float]:
    a1 = np.tanh(S @ actor["w1"] + actor["b1"])
    out = np.tanh(a1 @ actor["w2"] + actor["b2"])
    err = out - A
    loss = float(np.mean(err**2))
    dout = 2.0 * err / err.size * (1.0 - out**2)
    da1 = (dout @ actor["w2"].T) * (1.0 - a1**2)
    grads = {
        "w2": a1.T @ dout,
        "b2": dout.sum(axis=0),
        "w1": S.T @ da1,
        "b1": da1.sum(axis=0),
    }
    return grads, loss


def clone_actor(
    buffer: ReplayBuffer,
    model: WorldModel,
    config: CloneConfig = CloneConfig(),
    actor: Params | None = None,
) -> Params:
    """Regress ``latent_action(s_t)`` onto the recorded actions with a
    cosine-decayed learning rate."""
    rng = np.random.default_rng(config.seed)
    S, A = filtered_dataset(buffer, model, config.imagined_horizon, config.imagined_stride)
    if actor is None:
        actor = init_actor(S.shape[1], A.shape[1], config.hidden, rng)
    actor = {k: v.copy() for k, v in actor.items()}
    opt = Adam(actor, config.learning_rate)
    for step in range(config.steps):
        opt.lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
        idx = rng.integers(0, len(S), size=config.batch_size)
        grads, loss = _actor_grads(actor, S[idx], A[idx])
        if not math.isfinite(loss):
            raise FloatingPointError(f"actor cloning diverged at step {step}")
        grads, _ = clip_by_global_norm(grads, 100.0)
        actor = opt.update(actor, grads)
    return actor

"""Held-out fidelity measurements for a trained world model.

All errors are mean absolute differences in normalized observation units.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import ActorFn, ModelState, WorldModel, decode_obs, decode_reward, filter_sequence, imagine, prior_latent
from .training import Episode


def _filtered(model: WorldModel, ep: Episode):
    X = model.normalize(ep.observations)
    H, Z = filter_sequence(model.params, X, ep.actions)
    return X, H, Z


def one_step_error(model: WorldModel, episodes: Sequence[Episode]) -> float:
    """Predict ``x_{t+1}`` from the filtered state at ``t`` and the executed action."""
    errs = []
    for ep in episodes:
        X, H, _ = _filtered(model, ep)
        h_next = H[1:]
        x_hat = decode_obs(model.params, ModelState(h_next, prior_latent(model.params, h_next)))
        errs.append(np.abs(x_hat - X[1:]).mean())
    return float(np.mean(errs))


def one_step_reward_error(model: WorldModel, episodes: Sequence[Episode]) -> float:
    errs = []
    for ep in episodes:
        _, H, _ = _filtered(model, ep)
        h_next = H[1:]
        r_hat = decode_reward(model.params, ModelState(h_next, prior_latent(model.params, h_next)))
        errs.append(np.abs(r_hat - ep.rewards).mean())
    return float(np.mean(errs))


def persistence_error(model: WorldModel, episodes: Sequence[Episode]) -> float:
    """Error of the trivial predictor ``x_{t+1} = x_t``."""
    errs = [np.abs(np.diff(model.normalize(ep.observations), axis=0)).mean() for ep in episodes]
    return float(np.mean(errs))


def imagined_error(
    model: WorldModel,
    actor: ActorFn,
    episodes: Sequence[Episode],
    n: int | None = None,
    stride: int = 1,
) -> float:
    """Horizon-averaged error of ``n``-step imagination issued every
    ``stride`` steps, the same quantity the monitor scores."""
    n = model.dims.n_horizon if n is None else n
    errs = []
    for ep in episodes:
        X, H, Z = _filtered(model, ep)
        starts = np.arange(0, len(ep) - n + 1, stride)
        rollout = imagine(model.params, ModelState(H[starts], Z[starts]), actor, n)
        actual = np.stack([X[starts + i] for i in range(1, n + 1)])
        errs.append(np.abs(rollout.obs - actual).mean())
    return float(np.mean(errs))


def imagined_error_profile(
    model: WorldModel, actor: ActorFn, episodes: Sequence[Episode], n: int | None = None
) -> np.ndarray:
    """Mean error at each imagined step ``i = 1..n``."""
    n = model.dims.n_horizon if n is None else n
    total = np.zeros(n)
    for ep in episodes:
        X, H, Z = _filtered(model, ep)
        starts = np.arange(0, len(ep) - n + 1)
        rollout = imagine(model.params, ModelState(H[starts], Z[starts]), actor, n)
        actual = np.stack([X[starts + i] for i in range(1, n + 1)])
        total += np.abs(rollout.obs - actual).mean(axis=(1, 2))
    return total / len(episodes)


def action_discrepancy(model: WorldModel, actor: ActorFn, episodes: Sequence[Episode]) -> float:
    """Mean |actor(s_t) - a_t| over held-out steps and action components."""
    errs = []
    for ep in episodes:
        _, H, Z = _filtered(model, ep)
        a_hat = actor(ModelState(H[:-1], Z[:-1]))
        errs.append(np.abs(a_hat - ep.actions).mean())
    return float(np.mean(errs))

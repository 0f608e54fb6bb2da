"""Recurrent latent dynamics model.

The model state is ``s = (h, z)``: a deterministic recurrent vector ``h``
and a latent code ``z``. Observations enter through the encoder (posterior
latent), the recurrent cell advances ``h`` from ``(h, z, a)``, and the prior
head predicts ``z`` from ``h`` alone, which is what makes open-loop
imagination possible.

Index convention: ``h_{t+1} = sequence_step(h_t, z_t, a_t)`` and
``z_t = encode(x_t, h_t)``; ``decode_reward(s_{t+1})`` predicts the reward
received on the transition into ``x_{t+1}``.

All forward functions accept arrays with arbitrary leading batch axes and
operate in normalized observation units.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

Params = dict[str, np.ndarray]

LATENT_SAMPLE_STD = 0.1
CHECKPOINT_FORMAT = "wmguard-checkpoint"
CHECKPOINT_VERSION = 1


class ModelDivergence(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf."""


@dataclass(frozen=True)
class ModelDims:
    d_obs: int
    d_act: int
    d_h: int = 64
    d_z: int = 16
    d_hidden: int = 64
    n_horizon: int = 16

    def __post_init__(self) -> None:
        for name in ("d_obs", "d_act", "d_h", "d_z", "d_hidden", "n_horizon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# Documented parameter order of the flat checkpoint layout.
PARAM_ORDER = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "gru_wr", "gru_br", "gru_wu", "gru_bu", "gru_wc", "gru_bc",
    "prior_w", "prior_b",
    "dec_w1", "dec_b1", "dec_w2", "dec_b2",
    "rew_w1", "rew_b1", "rew_w2", "rew_b2",
)


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    gru_in = dims.d_z + dims.d_act + dims.d_h
    hz = dims.d_h + dims.d_z
    return {
        "enc_w1": (dims.d_obs + dims.d_h, dims.d_hidden),
        "enc_b1": (dims.d_hidden,),
        "enc_w2": (dims.d_hidden, dims.d_z),
        "enc_b2": (dims.d_z,),
        "gru_wr": (gru_in, dims.d_h),
        "gru_br": (dims.d_h,),
        "gru_wu": (gru_in, dims.d_h),
        "gru_bu": (dims.d_h,),
        "gru_wc": (gru_in, dims.d_h),
        "gru_bc": (dims.d_h,),
        "prior_w": (dims.d_h, dims.d_z),
        "prior_b": (dims.d_z,),
        "dec_w1": (hz, dims.d_hidden),
        "dec_b1": (dims.d_hidden,),
        "dec_w2": (dims.d_hidden, dims.d_obs),
        "dec_b2": (dims.d_obs,),
        "rew_w1": (hz, dims.d_hidden),
        "rew_b1": (dims.d_hidden,),
        "rew_w2": (dims.d_hidden, 1),
        "rew_b2": (1,),
    }


def zero_params(dims: ModelDims) -> Params:
    return {k: np.zeros(s) for k, s in param_shapes(dims).items()}


def init_params(dims: ModelDims, rng: np.random.Generator) -> Params:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    params = {}
    for name, shape in param_shapes(dims).items():
        if len(shape) == 2:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ModelDivergence("non-finite value in world model input")


@dataclass(frozen=True)
class ModelState:
    h: np.ndarray
    z: np.ndarray


def encode(
    params: Params,
    observation: np.ndarray,
    h: np.ndarray,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Posterior latent mean; a sample around it when ``rng`` is given."""
    _check(observation, h)
    hidden = np.tanh(np.concatenate([observation, h], axis=-1) @ params["enc_w1"] + params["enc_b1"])
    z = hidden @ params["enc_w2"] + params["enc_b2"]
    if rng is not None:
        z = z + rng.normal(0.0, LATENT_SAMPLE_STD, size=z.shape)
    return z


def sequence_step(params: Params, h: np.ndarray, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Gated recurrent update of ``h`` from input ``(z, a)``."""
    _check(h, z, a)
    za = np.concatenate([z, a], axis=-1)
    zah = np.concatenate([za, h], axis=-1)
    r = sigmoid(zah @ params["gru_wr"] + params["gru_br"])
    u = sigmoid(zah @ params["gru_wu"] + params["gru_bu"])
    c = np.tanh(np.concatenate([za, r * h], axis=-1) @ params["gru_wc"] + params["gru_bc"])
    return (1.0 - u) * h + u * c


def prior_latent(
    params: Params, h: np.ndarray, rng: np.random.Generator | None = None
) -> np.ndarray:
    _check(h)
    z = h @ params["prior_w"] + params["prior_b"]
    if rng is not None:
        z = z + rng.normal(0.0, LATENT_SAMPLE_STD, size=z.shape)
    return z


def decode_obs(params: Params, s: ModelState) -> np.ndarray:
    _check(s.h, s.z)
    hz = np.concatenate([s.h, s.z], axis=-1)
    return np.tanh(hz @ params["dec_w1"] + params["dec_b1"]) @ params["dec_w2"] + params["dec_b2"]


def decode_reward(params: Params, s: ModelState) -> np.ndarray:
    """Predicted reward; a 0-d array for unbatched input."""
    _check(s.h, s.z)
    hz = np.concatenate([s.h, s.z], axis=-1)
    out = np.tanh(hz @ params["rew_w1"] + params["rew_b1"]) @ params["rew_w2"] + params["rew_b2"]
    return out[..., 0]


ActorFn = Callable[[ModelState], np.ndarray]


def filter_sequence(
    params: Params, observations: np.ndarray, actions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced filtering from ``h = 0``.

    ``observations`` is ``(T, ..., d_obs)`` (normalized) and ``actions``
    ``(T, ..., d_act)`` or one step shorter. Returns ``H, Z`` with ``H[t]``,
    ``Z[t]`` the state after seeing ``x_t``.
    """
    T = observations.shape[0]
    h = np.zeros((*observations.shape[1:-1], params["prior_w"].shape[0]))
    H, Z = [], []
    for t in range(T):
        z = encode(params, observations[t], h)
        H.append(h)
        Z.append(z)
        if t < len(actions):
            h = sequence_step(params, h, z, actions[t])
    return np.stack(H), np.stack(Z)


@dataclass(frozen=True)
class Rollout:
    """``n`` imagined steps. Row ``i`` holds ``s_{t+i+1}`` and its decodings;
    ``actions[i]`` is the action that produced it."""

    h: np.ndarray
    z: np.ndarray
    obs: np.ndarray
    rewards: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    def __iter__(self) -> Iterator[tuple[ModelState, np.ndarray, float, np.ndarray]]:
        for i in range(len(self)):
            yield ModelState(self.h[i], self.z[i]), self.obs[i], self.rewards[i], self.actions[i]


def imagine(
    params: Params,
    state: ModelState,
    actor: ActorFn,
    n: int,
    rng: np.random.Generator | None = None,
) -> Rollout:
    """Roll the model ``n`` steps ahead from ``state`` without observations.

    Works on batched states too: every array gains the batch axes after the
    horizon axis, e.g. ``obs`` is ``(n, *batch, d_obs)``.
    """
    if n < 0:
        raise ValueError("horizon must be non-negative")
    h, z = state.h, state.z
    hs, zs, xs, rs, acts = [], [], [], [], []
    for _ in range(n):
        a = np.asarray(actor(ModelState(h, z)), dtype=float)
        h = sequence_step(params, h, z, a)
        z = prior_latent(params, h, rng)
        s = ModelState(h, z)
        x_hat = decode_obs(params, s)
        r_hat = decode_reward(params, s)
        if not (np.all(np.isfinite(x_hat)) and np.all(np.isfinite(r_hat))):
            raise ModelDivergence("imagination produced non-finite predictions")
        hs.append(h)
        zs.append(z)
        xs.append(x_hat)
        rs.append(r_hat)
        acts.append(a)
    if n == 0:
        batch = state.h.shape[:-1]
        return Rollout(
            h=np.zeros((0, *batch, state.h.shape[-1])),
            z=np.zeros((0, *batch, state.z.shape[-1])),
            obs=np.zeros((0, *batch, params["dec_b2"].shape[0])),
            rewards=np.zeros((0, *batch)),
            actions=np.zeros((0, *batch, params["gru_wr"].shape[0] - state.h.shape[-1] - state.z.shape[-1])),
        )
    return Rollout(np.stack(hs), np.stack(zs), np.stack(xs), np.stack(rs), np.stack(acts))


@dataclass
class WorldModel:
    """Trained parameters plus the observation statistics they expect."""

    dims: ModelDims
    params: Params
    obs_mean: np.ndarray
    obs_std: np.ndarray
    actor: Params | None = None
    env_kind: str = ""

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.obs_mean) / self.obs_std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.obs_std + self.obs_mean

    def initial_state(self) -> ModelState:
        return ModelState(np.zeros(self.dims.d_h), np.zeros(self.dims.d_z))

    def stats_hash(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.obs_mean, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(self.obs_std, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]


def save_checkpoint(model: WorldModel, path: str | Path) -> None:
    """Write an ``.npz`` container.

    Layout: ``format``/``version``/``meta`` (JSON with dims and env kind),
    ``obs_mean``, ``obs_std``, ``wm/<name>`` for every name in
    ``PARAM_ORDER`` and ``actor/<name>`` for the actor when present.
    All arrays are little-endian float64, so a load/save round trip is exact.
    """
    meta = {"dims": model.dims.__dict__, "env_kind": model.env_kind}
    arrays: dict[str, np.ndarray] = {
        "format": np.array(CHECKPOINT_FORMAT),
        "version": np.array(CHECKPOINT_VERSION),
        "meta": np.array(json.dumps(meta, sort_keys=True)),
        "obs_mean": np.asarray(model.obs_mean, dtype="<f8"),
        "obs_std": np.asarray(model.obs_std, dtype="<f8"),
    }
    for name in PARAM_ORDER:
        arrays[f"wm/{name}"] = np.asarray(model.params[name], dtype="<f8")
    if model.actor is not None:
        for name in sorted(model.actor):
            arrays[f"actor/{name}"] = np.asarray(model.actor[name], dtype="<f8")
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, arr in arrays.items():
            # fixed timestamp so identical parameters give identical bytes
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> WorldModel:
    with np.load(Path(path), allow_pickle=False) as data:
        if str(data["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a world-model checkpoint")
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(data["meta"]))
        dims = ModelDims(**meta["dims"])
        params = {name: data[f"wm/{name}"].copy() for name in PARAM_ORDER}
        actor_keys = [k for k in data.files if k.startswith("actor/")]
        actor = {k.split("/", 1)[1]: data[k].copy() for k in actor_keys} or None
        expected = param_shapes(dims)
        for name, arr in params.items():
            if arr.shape != expected[name]:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {expected[name]}")
        return WorldModel(
            dims=dims,
            params=params,
            obs_mean=data["obs_mean"].copy(),
            obs_std=data["obs_std"].copy(),
            actor=actor,
            env_kind=meta.get("env_kind", ""),
        )

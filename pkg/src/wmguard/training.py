"""Nominal data collection and world-model training by backpropagation through time."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .envs import EnvConfig, PerturbationEvent, env_reset, env_step
from .model import ModelDims, Params, WorldModel, init_params, sigmoid

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "total", "obs_recon", "reward", "latent_consistency", "grad_norm")


@dataclass
class Episode:
    observations: np.ndarray  # (T+1, d_obs), raw units
    actions: np.ndarray  # (T, d_act)
    rewards: np.ndarray  # (T,) reward of transition t -> t+1
    dones: np.ndarray  # (T,)

    def __post_init__(self) -> None:
        T = len(self.actions)
        if self.observations.shape[0] != T + 1 or len(self.rewards) != T or len(self.dones) != T:
            raise ValueError("episode arrays have inconsistent lengths")
        for arr in (self.observations, self.actions, self.rewards):
            if not np.all(np.isfinite(arr)):
                raise ValueError("episode contains non-finite values")

    def __len__(self) -> int:
        return len(self.actions)


Policy = Callable[[np.ndarray], np.ndarray]


def collect_episode(
    config: EnvConfig,
    policy: Policy,
    seed: int,
    schedule: Sequence[PerturbationEvent] = (),
) -> Episode:
    state, obs = env_reset(config, seed)
    observations, actions, rewards, dones = [obs], [], [], []
    for _ in range(config.episode_len):
        action = np.clip(np.asarray(policy(obs), dtype=float), -1.0, 1.0)
        state, result = env_step(state, action, config, schedule)
        obs = result.observation
        observations.append(obs)
        actions.append(action)
        rewards.append(result.reward)
        dones.append(result.done)
        if result.done:
            break
    return Episode(
        np.array(observations), np.array(actions), np.array(rewards), np.array(dones, dtype=bool)
    )


class ReplayBuffer:
    """FIFO store of whole episodes."""

    def __init__(self, capacity: int = 1000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: list[Episode] = []

    def add(self, episode: Episode) -> None:
        self.episodes.append(episode)
        if len(self.episodes) > self.capacity:
            self.episodes.pop(0)

    def __len__(self) -> int:
        return len(self.episodes)

    def observation_stats(self) -> tuple[np.ndarray, np.ndarray]:
        stacked = np.concatenate([ep.observations for ep in self.episodes])
        return stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-3)


class SequenceSampler:
    """Draws fixed-length windows. Episodes are visited in reshuffled rounds,
    so every episode is drawn once per ``len(buffer)`` draws."""

    def __init__(self, buffer: ReplayBuffer, seed: int):
        if len(buffer) == 0:
            raise ValueError("cannot sample from an empty buffer")
        self.buffer = buffer
        self.rng = np.random.default_rng(seed)
        self._queue: list[int] = []

    def next_episode(self) -> int:
        if not self._queue:
            self._queue = list(self.rng.permutation(len(self.buffer)))
        return int(self._queue.pop())

    def sample(self, batch_size: int, seq_len: int) -> list[tuple[int, int]]:
        picks = []
        for _ in range(batch_size):
            idx = self.next_episode()
            T = len(self.buffer.episodes[idx])
            if T + 1 < seq_len:
                raise ValueError(f"episode {idx} shorter than seq_len {seq_len}")
            start = int(self.rng.integers(0, T + 2 - seq_len))
            picks.append((idx, start))
        return picks


@dataclass
class Batch:
    """Time-major training windows in normalized observation units."""

    obs: np.ndarray  # (L, B, d_obs)
    actions: np.ndarray  # (L-1, B, d_act)
    rewards: np.ndarray  # (L-1, B)

    @classmethod
    def from_windows(
        cls,
        buffer: ReplayBuffer,
        picks: Sequence[tuple[int, int]],
        seq_len: int,
        obs_mean: np.ndarray,
        obs_std: np.ndarray,
    ) -> "Batch":
        obs, act, rew = [], [], []
        for idx, start in picks:
            ep = buffer.episodes[idx]
            obs.append(ep.observations[start : start + seq_len])
            act.append(ep.actions[start : start + seq_len - 1])
            rew.append(ep.rewards[start : start + seq_len - 1])
        obs_arr = (np.stack(obs, axis=1) - obs_mean) / obs_std
        return cls(obs_arr, np.stack(act, axis=1), np.stack(rew, axis=1))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    seq_len: int = 32
    train_steps: int = 20000
    latent_consistency_weight: float = 1.0
    reward_loss_weight: float = 1.0
    grad_clip_norm: float = 100.0
    seed: int = 0

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if name in ("train_steps", "seed"):
                if value < 0:
                    raise ValueError(f"{name} must be non-negative")
            elif not value > 0:
                raise ValueError(f"{name} must be positive")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")


@dataclass
class LossBreakdown:
    total: float
    obs_recon: float
    reward: float
    latent_consistency: float


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_good: Params, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class _Cache:
    batch: Batch
    xh: list = field(default_factory=list)
    e1: list = field(default_factory=list)
    zah: list = field(default_factory=list)
    zarh: list = field(default_factory=list)
    r: list = field(default_factory=list)
    u: list = field(default_factory=list)
    c: list = field(default_factory=list)
    H: np.ndarray | None = None
    Z: np.ndarray | None = None
    ZP: np.ndarray | None = None
    HZ: np.ndarray | None = None
    d1: np.ndarray | None = None
    rr1: np.ndarray | None = None
    x_hat: np.ndarray | None = None
    r_hat: np.ndarray | None = None


def _forward(params: Params, batch: Batch, reward_weight: float, beta: float):
    X, A, R = batch.obs, batch.actions, batch.rewards
    L, B, _ = X.shape
    if L < 2:
        raise ValueError("training windows need at least 2 observations")
    d_h = params["prior_w"].shape[0]
    cache = _Cache(batch)
    h = np.zeros((B, d_h))
    hs, zs = [], []
    for k in range(L):
        xh = np.concatenate([X[k], h], axis=1)
        e1 = np.tanh(xh @ params["enc_w1"] + params["enc_b1"])
        z = e1 @ params["enc_w2"] + params["enc_b2"]
        cache.xh.append(xh)
        cache.e1.append(e1)
        hs.append(h)
        zs.append(z)
        if k == L - 1:
            break
        za = np.concatenate([z, A[k]], axis=1)
        zah = np.concatenate([za, h], axis=1)
        r = sigmoid(zah @ params["gru_wr"] + params["gru_br"])
        u = sigmoid(zah @ params["gru_wu"] + params["gru_bu"])
        zarh = np.concatenate([za, r * h], axis=1)
        c = np.tanh(zarh @ params["gru_wc"] + params["gru_bc"])
        cache.zah.append(zah)
        cache.zarh.append(zarh)
        cache.r.append(r)
        cache.u.append(u)
        cache.c.append(c)
        h = (1.0 - u) * h + u * c
    H, Z = np.stack(hs), np.stack(zs)
    ZP = H @ params["prior_w"] + params["prior_b"]
    HZ = np.concatenate([H, Z], axis=2)
    d1 = np.tanh(HZ @ params["dec_w1"] + params["dec_b1"])
    x_hat = d1 @ params["dec_w2"] + params["dec_b2"]
    rr1 = np.tanh(HZ @ params["rew_w1"] + params["rew_b1"])
    r_hat = (rr1 @ params["rew_w2"] + params["rew_b2"])[..., 0]
    cache.H, cache.Z, cache.ZP, cache.HZ = H, Z, ZP, HZ
    cache.d1, cache.rr1, cache.x_hat, cache.r_hat = d1, rr1, x_hat, r_hat

    obs_recon = float(np.mean((x_hat - X) ** 2))
    reward = float(np.mean((r_hat[1:] - R) ** 2))
    latent = float(np.sum((Z[1:] - ZP[1:]) ** 2) / ((L - 1) * B))
    total = obs_recon + reward_weight * reward + beta * latent
    return LossBreakdown(total, obs_recon, reward, latent), cache


def _backward(params: Params, cache: _Cache, reward_weight: float, beta: float) -> Params:
    X, R = cache.batch.obs, cache.batch.rewards
    L, B, d_obs = X.shape
    H, Z, ZP, HZ = cache.H, cache.Z, cache.ZP, cache.HZ
    d_h, d_z = H.shape[2], Z.shape[2]
    g = {k: np.zeros_like(v) for k, v in params.items()}

    def acc(w: str, b: str, inp: np.ndarray, grad_out: np.ndarray) -> None:
        flat = grad_out.reshape(-1, grad_out.shape[-1])
        g[w] += inp.reshape(-1, inp.shape[-1]).T @ flat
        g[b] += flat.sum(axis=0)

    # observation decoder
    dx = 2.0 * (cache.x_hat - X) / (L * B * d_obs)
    acc("dec_w2", "dec_b2", cache.d1, dx)
    dd1 = (dx @ params["dec_w2"].T) * (1.0 - cache.d1**2)
    acc("dec_w1", "dec_b1", HZ, dd1)
    dHZ = dd1 @ params["dec_w1"].T

    # reward head; no target for the first state of a window
    dr = np.zeros_like(cache.r_hat)
    dr[1:] = 2.0 * reward_weight * (cache.r_hat[1:] - R) / ((L - 1) * B)
    acc("rew_w2", "rew_b2", cache.rr1, dr[..., None])
    drr1 = (dr[..., None] @ params["rew_w2"].T) * (1.0 - cache.rr1**2)
    acc("rew_w1", "rew_b1", HZ, drr1)
    dHZ += drr1 @ params["rew_w1"].T

    dH = dHZ[..., :d_h].copy()
    dZ = dHZ[..., d_h:].copy()

    # posterior/prior consistency
    diff = np.zeros_like(Z)
    diff[1:] = 2.0 * beta * (Z[1:] - ZP[1:]) / ((L - 1) * B)
    dZ += diff
    dZP = -diff
    acc("prior_w", "prior_b", H, dZP)
    dH += dZP @ params["prior_w"].T

    n_za = d_z + cache.batch.actions.shape[2]
    gh_next = None
    for k in range(L - 1, -1, -1):
        gh = dH[k]
        gz = dZ[k]
        if k < L - 1:
            h, r, u, c = H[k], cache.r[k], cache.u[k], cache.c[k]
            dc = gh_next * u
            du = gh_next * (c - h)
            gh = gh + gh_next * (1.0 - u)
            dc_pre = dc * (1.0 - c**2)
            g["gru_wc"] += cache.zarh[k].T @ dc_pre
            g["gru_bc"] += dc_pre.sum(axis=0)
            dzarh = dc_pre @ params["gru_wc"].T
            drh = dzarh[:, n_za:]
            gh = gh + drh * r
            dr_pre = drh * h * r * (1.0 - r)
            du_pre = du * u * (1.0 - u)
            g["gru_wr"] += cache.zah[k].T @ dr_pre
            g["gru_br"] += dr_pre.sum(axis=0)
            g["gru_wu"] += cache.zah[k].T @ du_pre
            g["gru_bu"] += du_pre.sum(axis=0)
            dzah = dr_pre @ params["gru_wr"].T + du_pre @ params["gru_wu"].T
            gh = gh + dzah[:, n_za:]
            gz = gz + dzarh[:, :d_z] + dzah[:, :d_z]
        e1 = cache.e1[k]
        g["enc_w2"] += e1.T @ gz
        g["enc_b2"] += gz.sum(axis=0)
        de1 = (gz @ params["enc_w2"].T) * (1.0 - e1**2)
        g["enc_w1"] += cache.xh[k].T @ de1
        g["enc_b1"] += de1.sum(axis=0)
        gh = gh + (de1 @ params["enc_w1"].T)[:, d_obs:]
        gh_next = gh
    return g


def compute_loss(
    params: Params, batch: Batch, reward_weight: float = 1.0, beta: float = 1.0
) -> tuple[float, LossBreakdown]:
    """Teacher-forced loss over a batch of windows.

    Per step: ``z_post = encode(x_t, h_t)``; the observation decoder
    reconstructs ``x_t`` from ``(h_t, z_post)``; the reward head on
    ``(h_t, z_post)`` predicts the reward of the transition into ``x_t``;
    ``||z_post - prior_latent(h_t)||^2`` is penalized for ``t >= 1``; and
    ``h`` advances with ``z_post``.
    """
    breakdown, _ = _forward(params, batch, reward_weight, beta)
    return breakdown.total, breakdown


def compute_gradients(
    params: Params, batch: Batch, reward_weight: float = 1.0, beta: float = 1.0
) -> tuple[Params, LossBreakdown]:
    breakdown, cache = _forward(params, batch, reward_weight, beta)
    grads = _backward(params, cache, reward_weight, beta)
    if not all(np.all(np.isfinite(v)) for v in grads.values()):
        raise FloatingPointError("non-finite gradients")
    return grads, breakdown


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))


class Adam:
    def __init__(self, params: Params, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: Params, grads: Params) -> Params:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k in params:
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * grads[k] ** 2
            out[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def clip_by_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: v * scale for k, v in grads.items()}
    return grads, norm


def train(
    params: Params,
    buffer: ReplayBuffer,
    config: TrainConfig,
    obs_stats: tuple[np.ndarray, np.ndarray] | None = None,
    progress_every: int = 0,
) -> tuple[Params, list[dict]]:
    """Adam with global-norm clipping. Returns new params and one metrics
    row per step (see ``METRIC_COLUMNS``)."""
    config.validate()
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    mean, std = obs_stats if obs_stats is not None else buffer.observation_stats()
    sampler = SequenceSampler(buffer, config.seed)
    opt = Adam(params, config.learning_rate)
    params = {k: v.copy() for k, v in params.items()}
    metrics: list[dict] = []
    for step in range(config.train_steps):
        batch = Batch.from_windows(
            buffer, sampler.sample(config.batch_size, config.seq_len), config.seq_len, mean, std
        )
        try:
            grads, loss = compute_gradients(
                params, batch, config.reward_loss_weight, config.latent_consistency_weight
            )
        except FloatingPointError as exc:
            raise TrainingDiverged(
                f"training diverged at step {step} (seed {config.seed}): {exc}", params, step
            ) from exc
        if not math.isfinite(loss.total):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (seed {config.seed})", params, step
            )
        grads, norm = clip_by_global_norm(grads, config.grad_clip_norm)
        params = opt.update(params, grads)
        metrics.append({"step": step, **asdict(loss), "grad_norm": norm})
        if progress_every and step % progress_every == 0:
            log.info("step %d loss %.5f (obs %.5f rew %.5f lat %.5f)", step, loss.total,
                     loss.obs_recon, loss.reward, loss.latent_consistency)
    return params, metrics


def fit_world_model(
    buffer: ReplayBuffer,
    dims: ModelDims,
    config: TrainConfig,
    env_kind: str = "",
    progress_every: int = 0,
) -> tuple[WorldModel, list[dict]]:
    mean, std = buffer.observation_stats()
    params = init_params(dims, np.random.default_rng(config.seed))
    params, metrics = train(params, buffer, config, (mean, std), progress_every)
    return WorldModel(dims, params, mean, std, env_kind=env_kind), metrics


def write_metrics(metrics: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in metrics:
            writer.writerow([row["step"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])

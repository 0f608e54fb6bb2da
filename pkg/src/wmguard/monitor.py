"""Runtime anomaly monitor.

Every control step the monitor filters the new observation into the model
state, issues an ``n``-step imagination rollout, and scores the rollout
issued ``n`` steps earlier against what actually happened. Errors are mean
absolute differences over the horizon, in normalized observation units:

    e_obs(t0) = mean_j (1/n) sum_i |x_hat[t0+i, j] - x[t0+i, j]|
    e_rew(t0) = (1/n) sum_i |r_hat[t0+i] - r[t0+i]|

Both are smoothed with an exponential moving average; a trigger fires when
the smoothed observation error stays above its calibrated threshold for
``debounce_m`` consecutive reports.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ActorFn, ModelDivergence, ModelState, WorldModel, encode, imagine, sequence_step

log = logging.getLogger(__name__)

THRESHOLD = "threshold"
MODEL_DIVERGENCE = "model-divergence"
MIN_CALIBRATION_LENGTH = 100


@dataclass(frozen=True)
class MonitorConfig:
    n_horizon: int = 16
    smoothing_alpha: float = 0.05
    calibration_quantile: float = 0.995
    debounce_m: int = 4
    per_dim_tracking: bool = True
    stride: int = 1
    reward_gates_trigger: bool = False
    actor_mode: str = "latent"  # "latent" or "scripted" (decode then PD law)
    warmup_steps: int = 32  # reports maturing before this step are not scored
    sample_latent: bool = False  # draw z ~ N(mean, 0.1^2) instead of the mean

    def validate(self) -> None:
        if self.n_horizon < 1:
            raise ValueError("n_horizon must be >= 1")
        if not 0 < self.smoothing_alpha <= 1:
            raise ValueError("smoothing_alpha must be in (0, 1]")
        if not 0 < self.calibration_quantile < 1:
            raise ValueError("calibration_quantile must be in (0, 1)")
        if self.debounce_m < 1:
            raise ValueError("debounce_m must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.actor_mode not in ("latent", "scripted"):
            raise ValueError(f"unknown actor_mode {self.actor_mode!r}")


def _finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("error inputs contain NaN or Inf")


def compute_obs_error(predicted: np.ndarray, actual: np.ndarray) -> tuple[float, np.ndarray]:
    """Horizon-averaged absolute error, overall and per dimension."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or predicted.ndim != 2:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {actual.shape}")
    _finite(predicted, actual)
    per_dim = np.abs(predicted - actual).mean(axis=0)
    return float(per_dim.mean()), per_dim


def compute_reward_error(predicted: np.ndarray, actual: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise ValueError(f"length mismatch: {predicted.shape} vs {actual.shape}")
    _finite(predicted, actual)
    return float(np.abs(predicted - actual).mean())


def image_error(predicted_image: np.ndarray, actual_image: np.ndarray) -> np.ndarray:
    """Elementwise absolute difference; reads as an error heatmap."""
    predicted_image = np.asarray(predicted_image, dtype=float)
    actual_image = np.asarray(actual_image, dtype=float)
    if predicted_image.shape != actual_image.shape:
        raise ValueError(f"shape mismatch: {predicted_image.shape} vs {actual_image.shape}")
    return np.abs(predicted_image - actual_image)


def smooth(previous: float | None, value: float, alpha: float) -> float:
    """One EMA update; the first value initializes the average."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if previous is None:
        return float(value)
    return (1.0 - alpha) * previous + alpha * value


def calibrate_threshold(series: Sequence[float], quantile: float) -> float:
    """Empirical quantile with linear interpolation between order statistics."""
    values = np.asarray(series, dtype=float)
    if values.size < MIN_CALIBRATION_LENGTH:
        raise ValueError(
            f"calibration needs at least {MIN_CALIBRATION_LENGTH} values, got {values.size}"
        )
    if not 0 < quantile < 1:
        raise ValueError("quantile must be in (0, 1)")
    return float(np.quantile(values, quantile, method="linear"))


@dataclass(frozen=True)
class Thresholds:
    obs: float = math.inf
    rew: float = math.inf


@dataclass(frozen=True)
class PredictionRecord:
    t0: int
    predicted_obs: np.ndarray  # (n, d) normalized
    predicted_rewards: np.ndarray  # (n,)


@dataclass(frozen=True)
class ErrorReport:
    t: int
    e_obs: float
    e_rew: float
    per_dim_e_obs: np.ndarray
    e_obs_smooth: float
    e_rew_smooth: float
    threshold: float
    triggered: bool
    t0: int = -1
    record: PredictionRecord | None = None


@dataclass(frozen=True)
class TriggerEvent:
    step: int
    kind: str
    e_obs_smooth: float
    threshold: float


@dataclass
class Scorer:
    """Smoothing, thresholding and debouncing of raw per-report errors.

    Shared by the online monitor and offline replay so both make identical
    decisions from identical raw errors.
    """

    config: MonitorConfig
    thresholds: Thresholds
    obs_ema: float | None = None
    rew_ema: float | None = None
    consecutive: int = 0

    def update(self, e_obs: float, e_rew: float, t: int) -> tuple[float, float, bool, bool]:
        """Returns ``(obs_smooth, rew_smooth, triggered, rising_edge)``.

        Reports maturing at ``t < warmup_steps`` leave the state untouched
        and come back as ``(nan, nan, False, False)``: rollouts issued from a
        freshly reset filter are not representative of steady operation.
        """
        if t < self.config.warmup_steps:
            return math.nan, math.nan, False, False
        alpha = self.config.smoothing_alpha
        self.obs_ema = smooth(self.obs_ema, e_obs, alpha)
        self.rew_ema = smooth(self.rew_ema, e_rew, alpha)
        exceeded = self.obs_ema > self.thresholds.obs
        if self.config.reward_gates_trigger:
            exceeded = exceeded or self.rew_ema > self.thresholds.rew
        self.consecutive = self.consecutive + 1 if exceeded else 0
        triggered = self.consecutive >= self.config.debounce_m
        return self.obs_ema, self.rew_ema, triggered, self.consecutive == self.config.debounce_m


@dataclass
class MonitorState:
    step: int = 0
    model_state: ModelState | None = None
    pending: deque = field(default_factory=deque)
    obs_window: dict = field(default_factory=dict)
    reward_window: dict = field(default_factory=dict)


class Monitor:
    """Online monitor driven one control step at a time via :meth:`step`.

    ``on_trigger`` (optional) receives every :class:`TriggerEvent`; events
    are also returned from :meth:`step`.
    """

    def __init__(
        self,
        model: WorldModel,
        actor: ActorFn,
        config: MonitorConfig = MonitorConfig(),
        thresholds: Thresholds = Thresholds(),
        on_trigger: Callable[[TriggerEvent], None] | None = None,
        rng: np.random.Generator | None = None,
    ):
        config.validate()
        self.model = model
        self.actor = actor
        self.config = config
        self.thresholds = thresholds
        self.on_trigger = on_trigger
        self.rng = rng
        self.state = MonitorState()
        self.scorer = Scorer(config, thresholds)

    def _emit(self, event: TriggerEvent) -> TriggerEvent:
        if self.on_trigger is not None:
            self.on_trigger(event)
        return event

    def _divergence(self, t: int) -> TriggerEvent:
        log.warning("world model diverged at step %d", t)
        self.state.model_state = None
        return self._emit(
            TriggerEvent(t, MODEL_DIVERGENCE, math.nan if self.scorer.obs_ema is None else self.scorer.obs_ema, self.thresholds.obs)
        )

    def step(
        self,
        observation: np.ndarray,
        reward: float | None = None,
        action: np.ndarray | None = None,
    ) -> tuple[ErrorReport | None, list[TriggerEvent]]:
        """Feed ``x_t`` (raw units), the reward received on arriving at it,
        and the action executed at ``t-1``."""
        st, cfg, params = self.state, self.config, self.model.params
        t = st.step
        st.step += 1
        events: list[TriggerEvent] = []
        x = self.model.normalize(observation)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite observation at step {t}")
        st.obs_window[t] = x
        st.reward_window[t] = 0.0 if reward is None else float(reward)
        st.obs_window.pop(t - cfg.n_horizon - 1, None)
        st.reward_window.pop(t - cfg.n_horizon - 1, None)

        try:
            if st.model_state is None or action is None:
                h = np.zeros(self.model.dims.d_h)
            else:
                h = sequence_step(params, st.model_state.h, st.model_state.z, np.asarray(action, dtype=float))
            st.model_state = ModelState(h, encode(params, x, h, self.rng))
        except ModelDivergence:
            events.append(self._divergence(t))

        report = None
        if st.pending and st.pending[0].t0 + cfg.n_horizon == t:
            record = st.pending.popleft()
            report, trigger = self._score(record, t)
            if trigger is not None:
                events.append(trigger)

        if st.model_state is not None and t % cfg.stride == 0:
            try:
                rollout = imagine(params, st.model_state, self.actor, cfg.n_horizon, self.rng)
                st.pending.append(PredictionRecord(t, rollout.obs, rollout.rewards))
            except (ModelDivergence, FloatingPointError):
                events.append(self._divergence(t))
        return report, events

    def _score(self, record: PredictionRecord, t: int) -> tuple[ErrorReport, TriggerEvent | None]:
        n = self.config.n_horizon
        steps = range(record.t0 + 1, record.t0 + n + 1)
        actual_obs = np.stack([self.state.obs_window[k] for k in steps])
        actual_rew = np.array([self.state.reward_window[k] for k in steps])
        e_obs, per_dim = compute_obs_error(record.predicted_obs, actual_obs)
        e_rew = compute_reward_error(record.predicted_rewards, actual_rew)
        obs_s, rew_s, triggered, rising = self.scorer.update(e_obs, e_rew, t)
        report = ErrorReport(
            t=t,
            e_obs=e_obs,
            e_rew=e_rew,
            per_dim_e_obs=per_dim if self.config.per_dim_tracking else np.array([e_obs]),
            e_obs_smooth=obs_s,
            e_rew_smooth=rew_s,
            threshold=self.thresholds.obs,
            triggered=triggered,
            t0=record.t0,
            record=record,
        )
        trigger = None
        if rising:
            trigger = self._emit(TriggerEvent(t, THRESHOLD, obs_s, self.thresholds.obs))
        return report, trigger


def monitor_step(
    monitor: Monitor,
    observation: np.ndarray,
    reward: float | None = None,
    action: np.ndarray | None = None,
) -> tuple[ErrorReport | None, list[TriggerEvent]]:
    return monitor.step(observation, reward, action)


@dataclass(frozen=True)
class Rescored:
    t: int
    e_obs_smooth: float
    e_rew_smooth: float
    triggered: bool


def rescore(
    steps: Sequence[int],
    e_obs: Sequence[float],
    e_rew: Sequence[float],
    config: MonitorConfig,
    thresholds: Thresholds,
) -> tuple[list[Rescored], list[TriggerEvent]]:
    """Re-run smoothing, thresholds and debouncing over logged raw errors."""
    config.validate()
    scorer = Scorer(config, thresholds)
    rows, events = [], []
    for t, eo, er in zip(steps, e_obs, e_rew):
        obs_s, rew_s, triggered, rising = scorer.update(float(eo), float(er), int(t))
        rows.append(Rescored(int(t), obs_s, rew_s, triggered))
        if rising:
            events.append(TriggerEvent(int(t), THRESHOLD, obs_s, thresholds.obs))
    return rows, events


def rank_per_dim_errors(
    reports: Sequence[ErrorReport],
    onset: int,
    window: int | None = None,
    eps: float = 1e-9,
) -> list[tuple[int, float]]:
    """Dimensions ordered by ``mean(post-onset error) / (mean(pre-onset) + eps)``.

    Reports with ``t < onset`` are "before", ``t >= onset`` "after"; ``window``
    limits each side to that many steps around the onset. Ties keep
    dimension index order.
    """
    lo = -math.inf if window is None else onset - window
    hi = math.inf if window is None else onset + window
    pre = [r.per_dim_e_obs for r in reports if lo <= r.t < onset]
    post = [r.per_dim_e_obs for r in reports if onset <= r.t < hi]
    if not pre or not post:
        raise ValueError("need reports on both sides of the onset")
    ratios = np.mean(post, axis=0) / (np.mean(pre, axis=0) + eps)
    order = sorted(range(len(ratios)), key=lambda j: -ratios[j])
    return [(j, float(ratios[j])) for j in order]

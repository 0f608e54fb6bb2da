"""Experiment orchestration: train, calibrate, monitored scenario runs and
offline replay, with CSV logs and SVG plots."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .envs import OBS_LABELS, PerturbationEvent, act_dim, env_reset, env_step, obs_dim
from .evaluation import imagined_error, one_step_error, one_step_reward_error, persistence_error
from .model import ActorFn, ModelDims, WorldModel, load_checkpoint, save_checkpoint
from .monitor import (
    MODEL_DIVERGENCE,
    ErrorReport,
    Monitor,
    MonitorConfig,
    Rescored,
    Thresholds,
    TriggerEvent,
    calibrate_threshold,
    rescore,
    smooth,
)
from .policy import clone_actor, fallback_actor, latent_actor, scripted_policy
from .training import Episode, ReplayBuffer, collect_episode, fit_world_model, write_metrics

log = logging.getLogger(__name__)

RUN_LOG_VERSION = 1
RUN_LOG_HEADER = f"# wmguard-runlog v{RUN_LOG_VERSION}"
REPLAY_HEADER = f"# wmguard-replay v{RUN_LOG_VERSION}"
PROFILE_FORMAT = "wmguard-thresholds"
PROFILE_VERSION = 1

CHECKPOINT_FILE = "checkpoint.npz"
METRICS_FILE = "metrics.csv"
CONFIG_SNAPSHOT = "config.resolved.json"
FIDELITY_FILE = "fidelity.json"
RUN_LOG_FILE = "run_log.csv"
REPLAY_FILE = "replay.csv"
SUMMARY_FILE = "summary.json"


class SchemaError(ValueError):
    """A log or profile file has the wrong format or version."""


class StatsMismatch(ValueError):
    """Checkpoint, threshold profile and environment do not belong together."""


def write_json(obj: dict, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def snapshot_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    write_json(cfg.to_dict(), out_dir / CONFIG_SNAPSHOT)


def check_compatible(model: WorldModel, cfg: ExperimentConfig) -> None:
    kind = cfg.env.env_kind
    if model.env_kind and model.env_kind != kind:
        raise StatsMismatch(f"checkpoint was trained on {model.env_kind}, config asks for {kind}")
    if model.dims.d_obs != obs_dim(kind) or model.dims.d_act != act_dim(kind):
        raise StatsMismatch("checkpoint dimensions do not match the environment")
    if model.obs_mean.shape != (model.dims.d_obs,) or model.obs_std.shape != (model.dims.d_obs,):
        raise StatsMismatch("checkpoint normalization statistics have the wrong shape")
    if not np.all(model.obs_std > 0):
        raise StatsMismatch("checkpoint normalization statistics are not positive")


def monitor_actor(model: WorldModel, cfg: ExperimentConfig, monitor_cfg: MonitorConfig) -> ActorFn:
    if monitor_cfg.actor_mode == "scripted":
        return fallback_actor(model, cfg.policy)
    if model.actor is None:
        raise StatsMismatch("checkpoint has no actor; use monitor.actor_mode = \"scripted\"")
    return latent_actor(model.actor)


# --- training ---------------------------------------------------------------


def collect_nominal(cfg: ExperimentConfig, count: int, seed0: int) -> list[Episode]:
    policy = scripted_policy(cfg.policy)
    return [collect_episode(cfg.env, policy, seed0 + i) for i in range(count)]


def fidelity_summary(model: WorldModel, episodes: Sequence[Episode]) -> dict:
    one = one_step_error(model, episodes)
    pers = persistence_error(model, episodes)
    summary = {
        "one_step_error": one,
        "persistence_error": pers,
        "one_step_over_persistence": one / pers,
        "one_step_reward_error": one_step_reward_error(model, episodes),
    }
    if model.actor is not None:
        im = imagined_error(model, latent_actor(model.actor), episodes)
        summary["imagined_error"] = im
        summary["imagined_over_one_step"] = im / one
    return summary


def train_pipeline(cfg: ExperimentConfig, out_dir: Path, progress_every: int = 0) -> dict:
    """Collect nominal data, fit the world model, clone the actor and write
    checkpoint, metrics, config snapshot and held-out fidelity to ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot_config(cfg, out_dir)
    buffer = ReplayBuffer(cfg.data.buffer_capacity)
    for ep in collect_nominal(cfg, cfg.data.episodes, cfg.data.data_seed):
        buffer.add(ep)
    kind = cfg.env.env_kind
    dims = ModelDims(obs_dim(kind), act_dim(kind), **asdict(cfg.model))
    model, metrics = fit_world_model(buffer, dims, cfg.train, kind, progress_every)
    write_metrics(metrics, out_dir / METRICS_FILE)
    model.actor = clone_actor(buffer, model, cfg.clone)
    save_checkpoint(model, out_dir / CHECKPOINT_FILE)
    held_out = collect_nominal(cfg, cfg.data.eval_episodes, cfg.data.eval_seed)
    summary = fidelity_summary(model, held_out)
    write_json(summary, out_dir / FIDELITY_FILE)
    return summary


# --- closed-loop runs -------------------------------------------------------


@dataclass
class RunResult:
    labels: tuple[str, ...]
    rows: list[dict]
    reports: list[ErrorReport]
    events: list[TriggerEvent]

    @property
    def trigger_step(self) -> int | None:
        return self.events[0].step if self.events else None


def run_log_columns(labels: Sequence[str]) -> list[str]:
    return (
        ["step"]
        + [f"obs_{l}" for l in labels]
        + [f"pred_{l}" for l in labels]
        + ["reward", "pred_reward", "e_obs", "e_obs_smooth", "e_rew", "e_rew_smooth", "threshold", "triggered"]
        + [f"err_{l}" for l in labels]
    )


def run_closed_loop(
    model: WorldModel,
    cfg: ExperimentConfig,
    thresholds: Thresholds,
    seed: int,
    schedule: Sequence[PerturbationEvent] = (),
    total_steps: int | None = None,
    monitor_cfg: MonitorConfig | None = None,
) -> RunResult:
    """Drive the plant with the scripted controller for ``total_steps``
    transitions with the monitor attached. Observations ``x_0..x_T`` are
    all fed to the monitor; one row is logged per matured report from
    ``warmup_steps`` on (earlier reports stay in ``reports``)."""
    monitor_cfg = monitor_cfg or cfg.monitor
    total = cfg.scenario.total_steps if total_steps is None else total_steps
    env_cfg = replace(cfg.env, episode_len=max(total, 1))
    driver = scripted_policy(cfg.policy)
    rng = np.random.default_rng([seed, 1]) if monitor_cfg.sample_latent else None
    monitor = Monitor(model, monitor_actor(model, cfg, monitor_cfg), monitor_cfg, thresholds, rng=rng)
    labels = OBS_LABELS[cfg.env.env_kind]

    state, obs = env_reset(env_cfg, seed)
    rewards = {0: math.nan}
    observations = {0: obs}
    action = None
    rows, reports, events = [], [], []
    for t in range(total + 1):
        report, new_events = monitor.step(obs, None if t == 0 else rewards[t], action)
        events.extend(new_events)
        if report is not None:
            reports.append(report)
            if t >= monitor_cfg.warmup_steps:
                rows.append(_row(t, observations[t], rewards[t], report, model, labels))
        observations.pop(t - 1, None)
        rewards.pop(t - 1, None)
        if t == total:
            break
        action = np.clip(np.asarray(driver(obs), dtype=float), -1.0, 1.0)
        state, result = env_step(state, action, env_cfg, schedule)
        obs = result.observation
        observations[t + 1] = obs
        rewards[t + 1] = result.reward
    return RunResult(tuple(labels), rows, reports, events)


def _row(t: int, obs: np.ndarray, reward: float, report: ErrorReport, model: WorldModel, labels) -> dict:
    pred = model.denormalize(report.record.predicted_obs[-1])
    row: dict = {"step": t}
    for j, l in enumerate(labels):
        row[f"obs_{l}"] = float(obs[j])
    for j, l in enumerate(labels):
        row[f"pred_{l}"] = float(pred[j])
    row.update(
        reward=float(reward),
        pred_reward=float(report.record.predicted_rewards[-1]),
        e_obs=report.e_obs,
        e_obs_smooth=report.e_obs_smooth,
        e_rew=report.e_rew,
        e_rew_smooth=report.e_rew_smooth,
        threshold=report.threshold,
        triggered=int(report.triggered),
    )
    per_dim = report.per_dim_e_obs
    for j, l in enumerate(labels):
        row[f"err_{l}"] = float(per_dim[j]) if per_dim.size == len(labels) else math.nan
    return row


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_csv(path: Path, header: str, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def read_csv(path: Path, header: str) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != header:
            raise SchemaError(f"{path}: expected header {header!r}, found {first!r}")
        reader = csv.reader(fh)
        columns = next(reader, None)
        if columns is None:
            raise SchemaError(f"{path}: missing column row")
        rows = [dict(zip(columns, (float(v) for v in rec))) for rec in reader]
    return columns, rows


def write_run_log(path: Path, result: RunResult) -> None:
    write_csv(path, RUN_LOG_HEADER, run_log_columns(result.labels), result.rows)


def read_run_log(path: Path) -> tuple[list[str], list[dict]]:
    columns, rows = read_csv(path, RUN_LOG_HEADER)
    required = {"step", "e_obs", "e_rew", "e_obs_smooth", "triggered"}
    missing = required - set(columns)
    if missing:
        raise SchemaError(f"{path}: missing columns {sorted(missing)}")
    return columns, rows


# --- calibration ------------------------------------------------------------


def _smoothed(series: Sequence[float], alpha: float) -> list[float]:
    out, s = [], None
    for v in series:
        s = smooth(s, v, alpha)
        out.append(s)
    return out


def thresholds_from_series(
    step_runs: Sequence[Sequence[int]],
    e_obs_runs: Sequence[Sequence[float]],
    e_rew_runs: Sequence[Sequence[float]],
    monitor_cfg: MonitorConfig,
) -> Thresholds:
    """Drop warm-up reports, smooth each nominal run separately, pool, and
    take the quantile."""
    a, q, w = monitor_cfg.smoothing_alpha, monitor_cfg.calibration_quantile, monitor_cfg.warmup_steps
    obs, rew = [], []
    for steps, eo, er in zip(step_runs, e_obs_runs, e_rew_runs):
        keep = [i for i, t in enumerate(steps) if t >= w]
        obs.extend(_smoothed([eo[i] for i in keep], a))
        rew.extend(_smoothed([er[i] for i in keep], a))
    return Thresholds(calibrate_threshold(obs, q), calibrate_threshold(rew, q))


def calibrate(model: WorldModel, cfg: ExperimentConfig, episodes: int, seed: int) -> dict:
    """Run ``episodes`` nominal closed-loop runs and build a threshold profile."""
    if episodes < 1:
        raise ValueError("calibration needs at least one episode")
    check_compatible(model, cfg)
    step_runs, e_obs_runs, e_rew_runs = [], [], []
    for i in range(episodes):
        run = run_closed_loop(model, cfg, Thresholds(), seed + i)
        step_runs.append([r.t for r in run.reports])
        e_obs_runs.append([r.e_obs for r in run.reports])
        e_rew_runs.append([r.e_rew for r in run.reports])
    thresholds = thresholds_from_series(step_runs, e_obs_runs, e_rew_runs, cfg.monitor)
    return {
        "format": PROFILE_FORMAT,
        "version": PROFILE_VERSION,
        "env_kind": cfg.env.env_kind,
        "stats_hash": model.stats_hash(),
        "thresholds": {"obs": thresholds.obs, "rew": thresholds.rew},
        "monitor": asdict(cfg.monitor),
        "episodes": episodes,
        "seed": seed,
        "total_steps": cfg.scenario.total_steps,
        "raw_errors": {"step": step_runs, "e_obs": e_obs_runs, "e_rew": e_rew_runs},
    }


def load_profile(path: Path) -> dict:
    try:
        profile = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if profile.get("format") != PROFILE_FORMAT or profile.get("version") != PROFILE_VERSION:
        raise SchemaError(f"{path} is not a version {PROFILE_VERSION} threshold profile")
    return profile


def profile_thresholds(profile: dict, monitor_cfg: MonitorConfig | None = None) -> Thresholds:
    """Stored thresholds, or thresholds recomputed from the stored nominal
    errors when ``monitor_cfg`` changes smoothing, quantile or warm-up."""
    stored = MonitorConfig(**profile["monitor"])
    if monitor_cfg is None or (
        monitor_cfg.smoothing_alpha == stored.smoothing_alpha
        and monitor_cfg.calibration_quantile == stored.calibration_quantile
        and monitor_cfg.warmup_steps == stored.warmup_steps
    ):
        return Thresholds(profile["thresholds"]["obs"], profile["thresholds"]["rew"])
    raw = profile["raw_errors"]
    return thresholds_from_series(raw["step"], raw["e_obs"], raw["e_rew"], monitor_cfg)


def check_profile(profile: dict, model: WorldModel, cfg: ExperimentConfig) -> None:
    if profile["stats_hash"] != model.stats_hash():
        raise StatsMismatch("threshold profile was calibrated against a different checkpoint")
    if profile["env_kind"] != cfg.env.env_kind:
        raise StatsMismatch(f"threshold profile is for {profile['env_kind']}, config asks for {cfg.env.env_kind}")


# --- replay -----------------------------------------------------------------

REPLAY_COLUMNS = ("step", "e_obs", "e_rew", "e_obs_smooth", "e_rew_smooth", "threshold", "triggered")


@dataclass
class ReplayResult:
    rows: list[Rescored]
    events: list[TriggerEvent]
    thresholds: Thresholds
    mismatches: int = 0  # rows whose smoothed error or flag differ from the log

    @property
    def trigger_step(self) -> int | None:
        return self.events[0].step if self.events else None


def replay(rows: Sequence[dict], profile: dict, monitor_cfg: MonitorConfig) -> ReplayResult:
    thresholds = profile_thresholds(profile, monitor_cfg)
    rescored, events = rescore(
        [int(r["step"]) for r in rows],
        [r["e_obs"] for r in rows],
        [r["e_rew"] for r in rows],
        monitor_cfg,
        thresholds,
    )
    mismatches = sum(
        1
        for r, s in zip(rows, rescored)
        if r["e_obs_smooth"] != s.e_obs_smooth or bool(r["triggered"]) != s.triggered
    )
    return ReplayResult(rescored, events, thresholds, mismatches)


def write_replay(path: Path, rows: Sequence[dict], result: ReplayResult) -> None:
    out = []
    for r, s in zip(rows, result.rows):
        out.append(
            {
                "step": s.t,
                "e_obs": r["e_obs"],
                "e_rew": r["e_rew"],
                "e_obs_smooth": s.e_obs_smooth,
                "e_rew_smooth": s.e_rew_smooth,
                "threshold": result.thresholds.obs,
                "triggered": s.triggered,
            }
        )
    write_csv(path, REPLAY_HEADER, REPLAY_COLUMNS, out)


# --- plots ------------------------------------------------------------------


def plot_run(
    rows: Sequence[dict],
    labels: Sequence[str],
    onsets: Sequence[int],
    out_dir: Path,
    title: str = "",
) -> list[Path]:
    """Per-variable predicted-vs-actual overlays and smoothed error curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "wmguard"
    steps = np.array([r["step"] for r in rows])
    paths = []

    ncol = 2
    nrow = math.ceil(len(labels) / ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(10, 1.8 * nrow), sharex=True, squeeze=False)
    for j, label in enumerate(labels):
        ax = axes[j // ncol][j % ncol]
        ax.plot(steps, [r[f"obs_{label}"] for r in rows], lw=0.8, label="actual")
        ax.plot(steps, [r[f"pred_{label}"] for r in rows], lw=0.8, ls="--", label="predicted")
        for onset in onsets:
            ax.axvline(onset, color="k", lw=0.6, ls=":")
        ax.set_ylabel(label, fontsize=8)
    for j in range(len(labels), nrow * ncol):
        axes[j // ncol][j % ncol].axis("off")
    axes[0][0].legend(fontsize=7, loc="upper right")
    for ax in axes[-1]:
        ax.set_xlabel("step")
    fig.suptitle(title or "predicted vs actual observations")
    fig.tight_layout()
    paths.append(out_dir / "overlay.svg")
    fig.savefig(paths[-1], format="svg", metadata={"Date": None})
    plt.close(fig)

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(10, 5), sharex=True)
    ax1.plot(steps, [r["e_obs"] for r in rows], lw=0.5, alpha=0.4, label="e_obs")
    ax1.plot(steps, [r["e_obs_smooth"] for r in rows], lw=1.2, label="e_obs smoothed")
    ax1.plot(steps, [r["threshold"] for r in rows], lw=0.8, color="r", ls="--", label="threshold")
    ax2.plot(steps, [r["e_rew"] for r in rows], lw=0.5, alpha=0.4, label="e_rew")
    ax2.plot(steps, [r["e_rew_smooth"] for r in rows], lw=1.2, label="e_rew smoothed")
    for ax in (ax1, ax2):
        for onset in onsets:
            ax.axvline(onset, color="k", lw=0.6, ls=":")
        ax.legend(fontsize=7, loc="upper left")
    ax1.set_ylabel("observation error")
    ax2.set_ylabel("reward error")
    ax2.set_xlabel("step")
    fig.tight_layout()
    paths.append(out_dir / "errors.svg")
    fig.savefig(paths[-1], format="svg", metadata={"Date": None})
    plt.close(fig)
    return paths


# --- scenario ---------------------------------------------------------------


@dataclass
class ScenarioOutcome:
    result: RunResult
    run_log: Path
    plots: list[Path] = field(default_factory=list)

    @property
    def trigger_step(self) -> int | None:
        return self.result.trigger_step


def run_scenario(
    model: WorldModel,
    profile: dict,
    cfg: ExperimentConfig,
    out_dir: Path,
    seed: int | None = None,
) -> ScenarioOutcome:
    check_compatible(model, cfg)
    check_profile(profile, model, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot_config(cfg, out_dir)
    thresholds = profile_thresholds(profile, cfg.monitor)
    schedule = cfg.schedule()
    seed = cfg.scenario.seed if seed is None else seed
    result = run_closed_loop(model, cfg, thresholds, seed, schedule)
    run_log = out_dir / RUN_LOG_FILE
    write_run_log(run_log, result)
    summary = {
        "seed": seed,
        "total_steps": cfg.scenario.total_steps,
        "triggered": result.trigger_step is not None,
        "trigger_step": result.trigger_step,
        "events": [asdict(e) for e in result.events],
        "model_divergences": sum(e.kind == MODEL_DIVERGENCE for e in result.events),
        "thresholds": asdict(thresholds),
        "schedule": [asdict(ev) for ev in schedule],
    }
    write_json(summary, out_dir / SUMMARY_FILE)
    plots = []
    if cfg.scenario.plots and result.rows:
        onsets = [ev.onset_step for ev in schedule if ev.onset_step <= cfg.scenario.total_steps]
        plots = plot_run(result.rows, result.labels, onsets, out_dir, cfg.env.env_kind)
    return ScenarioOutcome(result, run_log, plots)


def load_model(path: Path) -> WorldModel:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)

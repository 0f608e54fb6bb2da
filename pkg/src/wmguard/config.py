"""Experiment configuration files.

A config is one JSON object with the sections ``env``, ``policy``,
``model``, ``train``, ``monitor``, ``calibration`` and ``scenario``; every
section is optional and missing fields take their defaults. Unknown
sections or keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .envs import PLANAR_HOVER, EnvConfig, PerturbationEvent
from .monitor import MonitorConfig
from .policy import CloneConfig, ScriptedPolicyConfig, default_scripted
from .training import TrainConfig

OUTPUT_ROOT_ENV = "WMGUARD_OUTPUT_ROOT"
# Experiment configs default to noisy sensors so that seeds give distinct runs.
RECIPE_SENSOR_NOISE = 0.01


class ConfigError(ValueError):
    """Config file could not be parsed or failed validation."""


@dataclass
class ModelSection:
    d_h: int = 64
    d_z: int = 16
    d_hidden: int = 64
    n_horizon: int = 16


@dataclass
class DataSection:
    """Nominal data collection and held-out evaluation used by ``train``."""

    episodes: int = 200
    data_seed: int = 0
    eval_episodes: int = 5
    eval_seed: int = 100000
    buffer_capacity: int = 1000


@dataclass
class CalibrationSection:
    episodes: int = 20
    seed: int = 50000


@dataclass
class ScenarioSection:
    checkpoint: str = "checkpoint.npz"
    thresholds: str = "thresholds.json"
    total_steps: int = 1000
    seed: int = 0
    output_dir: str = "run"
    schedule: list = field(default_factory=list)
    plots: bool = True


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=lambda: EnvConfig(sensor_noise=RECIPE_SENSOR_NOISE))
    policy: ScriptedPolicyConfig = field(default_factory=ScriptedPolicyConfig)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    clone: CloneConfig = field(default_factory=CloneConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    base_dir: Path = field(default=Path("."), compare=False)

    def schedule(self) -> list[PerturbationEvent]:
        return [PerturbationEvent(**ev) for ev in self.scenario.schedule]

    def resolve(self, path: str) -> Path:
        """Relative paths resolve against ``$WMGUARD_OUTPUT_ROOT`` when set,
        otherwise against the config file's directory."""
        p = Path(path)
        if p.is_absolute():
            return p
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return (Path(root) if root else self.base_dir) / p

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            out[name] = _jsonable(dataclasses.asdict(getattr(self, name)))
        return out


SECTIONS = ("env", "policy", "model", "data", "train", "clone", "monitor", "calibration", "scenario")
_EVENT_KEYS = {f.name for f in dataclasses.fields(PerturbationEvent)}


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _check_type(section: str, key: str, default: Any, value: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field {where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {where}: expected integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {where}: expected number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"field {where}: expected string, got {value!r}")
    elif isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            raise ConfigError(f"field {where}: expected list, got {value!r}")
    return value


def _build(cls, section: str, data: Any, base: Any = None):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section}: expected an object")
    base = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"section {section}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _check_type(section, key, getattr(base, key), value)
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section}: {exc}") from exc


def parse_config(doc: Any, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    env = _build(EnvConfig, "env", doc.get("env", {}), EnvConfig(sensor_noise=RECIPE_SENSOR_NOISE))
    policy_base = default_scripted(env.env_kind)
    cfg = ExperimentConfig(
        env=env,
        policy=_build(ScriptedPolicyConfig, "policy", doc.get("policy", {}), policy_base),
        model=_build(ModelSection, "model", doc.get("model", {})),
        data=_build(DataSection, "data", doc.get("data", {})),
        train=_build(TrainConfig, "train", doc.get("train", {})),
        clone=_build(CloneConfig, "clone", doc.get("clone", {})),
        monitor=_build(MonitorConfig, "monitor", doc.get("monitor", {})),
        calibration=_build(CalibrationSection, "calibration", doc.get("calibration", {})),
        scenario=_build(ScenarioSection, "scenario", doc.get("scenario", {})),
        base_dir=base_dir,
    )
    if cfg.policy.env_kind != env.env_kind:
        raise ConfigError("field policy.env_kind: must match env.env_kind")
    for i, ev in enumerate(cfg.scenario.schedule):
        if not isinstance(ev, dict):
            raise ConfigError(f"field scenario.schedule[{i}]: expected an object")
        bad = sorted(set(ev) - _EVENT_KEYS)
        if bad:
            raise ConfigError(f"field scenario.schedule[{i}]: unknown key(s) {', '.join(bad)}")
        try:
            PerturbationEvent(**ev).validate(2)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field scenario.schedule[{i}]: {exc}") from exc
    try:
        env.validate()
        cfg.train.validate()
        cfg.monitor.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.monitor.n_horizon != cfg.model.n_horizon:
        raise ConfigError("field monitor.n_horizon: must equal model.n_horizon")
    if cfg.scenario.total_steps <= cfg.monitor.n_horizon:
        raise ConfigError("field scenario.total_steps: must exceed the prediction horizon")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return parse_config(doc, path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def default_config(env_kind: str = PLANAR_HOVER) -> ExperimentConfig:
    return parse_config({"env": {"env_kind": env_kind}})

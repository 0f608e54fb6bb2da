"""Command line entry point: ``wmguard {train,calibrate,monitor,replay}``.

Exit codes: 0 ran without a trigger, 10 a trigger fired, 2 configuration
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .harness import (
    CHECKPOINT_FILE,
    REPLAY_FILE,
    SchemaError,
    StatsMismatch,
    calibrate,
    load_model,
    load_profile,
    read_run_log,
    replay,
    run_scenario,
    train_pipeline,
    write_json,
    write_replay,
)
from .model import ModelDivergence
from .monitor import MonitorConfig
from .training import TrainingDiverged

EXIT_OK = 0
EXIT_TRIGGER = 10
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("wmguard")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if getattr(args, "stride", None) is not None:
        try:
            cfg.monitor = dataclasses.replace(cfg.monitor, stride=args.stride)
            cfg.monitor.validate()
        except ValueError as exc:
            raise ConfigError(f"--stride: {exc}") from exc
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.clone = dataclasses.replace(cfg.clone, seed=args.seed)
    out = Path(args.out) if args.out else cfg.resolve(cfg.scenario.checkpoint).parent
    summary = train_pipeline(cfg, out, progress_every=args.progress)
    print(f"checkpoint: {out / CHECKPOINT_FILE}")
    for key, value in summary.items():
        print(f"{key}: {value:.6g}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else cfg.resolve(cfg.scenario.checkpoint)
    episodes = cfg.calibration.episodes if args.episodes is None else args.episodes
    seed = cfg.calibration.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else cfg.resolve(cfg.scenario.thresholds)
    if episodes < 1:
        raise ConfigError("calibration needs at least one episode")
    profile = calibrate(load_model(checkpoint), cfg, episodes, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(profile, out)
    th = profile["thresholds"]
    print(f"profile: {out}")
    print(f"threshold obs {th['obs']:.6g} rew {th['rew']:.6g}")
    return EXIT_OK


def cmd_monitor(args) -> int:
    cfg = _config(args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else cfg.resolve(cfg.scenario.checkpoint)
    profile_path = Path(args.thresholds) if args.thresholds else cfg.resolve(cfg.scenario.thresholds)
    out = Path(args.out) if args.out else cfg.resolve(cfg.scenario.output_dir)
    model = load_model(checkpoint)
    profile = load_profile(profile_path)
    outcome = run_scenario(model, profile, cfg, out, seed=args.seed)
    print(f"run log: {outcome.run_log}")
    if outcome.trigger_step is None:
        print("no trigger")
        return EXIT_OK
    first = outcome.result.events[0]
    print(f"trigger ({first.kind}) at step {first.step}")
    return EXIT_TRIGGER


def cmd_replay(args) -> int:
    log_path = Path(args.log)
    profile = load_profile(Path(args.thresholds))
    if args.config:
        mcfg = _config(args).monitor
    else:
        mcfg = MonitorConfig(**profile["monitor"])
    overrides = {}
    if args.quantile is not None:
        overrides["calibration_quantile"] = args.quantile
    if args.debounce is not None:
        overrides["debounce_m"] = args.debounce
    if args.alpha is not None:
        overrides["smoothing_alpha"] = args.alpha
    try:
        mcfg = dataclasses.replace(mcfg, **overrides)
        mcfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _, rows = read_run_log(log_path)
    result = replay(rows, profile, mcfg)
    out = Path(args.out) if args.out else log_path.with_name(REPLAY_FILE)
    write_replay(out, rows, result)
    print(f"replay: {out}")
    print(f"rows differing from the log: {result.mismatches}")
    if result.trigger_step is None:
        print("no trigger")
        return EXIT_OK
    print(f"trigger at step {result.trigger_step}")
    return EXIT_TRIGGER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmguard", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, stride="issue a rollout every k steps"):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the seed used by this command")
        p.add_argument("--out", help="output path (relative paths in the config honour $WMGUARD_OUTPUT_ROOT)")
        if stride:
            p.add_argument("--stride", type=int, help=stride)

    p = sub.add_parser("train", help="collect nominal data, train model and actor")
    common(p, stride=None)
    p.add_argument("--progress", type=int, default=0, metavar="K", help="log the loss every K steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="compute thresholds from nominal runs")
    common(p)
    p.add_argument("--checkpoint", help="defaults to scenario.checkpoint")
    p.add_argument("--episodes", type=int, help="defaults to calibration.episodes")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("monitor", help="run a scenario with the monitor attached")
    common(p)
    p.add_argument("--checkpoint", help="defaults to scenario.checkpoint")
    p.add_argument("--thresholds", help="defaults to scenario.thresholds")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("replay", help="re-score a run log offline")
    common(p, stride="accepted for symmetry; replay only re-scores logged rows")
    p.add_argument("--log", required=True, help="run_log.csv written by monitor")
    p.add_argument("--thresholds", required=True, help="threshold profile")
    p.add_argument("--quantile", type=float, help="override the calibration quantile")
    p.add_argument("--debounce", type=int, help="override the debounce count")
    p.add_argument("--alpha", type=float, help="override the EMA smoothing factor")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StatsMismatch, SchemaError, TrainingDiverged, ModelDivergence, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

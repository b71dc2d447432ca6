"""Experiment runner: baseline pulses, training, evaluation, analysis.

Each subcommand reads a flat key-value scenario config (or a named preset
shipped with the package), writes its data products into an output
directory, and finishes by atomically writing a run manifest listing every
file produced.  Outputs are plain CSV/JSON/DOT so any plotting tool can
consume them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from importlib import resources

from . import __version__
from .agent import (evaluate, evaluate_schedule, load_checkpoint,
                    load_trpo_config, save_checkpoint, train,
                    training_log_to_csv, TrpoConfig)
from .analysis import (build_2tbn, collect_transitions, export_dot,
                       relevant_report)
from .env import (load_scenario_config, parse_scenario_config,
                  ScenarioConfig)
from .errors import ArgumentError, ConfigError, NumericalError
from .pulses import gaussian_ctap_pair, gaussian_sctap

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2

PRESET_NAMES = ("fig3a", "fig3b", "fig3c", "fig3d", "fig4", "fig4_201pi")


def _resolve_config(spec_path):
    """A --config value is either a preset name or a file path."""
    if spec_path in PRESET_NAMES:
        text = resources.files("ctaplab").joinpath(
            f"presets/{spec_path}.cfg").read_text(encoding="utf-8")
        return parse_scenario_config(text)
    if not os.path.exists(spec_path):
        raise ConfigError(f"config file not found: {spec_path}")
    return load_scenario_config(spec_path)


class _Manifest:
    """Collects run facts and writes them atomically at the end."""

    def __init__(self, command, out_dir, seed, config_echo):
        self.data = {
            "command": command,
            "config": config_echo,
            "seed": seed,
            "code_version": __version__,
            "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ",
                                         time.gmtime()),
            "finished_utc": None,
            "status": "running",
            "outputs": [],
        }
        self.out_dir = out_dir

    def add(self, filename):
        self.data["outputs"].append(filename)

    def finish(self, status, error=None):
        self.data["status"] = status
        if error is not None:
            self.data["error"] = error
        self.data["finished_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ",
                                                  time.gmtime())
        path = os.path.join(self.out_dir, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=1)
            fh.write("\n")
        os.replace(tmp, path)


def _write(out_dir, manifest, filename, text):
    with open(os.path.join(out_dir, filename), "w", encoding="utf-8") as fh:
        fh.write(text)
    manifest.add(filename)


def _baseline_schedule(config):
    if config.n_dots == 3:
        return gaussian_ctap_pair(config.t_max, config.n_steps)
    return gaussian_sctap(config.t_max, config.n_steps)


def cmd_baseline(args):
    config = _resolve_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    manifest = _Manifest("baseline", args.out, seed,
                         dataclasses.asdict(config))
    try:
        schedule = _baseline_schedule(config)
        result = evaluate_schedule(schedule, config, smoothing="none")
        traj = result.trajectory
        _write(args.out, manifest, "schedule.csv", schedule.to_csv())
        _write(args.out, manifest, "trajectory.csv", traj.to_csv())
        traces = traj.traces()
        metrics = {
            "final_fidelity": result.metrics["final_fidelity"],
            "max_rho22": result.metrics["max_rho22"],
            "transfer_time_to_0.99": result.metrics["t_reach_099"],
            "trace_drift": float(abs(traces - 1.0).max()),
        }
        _write(args.out, manifest, "metrics.json",
               json.dumps(metrics, indent=1) + "\n")
    except Exception as exc:
        manifest.finish("failed", error=str(exc))
        raise
    manifest.finish("ok")
    return EXIT_OK


def _parse_hidden(text):
    try:
        dims = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"bad --hidden value '{text}'; expected comma-"
                          "separated positive integers") from None
    if not dims or min(dims) < 1:
        raise ConfigError("--hidden needs at least one positive dimension")
    return dims


def cmd_train(args):
    config = _resolve_config(args.config)
    if args.trpo_config is not None:
        if not os.path.exists(args.trpo_config):
            raise ConfigError(
                f"trpo config file not found: {args.trpo_config}")
        trpo = load_trpo_config(args.trpo_config)
    else:
        trpo = TrpoConfig()
    if args.seed is not None:
        trpo = dataclasses.replace(trpo, seed=args.seed)
    hidden = _parse_hidden(args.hidden)
    warm = load_checkpoint(args.warm_start) if args.warm_start else None
    os.makedirs(args.out, exist_ok=True)
    manifest = _Manifest("train", args.out, trpo.seed, {
        "scenario": dataclasses.asdict(config),
        "trpo": dataclasses.asdict(trpo),
        "hidden": list(hidden),
    })
    start = time.monotonic()

    def stop_on_wall_clock(epoch, row, policy, value_fn):
        del epoch, row, policy, value_fn
        return (args.max_wall_secs is not None
                and time.monotonic() - start >= args.max_wall_secs)

    try:
        checkpoint, log_rows = train(config, trpo, hidden,
                                     warm_start=warm,
                                     n_workers=args.workers,
                                     callback=stop_on_wall_clock)
        ckpt_path = os.path.join(args.out, "checkpoint.json")
        save_checkpoint(checkpoint, ckpt_path)
        manifest.add("checkpoint.json")
        _write(args.out, manifest, "training_log.csv",
               training_log_to_csv(log_rows))
    except Exception as exc:
        manifest.finish("failed", error=str(exc))
        raise
    manifest.finish("ok")
    return EXIT_OK


def cmd_evaluate(args):
    checkpoint = load_checkpoint(args.checkpoint)
    config = _resolve_config(args.config) if args.config else None
    os.makedirs(args.out, exist_ok=True)
    echo = dataclasses.asdict(config) if config \
        else checkpoint.get("env_config")
    seed = 0 if args.seed is None else args.seed
    manifest = _Manifest("evaluate", args.out, seed, echo)
    try:
        result = evaluate(checkpoint, config, smoothing=args.smoothing)
        _write(args.out, manifest, "schedule.csv",
               result.schedule.to_csv())
        if args.smoothing != "none":
            _write(args.out, manifest, "schedule_smoothed.csv",
                   result.smoothed_schedule.to_csv())
        _write(args.out, manifest, "trajectory.csv",
               result.trajectory.to_csv())
        _write(args.out, manifest, "metrics.json",
               json.dumps(result.metrics, indent=1) + "\n")
    except Exception as exc:
        manifest.finish("failed", error=str(exc))
        raise
    manifest.finish("ok")
    return EXIT_OK


def cmd_analyze(args):
    if (args.checkpoint is None) == (not args.random):
        raise ConfigError("pass exactly one of --checkpoint or --random")
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint \
        else None
    if args.config:
        config = _resolve_config(args.config)
    elif checkpoint is not None:
        config = ScenarioConfig(**checkpoint["env_config"])
    else:
        raise ConfigError("--random requires --config")
    os.makedirs(args.out, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    manifest = _Manifest("analyze", args.out, seed,
                         dataclasses.asdict(config))
    try:
        dataset = collect_transitions(
            config, checkpoint if checkpoint is not None else "random",
            n_samples=args.n_samples, seed=seed,
            exploration_std=args.exploration_std)
        _write(args.out, manifest, "dataset.csv", dataset.to_csv())
        graph = build_2tbn(dataset, epsilon=args.epsilon, seed=seed)
        _write(args.out, manifest, "graph.dot", export_dot(graph))
        _write(args.out, manifest, "relevant.txt", relevant_report(graph))
    except Exception as exc:
        manifest.finish("failed", error=str(exc))
        raise
    manifest.finish("ok")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ctaplab",
        description="Pulse-design workbench: adiabatic-transport baselines,"
                    " reinforcement-learned schedules, and variable-"
                    "relevance analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="scenario config path or preset name "
                            f"({', '.join(PRESET_NAMES)})")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="seed override")

    p_base = sub.add_parser("baseline",
                            help="simulate the Gaussian baseline pulses")
    common(p_base)
    p_base.set_defaults(func=cmd_baseline)

    p_train = sub.add_parser("train", help="train a policy")
    common(p_train)
    p_train.add_argument("--trpo-config", default=None,
                         help="optimizer config path (flat key=value)")
    p_train.add_argument("--warm-start", default=None,
                         help="checkpoint to initialize from")
    p_train.add_argument("--max-wall-secs", type=float, default=None,
                         help="stop after this wall-clock budget")
    p_train.add_argument("--hidden", default="16",
                         help="comma-separated hidden layer sizes")
    p_train.add_argument("--workers", type=int, default=1,
                         help="rollout workers (capped by CTAP_THREADS)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate",
                            help="roll out a checkpoint and score it")
    common(p_eval, config_required=False)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--smoothing", default="none",
                        choices=("none", "ma4", "spline"))
    p_eval.set_defaults(func=cmd_evaluate)

    p_an = sub.add_parser("analyze",
                          help="estimate the variable-dependency graph")
    common(p_an, config_required=False)
    p_an.add_argument("--checkpoint", default=None)
    p_an.add_argument("--random", action="store_true",
                      help="collect with uniform random actions")
    p_an.add_argument("--n-samples", type=int, default=100_000)
    p_an.add_argument("--epsilon", type=float, default=0.05)
    p_an.add_argument("--exploration-std", type=float, default=0.1)
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

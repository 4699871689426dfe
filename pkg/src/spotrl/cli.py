"""Experiment runner and report emitter.

``spotrl run`` executes one experiment over a trace and writes the step
timeline, the raw event log, and a summary.  ``spotrl ablate`` runs the
canned comparison scenarios and writes per-variant CSVs.  All figure
analogues emit CSV only; plot them with any tool (a matplotlib recipe is in
the README).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import ablations
from .domain import StepStats
from .manager import ManagerError
from .sim.config import ConfigError, Mode, SimConfig, config_to_text, load_config
from .sim.engine import SimulationError, run_experiment
from .traces import TraceError, resolve_trace, summarize

logger = logging.getLogger(__name__)


def _setup_logging() -> None:
    level = os.environ.get("SPOTRL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _build_config(args) -> SimConfig:
    config = SimConfig()
    if args.config:
        config = load_config(args.config, config)
    if getattr(args, "mode", None):
        config = dataclasses.replace(config, mode=Mode(args.mode))
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        config = dataclasses.replace(config, steps=args.steps)
    return config


def _write_timeline(path: str, timeline: list[StepStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(StepStats.FIELDS)
        for stats in timeline:
            writer.writerow([getattr(stats, name) for name in StepStats.FIELDS])


def cmd_run(args) -> int:
    config = _build_config(args)
    trace = resolve_trace(args.trace)
    result = run_experiment(config, trace)
    os.makedirs(args.out, exist_ok=True)
    _write_timeline(os.path.join(args.out, "timeline.csv"), result.timeline)
    with open(os.path.join(args.out, "events.jsonl"), "w") as fh:
        fh.write(result.log.to_jsonl())
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(config_to_text(config))
    summary = result.summary()
    print(
        f"{config.mode.value}: {summary['steps']} steps, "
        f"{summary['throughput_trained']:.1f} trained tokens/s, "
        f"{summary['tokens_per_dollar']:.0f} tokens/$"
    )
    return 0


def _write_rows(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _scaling_rows(config: SimConfig, jobs: int) -> list[dict]:
    counts = tuple(range(9))
    if jobs > 1:
        arglist = [(config, n) for n in counts]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            pointsets = list(pool.map(_scaling_worker, arglist))
        points = [p for subset in pointsets for p in subset]
    else:
        points = ablations.run_scaling(config, counts)
    return [dataclasses.asdict(p) for p in points]


def _scaling_worker(packed) -> list:
    config, n = packed
    return ablations.run_scaling(config, (n,))


def cmd_ablate(args) -> int:
    config = _build_config(args)
    os.makedirs(args.out, exist_ok=True)
    out = lambda name: os.path.join(args.out, name)
    if args.scenario == "scaling":
        _write_rows(out("scaling.csv"), _scaling_rows(config, args.jobs))
    elif args.scenario == "seeding":
        scenario = ablations.run_seeding_ablation(config)
        rows = []
        for variant, outcome in scenario.outcomes.items():
            for k, t_seed in enumerate(outcome.t_seed_series):
                rows.append(
                    {
                        "variant": variant,
                        "step": k + 1,
                        "phase": outcome.step_phases[k],
                        "t_seed": t_seed,
                    }
                )
        _write_rows(out("seeding_t_seed.csv"), rows)
        _write_rows(
            out("seeding_summary.csv"),
            [
                {
                    "variant": variant,
                    "avg_throughput": outcome.throughput,
                    **{
                        f"convergence_phase{p}": c
                        for p, c in sorted(outcome.convergence_steps.items())
                    },
                }
                for variant, outcome in scenario.outcomes.items()
            ],
        )
    elif args.scenario == "fault-handling":
        scenario = ablations.run_fault_ablation(config)
        _write_rows(out("fault_handling.csv"),
                    [dataclasses.asdict(p) for p in scenario.points])
        _write_rows(
            out("fault_handling_mean.csv"),
            [
                {"fraction": fraction, "policy": policy, "mean_overhead": value}
                for (fraction, policy), value in sorted(scenario.mean_overhead.items())
            ],
        )
    elif args.scenario == "weight-transfer":
        points = ablations.run_weight_transfer_ablation(config)
        _write_rows(out("weight_transfer.csv"),
                    [dataclasses.asdict(p) for p in points])
    elif args.scenario == "length-sweep":
        points = ablations.run_length_sweep(config)
        _write_rows(out("length_sweep.csv"),
                    [dataclasses.asdict(p) for p in points])
    else:
        print(f"unknown scenario {args.scenario!r}", file=sys.stderr)
        return 2
    print(f"wrote {args.scenario} results to {args.out}")
    return 0


def cmd_summarize_trace(args) -> int:
    summary = summarize(resolve_trace(args.trace))
    print(
        f"avg_instances={summary.avg_instances:.2f} "
        f"allocations={summary.allocations} preemptions={summary.preemptions} "
        f"duration={summary.duration:.0f}s"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spotrl",
        description="Hybrid RL rollout-offload orchestrator and cluster simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment over a trace")
    run_p.add_argument("--trace", default="none",
                       help="trace path, builtin:<a|b|c>, or 'none'")
    run_p.add_argument("--config", help="config file (namespace.key = value lines)")
    run_p.add_argument("--mode", choices=[m.value for m in Mode])
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--steps", type=int)
    run_p.add_argument("--out", required=True)
    run_p.set_defaults(func=cmd_run)

    ablate_p = sub.add_parser("ablate", help="run a canned comparison scenario")
    ablate_p.add_argument(
        "scenario",
        choices=["seeding", "weight-transfer", "fault-handling", "scaling",
                 "length-sweep"],
    )
    ablate_p.add_argument("--config", help="config file overriding desk defaults")
    ablate_p.add_argument("--seed", type=int)
    ablate_p.add_argument("--out", required=True)
    ablate_p.add_argument("--jobs", type=int, default=1,
                          help="parallel workers for sweep points")
    ablate_p.set_defaults(func=cmd_ablate)

    trace_p = sub.add_parser("summarize-trace", help="print trace statistics")
    trace_p.add_argument("trace", help="trace path or builtin:<a|b|c>")
    trace_p.set_defaults(func=cmd_summarize_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, ManagerError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Experiment runner.

Every run is described by an INI file with an ``[experiment]`` section plus
optional ``[env]``, ``[planner]`` and ``[td3]`` sections; command-line flags
override file values. Modes:

``plan``         one planner over seeds x episodes; per-episode CSV, aggregate
                 JSON and one demo file per episode.
``ablate``       the ``plan`` sweep once per planner variant on shared seeds.
``train-rl``     TD3 per seed for each training arm; per-seed curves, a median
                 curve per arm and a summary of final returns.
``replay-demo``  re-execute demo files and check the recorded rewards.
``bench``        rollout throughput and bit-identity across worker counts.

Exit codes: 0 success, 1 usage or config error, 2 contract violation,
3 replay mismatch.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import demos as demo_io
from .demos import DemoFormatError, DemoStore
from .envs import ENV_IDS, make_env
from .planner import VARIANTS, PlannerConfig, desk_defaults, run_episode
from .rl import CURVE_COLUMNS, Td3Config, train, write_curve
from .rollout import evaluate_actions
from .sim import ContractViolation

MODES = ("plan", "ablate", "train-rl", "replay-demo", "bench")
EPISODE_COLUMNS = ("seed", "episode", "return", "success", "plan_wall_seconds")

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_MISMATCH = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class ExperimentConfig:
    mode: str
    env_id: str = "point_reach-dense"
    seeds: list = field(default_factory=lambda: [0])
    episodes: int = 1
    out: Optional[Path] = None
    workers: int = 1
    timing: bool = True
    env_options: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    td3: dict = field(default_factory=dict)
    plan_on: Optional[str] = None
    variants: list = field(default_factory=lambda: list(VARIANTS))
    arms: list = field(default_factory=lambda: ["demos"])
    demo_dir: Optional[Path] = None
    beta: Optional[float] = None
    bench_workers: list = field(default_factory=lambda: [1, 2, 4, 8])
    bench_candidates: int = 256
    bench_batches: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.mode != "replay-demo" and self.env_id not in ENV_IDS:
            raise UsageError(f"unknown env id {self.env_id!r}")
        if not self.seeds:
            raise UsageError("at least one seed is required")
        if self.episodes < 1 or self.workers < 1:
            raise UsageError("episodes and workers must be >= 1")
        if self.mode in ("plan", "ablate", "train-rl", "bench") and self.out is None:
            raise UsageError(f"mode {self.mode} needs an output directory (--out)")
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            if not os.access(self.out, os.W_OK):
                raise UsageError(f"output directory {self.out} is not writable")


def _int_list(text) -> list:
    try:
        return [int(s) for s in str(text).replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected a list of integers, got {text!r}")


def _name_list(text) -> list:
    return [s for s in str(text).replace(",", " ").split() if s]


def _number(text):
    try:
        value = float(text)
    except ValueError:
        return text
    return int(value) if value.is_integer() and "." not in text and "e" not in text.lower() else value


def load_config(argv=None) -> ExperimentConfig:
    parser = _Parser(prog="topdm", description="Run planning and TD3 experiments.")
    parser.add_argument("--config", help="INI experiment file")
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("--env", dest="env_id")
    parser.add_argument("--seed", help="one seed or a comma-separated list")
    parser.add_argument("--episodes", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--out")
    parser.add_argument("--beta", type=float)
    parser.add_argument("--variant", help="planner variant(s), comma-separated")
    parser.add_argument("--demo", help="demo file or directory")
    parser.add_argument("--no-timing", action="store_true", help="blank out wall-clock fields")
    args = parser.parse_args(argv)

    ini = configparser.ConfigParser()
    if args.config:
        if not ini.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
    exp = dict(ini["experiment"]) if ini.has_section("experiment") else {}
    section = lambda name: {k: _number(v) for k, v in ini[name].items()} if ini.has_section(name) else {}

    mode = args.mode or exp.get("mode")
    if mode is None:
        raise UsageError("no mode given (--mode or [experiment] mode)")
    kw = dict(mode=mode, env_options=section("env"), planner=section("planner"), td3=section("td3"))
    if "env_id" in exp or args.env_id:
        kw["env_id"] = args.env_id or exp["env_id"]
    if args.seed is not None or "seeds" in exp:
        kw["seeds"] = _int_list(args.seed if args.seed is not None else exp["seeds"])
    try:
        if args.episodes is not None or "episodes" in exp:
            kw["episodes"] = args.episodes if args.episodes is not None else int(exp["episodes"])
        if args.workers is not None or "workers" in exp:
            kw["workers"] = args.workers if args.workers is not None else int(exp["workers"])
        if "bench_workers" in exp:
            kw["bench_workers"] = _int_list(exp["bench_workers"])
        if "bench_candidates" in exp:
            kw["bench_candidates"] = int(exp["bench_candidates"])
        if "bench_batches" in exp:
            kw["bench_batches"] = int(exp["bench_batches"])
    except ValueError as exc:
        raise UsageError(str(exc))
    out = args.out or exp.get("out")
    kw["out"] = Path(out) if out else None
    demo = args.demo or exp.get("demo_dir")
    kw["demo_dir"] = Path(demo) if demo else None
    if args.variant or "variants" in exp:
        kw["variants"] = _name_list(args.variant or exp["variants"])
    if "arms" in exp:
        kw["arms"] = _name_list(exp["arms"])
    kw["plan_on"] = exp.get("plan_on")
    kw["beta"] = args.beta
    kw["timing"] = not args.no_timing and exp.get("timing", "true").lower() not in ("0", "false", "no", "off")
    return ExperimentConfig(**kw)


def planner_config(cfg: ExperimentConfig, variant: Optional[str] = None) -> PlannerConfig:
    """Desk-scale planner from the ``[planner]`` section, a variant and ``--beta``.

    A variant is a key of ``VARIANTS``; MPPI variants accept a temperature
    suffix, e.g. ``mppi@20``.
    """
    options = desk_defaults().to_dict()
    options.update(cfg.planner)
    if variant is not None:
        name, _, kappa = variant.partition("@")
        if name not in VARIANTS:
            raise UsageError(f"unknown planner variant {variant!r}; choose from {', '.join(VARIANTS)}")
        options.update(VARIANTS[name])
        if kappa:
            if name != "mppi":
                raise UsageError(f"temperature suffix only applies to mppi, got {variant!r}")
            options["kappa"] = float(kappa)
    if cfg.beta is not None:
        options["beta"] = cfg.beta
    return PlannerConfig.from_dict(options)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def episode_seed(seed: int, episode: int) -> int:
    return 1000 * seed + episode


def aggregate(rows) -> dict:
    returns = np.array([r["return"] for r in rows])
    success = np.array([r["success"] for r in rows], dtype=float)
    return {
        "episodes": len(rows),
        "median_return": float(np.median(returns)),
        "mean_return": float(np.mean(returns)),
        "min_return": float(np.min(returns)),
        "max_return": float(np.max(returns)),
        "success_rate": float(np.mean(success)),
    }


def plan_sweep(cfg: ExperimentConfig, config: PlannerConfig, out: Path, log=print) -> list:
    """Run every (seed, episode); write ``episodes.csv``, ``aggregate.json`` and demos."""
    out.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg.env_id, **cfg.env_options)
    planning_env = make_env(cfg.plan_on, **cfg.env_options) if cfg.plan_on else None
    if planning_env is not None and planning_env.state_dim != env.state_dim:
        raise UsageError(f"plan_on env {cfg.plan_on!r} has a different state layout from {cfg.env_id!r}")
    rows = []
    for seed in cfg.seeds:
        for episode in range(cfg.episodes):
            result = run_episode(env, config, seed=episode_seed(seed, episode), workers=cfg.workers,
                                 planning_env=planning_env)
            demo_io.save(result.demo, demo_io.demo_path(out / "demos", env.env_id, result.demo.seed))
            rows.append({
                "seed": seed,
                "episode": episode,
                "return": result.total_return,
                "success": int(result.success),
                "plan_wall_seconds": result.wall_seconds,
            })
            log(f"seed={seed} episode={episode} return={result.total_return:.4f} success={int(result.success)}")
    _write_csv(out / "episodes.csv", EPISODE_COLUMNS, [
        [r["seed"], r["episode"], repr(r["return"]), r["success"],
         f"{r['plan_wall_seconds']:.3f}" if cfg.timing else ""]
        for r in rows
    ])
    summary = aggregate(rows)
    summary.update(env_id=cfg.env_id, plan_on=cfg.plan_on, planner=config.to_dict())
    _write_json(out / "aggregate.json", summary)
    return rows


def cmd_plan(cfg: ExperimentConfig) -> int:
    variant = cfg.variants[0] if len(cfg.variants) == 1 else None
    plan_sweep(cfg, planner_config(cfg, variant), cfg.out)
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig) -> int:
    table, summary = [], {}
    for variant in cfg.variants:
        print(f"== {variant}")
        rows = plan_sweep(cfg, planner_config(cfg, variant), cfg.out / variant.replace("@", "-k"))
        summary[variant] = aggregate(rows)
        table.extend([variant, r["seed"], r["episode"], repr(r["return"]), r["success"]] for r in rows)
    _write_csv(cfg.out / "ablation.csv", ("variant", "seed", "episode", "return", "success"), table)
    _write_json(cfg.out / "ablation.json", summary)
    for variant, agg in summary.items():
        print(f"{variant:>10}  median={agg['median_return']:.4f}  success={agg['success_rate']:.3f}")
    return EXIT_OK


def parse_arm(arm: str, default_beta: float) -> tuple[str, bool, float]:
    """``plain`` or ``demos`` with an optional ``@beta``; returns (name, use_demos, beta)."""
    kind, _, beta = arm.partition("@")
    if kind not in ("plain", "demos"):
        raise UsageError(f"unknown training arm {arm!r}; use plain or demos, optionally @beta")
    try:
        beta = float(beta) if beta else default_beta
    except ValueError:
        raise UsageError(f"bad beta in training arm {arm!r}")
    return f"{kind}-beta{beta:g}", kind == "demos", beta


def median_curve(curves) -> list:
    rows = []
    for points in zip(*curves):
        steps = {p["env_step"] for p in points}
        if len(steps) != 1:
            raise ContractViolation("seed curves are not aligned on evaluation steps")
        rows.append({
            "env_step": points[0]["env_step"],
            "eval_median_return": float(np.median([p["eval_median_return"] for p in points])),
            "eval_min_return": float(np.median([p["eval_min_return"] for p in points])),
            "eval_max_return": float(np.median([p["eval_max_return"] for p in points])),
            "p_restart": float(np.median([p["p_restart"] for p in points])),
            "wall_seconds": float(np.median([p["wall_seconds"] for p in points])),
        })
    return rows


def cmd_train_rl(cfg: ExperimentConfig) -> int:
    base = Td3Config.desk(**cfg.td3)
    default_beta = cfg.beta if cfg.beta is not None else base.beta
    arms = [parse_arm(a, default_beta) for a in cfg.arms]
    store = None
    if any(use for _, use, _ in arms):
        if cfg.demo_dir is None or not cfg.demo_dir.is_dir():
            raise ContractViolation(f"demo directory {cfg.demo_dir} does not exist")
        store = DemoStore.from_directory(cfg.demo_dir, cfg.env_id)
        if len(store) == 0:
            raise ContractViolation(f"no {cfg.env_id} demos under {cfg.demo_dir}")
        print(f"loaded {len(store.demos)} demos ({len(store)} restart states)")
    summary = {"env_id": cfg.env_id, "seeds": cfg.seeds, "arms": {}}
    for name, use_demos, beta in arms:
        config = Td3Config.from_dict({**base.to_dict(), "use_demos": use_demos, "beta": beta})
        arm_dir = cfg.out / name
        (arm_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        curves, finals = [], []
        for seed in cfg.seeds:
            print(f"== {name} seed={seed}")
            log = lambda row: print(f"  step={row['env_step']} median={row['eval_median_return']:.3f} "
                                    f"p_restart={row['p_restart']:.4f}", flush=True)
            result = train(cfg.env_id, config, store if use_demos else None, seed, cfg.env_options,
                           timing=cfg.timing, log=log)
            write_curve(result.curve, arm_dir / f"seed_{seed}.csv", timing=cfg.timing)
            result.agent.actor.save(arm_dir / "checkpoints" / f"seed_{seed}_actor.mlp")
            curves.append(result.curve)
            finals.append(result.final_return)
        write_curve(median_curve(curves), arm_dir / "median.csv", timing=cfg.timing)
        summary["arms"][name] = {
            "use_demos": use_demos,
            "beta": beta,
            "final_returns": finals,
            "median_final_return": float(np.median(finals)),
            "config": config.to_dict(),
        }
    _write_json(cfg.out / "summary.json", summary)
    for name, arm in summary["arms"].items():
        print(f"{name:>16}  median final return={arm['median_final_return']:.3f}")
    return EXIT_OK


def _demo_files(path: Path) -> list:
    if path.is_dir():
        return sorted(path.rglob("*.demo"))
    return [path]


def cmd_replay_demo(cfg: ExperimentConfig) -> int:
    if cfg.demo_dir is None:
        raise UsageError("replay-demo needs --demo <file or directory>")
    if not cfg.demo_dir.exists():
        raise UsageError(f"no such demo path {cfg.demo_dir}")
    files = _demo_files(cfg.demo_dir)
    if not files:
        raise UsageError(f"no .demo files under {cfg.demo_dir}")
    rows, failed = [], 0
    for path in files:
        demo = demo_io.load(path)
        report = demo_io.replay(make_env(demo.env_id, **{**demo.env_options, **cfg.env_options}), demo)
        status = "ok" if report.ok else f"diverged@{report.first_divergence}"
        failed += not report.ok
        rows.append([str(path), demo.length, repr(report.total_return), repr(report.max_deviation), status])
        print(f"{path}  steps={demo.length} return={report.total_return:.6f} "
              f"max_deviation={report.max_deviation:.3g} {status}")
    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
        _write_csv(cfg.out / "replay.csv", ("path", "steps", "total_return", "max_deviation", "status"), rows)
    if failed:
        print(f"{failed} of {len(files)} demos did not replay exactly", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig) -> int:
    """Time batched rollouts per worker count and check results are bit-identical."""
    config = planner_config(cfg)
    env = make_env(cfg.env_id, **cfg.env_options)
    rows, reference = [], None
    for seed in cfg.seeds:
        env.reset(seed)
        start = env.snapshot()
        rng = np.random.default_rng([seed, 7])
        batches = [rng.uniform(-1, 1, (cfg.bench_candidates, config.tau, env.action_dim))
                   for _ in range(cfg.bench_batches)]
        base_seconds = None
        for workers in cfg.bench_workers:
            t0 = time.perf_counter()
            results = [evaluate_actions(env, start, b, workers) for b in batches]
            seconds = time.perf_counter() - t0
            base_seconds = seconds if base_seconds is None else base_seconds
            if reference is None or workers == cfg.bench_workers[0]:
                reference = results
            identical = all(np.array_equal(a, b) for a, b in zip(results, reference))
            if not identical:
                raise ContractViolation(f"rollout results differ with {workers} workers")
            rows.append([seed, workers, cfg.bench_candidates * cfg.bench_batches,
                         f"{seconds:.4f}" if cfg.timing else "",
                         f"{base_seconds / seconds:.3f}" if cfg.timing else "", int(identical)])
            print(f"seed={seed} workers={workers} seconds={seconds:.4f} identical={identical}")
    _write_csv(cfg.out / "bench.csv", ("seed", "workers", "rollouts", "seconds", "speedup", "identical"), rows)
    return EXIT_OK


COMMANDS = {
    "plan": cmd_plan,
    "ablate": cmd_ablate,
    "train-rl": cmd_train_rl,
    "replay-demo": cmd_replay_demo,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        cfg = load_config(argv)
        return COMMANDS[cfg.mode](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DemoFormatError as exc:
        print(f"bad demo file: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())

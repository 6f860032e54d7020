"""Command line entry point: ``ktmdrl <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import RunConfig
from .envs import task_by_key
from .io import ArtifactError, parse_config
from .ktm import MODES
from .numcore import ContractError

COMMANDS = {
    "train-teachers": "train one TD3 teacher per task",
    "collect": "roll out the teachers into offline buffers",
    "transfer": "offline stage of the student",
    "online": "online stage of the student",
    "eval": "per-task return and performance-ratio table",
    "ablate": "run the ablation matrix and write ablation.csv",
    "run-all": "train-teachers, collect, transfer, online and eval in one go",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="root seed (default from config, else 0)")
    common.add_argument("--out", type=Path, default=Path("runs"), help="artifact directory (default: runs)")
    common.add_argument("--tasks", help="comma-separated task names, e.g. pendulum,reacher2")
    common.add_argument("--mode", choices=list(MODES), help="student configuration")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("--steps", type=int,
                        help="budget override: teacher steps, buffer size, T_off or T_on depending on the command "
                             "(both T_off and T_on for run-all/ablate)")
    common.add_argument("--workers", type=int, help="parallel teacher processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ktmdrl", description="Multi-task knowledge transfer for continuous control.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_ in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_, description=help_)
    return p


def resolve_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ContractError("--seed must be >= 0")
        cfg = replace(cfg, seed=args.seed)
    if args.tasks:
        keys = tuple(t.strip().lower() for t in args.tasks.split(",") if t.strip())
        for k in keys:
            task_by_key(k)
        cfg = replace(cfg, tasks=keys)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.workers is not None:
        if args.workers < 1:
            raise ContractError("--workers must be >= 1")
        cfg = replace(cfg, workers=args.workers)
    if args.steps is not None:
        cfg = apply_steps(cfg, args.command, args.steps)
    return cfg


def apply_steps(cfg: RunConfig, command: str, n: int) -> RunConfig:
    if n < 0:
        raise ContractError("--steps must be >= 0")
    if command == "train-teachers":
        return replace(cfg, teacher_steps={k: n for k in cfg.teacher_steps})
    if command == "collect":
        if n < 1:
            raise ContractError("--steps for collect must be >= 1")
        return replace(cfg, offline_buffer_size=n)
    if command == "transfer":
        return replace(cfg, hp=replace(cfg.hp, t_off=n))
    if command == "online":
        return replace(cfg, hp=replace(cfg.hp, t_on=n))
    if command in ("run-all", "ablate"):
        return replace(cfg, hp=replace(cfg.hp, t_off=n, t_on=n))
    return cfg


def print_ratios(rows, out=None) -> None:
    out = out or sys.stdout
    print(f"{'task':<18}{'final':>12}{'best':>12}{'ideal':>12}{'ratio':>9}", file=out)
    for r in rows:
        ratio = "n/a" if r.ratio is None else f"{r.ratio:.3f}"
        print(f"{r.task:<18}{r.final_return:>12.2f}{r.best_return:>12.2f}{r.ideal_return:>12.2f}{ratio:>9}", file=out)
    print(f"{'mean ratio':<54}{pipeline.mean_ratio(rows):>9.3f}", file=out)


def dispatch(cfg: RunConfig, args) -> None:
    out, ow = args.out, args.overwrite
    cmd = args.command
    if cmd == "train-teachers":
        for key, ret in pipeline.train_teachers(cfg, out, ow).items():
            print(f"{key}: ideal return {ret:.2f}")
    elif cmd == "collect":
        for key, n in pipeline.collect(cfg, out, ow).items():
            print(f"{key}: {n} transitions")
    elif cmd == "transfer":
        pipeline.transfer(cfg, out, cfg.mode, ow)
        print(f"wrote {pipeline.Layout(out).student(cfg.mode, 'offline')}")
    elif cmd == "online":
        pipeline.online(cfg, out, cfg.mode, ow)
        print(f"wrote {pipeline.Layout(out).student(cfg.mode, 'online')}")
    elif cmd == "eval":
        print_ratios(pipeline.evaluate_run(cfg, out, cfg.mode, overwrite=True))
    elif cmd == "ablate":
        table = pipeline.ablate(cfg, out, overwrite=ow)
        for mode, rows in table.items():
            print(f"{mode:<22}{pipeline.mean_ratio(rows):.3f}")
    elif cmd == "run-all":
        print_ratios(pipeline.run_all(cfg, out, ow))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ArtifactError, ContractError) as e:
        print(f"ktmdrl: config error: {e}", file=sys.stderr)
        return 2
    try:
        dispatch(cfg, args)
    except (ArtifactError, ContractError) as e:
        print(f"ktmdrl: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

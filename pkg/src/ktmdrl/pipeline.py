"""Artifact-driven orchestration: teachers, offline buffers, student stages,
evaluation and the ablation matrix.

Every step reads its inputs from and writes its outputs to an output
directory, so each can be rerun on its own.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .envs import TaskSpec
from .io import (
    ArtifactError,
    Checkpoint,
    append_metrics,
    append_timing,
    load_checkpoint,
    save_checkpoint,
)
from .ktm import (
    ABLATION_MODES,
    MODES,
    StageConfig,
    StudentAgent,
    offline_transfer,
    online_learning,
    performance_ratio,
    sync_targets,
)
from .replay import HierarchicalReplay, load_buffer, save_buffer
from .td3 import Optimizers, TeacherConfig, Triple, collect_offline, evaluate, train_teacher

log = logging.getLogger(__name__)


class MissingArtifact(ArtifactError):
    pass


class ArtifactExists(ArtifactError):
    pass


@dataclass(frozen=True)
class Layout:
    """File names under one output directory."""

    root: Path

    def teacher(self, spec: TaskSpec) -> Path:
        return self.root / "teachers" / f"{spec.key}.ktmc"

    def teacher_metrics(self, spec: TaskSpec) -> Path:
        return self.root / "teachers" / f"{spec.key}.metrics.csv"

    def teacher_timing(self, spec: TaskSpec) -> Path:
        return self.root / "teachers" / f"{spec.key}.timing.csv"

    def buffer(self, spec: TaskSpec) -> Path:
        return self.root / "buffers" / f"{spec.key}.ktmb"

    def student_dir(self, mode: str) -> Path:
        return self.root / "student" / mode

    def student(self, mode: str, stage: str) -> Path:
        return self.student_dir(mode) / f"{stage}.ktmc"

    def student_metrics(self, mode: str, stage: str) -> Path:
        return self.student_dir(mode) / f"{stage}.metrics.csv"

    def student_timing(self, mode: str, stage: str) -> Path:
        return self.student_dir(mode) / f"{stage}.timing.csv"

    def ratios(self, mode: str) -> Path:
        return self.root / f"ratios-{mode}.csv"

    @property
    def ablation(self) -> Path:
        return self.root / "ablation.csv"


def _claim(paths, overwrite: bool) -> None:
    """Refuse to clobber existing outputs unless asked; otherwise clear them."""
    existing = [p for p in paths if Path(p).exists()]
    if existing and not overwrite:
        raise ArtifactExists("refusing to overwrite " + ", ".join(map(str, existing)) + " (pass --overwrite)")
    for p in paths:
        p = Path(p)
        p.parent.mkdir(parents=True, exist_ok=True)
        if p.exists():
            p.unlink()


def _require(paths) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise MissingArtifact("missing input artifact(s): " + ", ".join(missing))


def _write_rows(metrics_path, timing_path, rows) -> None:
    for r in rows:
        append_metrics(metrics_path, r)
        append_timing(timing_path, r)


def teacher_seed(cfg: RunConfig, spec: TaskSpec) -> int:
    return nc.derive_seed(cfg.seed, 11, spec.task_id)


def _train_one(args):
    cfg, spec, root = args
    lay = Layout(Path(root))
    tcfg = TeacherConfig(hidden=cfg.hidden, warmup=cfg.warmup, eval_interval=cfg.eval_interval,
                         eval_episodes=cfg.eval_episodes, eval_seed=cfg.eval_seed,
                         buffer_capacity=cfg.buffer_capacity)
    steps = cfg.teacher_steps[spec.key]
    res = train_teacher(spec, cfg.hp, steps, teacher_seed(cfg, spec), tcfg)
    if not res.metrics:
        ideal = evaluate(res.triple, spec, cfg.eval_episodes, cfg.eval_seed)
    else:
        ideal = res.best_return
    prov = {"stage": "teacher", "seed": cfg.seed, "steps": steps, "best_step": res.best_step,
            "ideal_return": ideal, "eval_episodes": cfg.eval_episodes, "eval_seed": cfg.eval_seed}
    save_checkpoint(lay.teacher(spec), Checkpoint("teacher", res.triple, res.targets, cfg.hp, res.opt,
                                                  task_id=spec.task_id, provenance=prov))
    _write_rows(lay.teacher_metrics(spec), lay.teacher_timing(spec), res.metrics)
    return spec.key, ideal


def train_teachers(cfg: RunConfig, out, overwrite: bool = False) -> dict[str, float]:
    """Train one TD3 teacher per task; returns each teacher's ideal return."""
    lay = Layout(Path(out))
    specs = cfg.task_specs()
    _claim([p for s in specs for p in (lay.teacher(s), lay.teacher_metrics(s), lay.teacher_timing(s))], overwrite)
    jobs = [(cfg, s, str(lay.root)) for s in specs]
    if cfg.workers > 1 and len(jobs) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(min(cfg.workers, len(jobs))) as pool:
            results = pool.map(_train_one, jobs)
    else:
        results = [_train_one(j) for j in jobs]
    return dict(results)


def load_teachers(cfg: RunConfig, out) -> tuple[dict[int, Triple], dict[int, float]]:
    lay = Layout(Path(out))
    specs = cfg.task_specs()
    _require(lay.teacher(s) for s in specs)
    triples, ideal = {}, {}
    for s in specs:
        ck = load_checkpoint(lay.teacher(s), role="teacher")
        if ck.task_id != s.task_id:
            raise ArtifactError(f"{lay.teacher(s)}: holds task {ck.task_id}, expected {s.task_id}")
        triples[s.task_id] = ck.online
        ideal[s.task_id] = float(ck.provenance["ideal_return"])
    return triples, ideal


def collect(cfg: RunConfig, out, overwrite: bool = False) -> dict[str, int]:
    """Roll out every teacher into its offline buffer file."""
    lay = Layout(Path(out))
    specs = cfg.task_specs()
    teachers, _ = load_teachers(cfg, out)
    _claim([lay.buffer(s) for s in specs], overwrite)
    sizes = {}
    for s in specs:
        buf = collect_offline(teachers[s.task_id], s, cfg.offline_buffer_size, cfg.collect_sigma,
                              nc.derive_seed(cfg.seed, 12, s.task_id))
        save_buffer(lay.buffer(s), buf)
        sizes[s.key] = len(buf)
    return sizes


def _stage_cfg(cfg: RunConfig) -> StageConfig:
    return StageConfig(eval_interval=cfg.student_eval_interval, eval_episodes=cfg.eval_episodes,
                       eval_seed=cfg.eval_seed, online_warmup=cfg.online_warmup,
                       buffer_capacity=cfg.buffer_capacity)


def _best_from_rows(rows, specs, prior=None) -> dict[str, float]:
    best = dict(prior or {})
    for r in rows:
        key = next(s.key for s in specs if s.name == r["task"])
        best[key] = max(best.get(key, -math.inf), r["mean_return"])
    return best


def _save_student(path, student: StudentAgent, cfg: RunConfig, stage: str, best: dict) -> None:
    prov = {"stage": stage, "mode": student.mode.name, "seed": cfg.seed, "best_returns": best,
            "tasks": [s.key for s in student.specs], "task_onehot": cfg.task_onehot,
            "counters": dict(sorted(student.counters.items())),
            "offline_source": f"fresh teacher rollouts, sigma={cfg.collect_sigma!r}, "
                              f"{cfg.offline_buffer_size} transitions/task"}
    save_checkpoint(path, Checkpoint("student", student.triple, student.targets, student.hp, student.opt,
                                     provenance=prov))


def transfer(cfg: RunConfig, out, mode: str | None = None, overwrite: bool = False) -> dict[str, float]:
    """Offline stage for ``mode``. Modes without it only initialise and sync the student."""
    mode = mode or cfg.mode
    lay = Layout(Path(out))
    specs = cfg.task_specs()
    student = StudentAgent(specs, cfg.hp, mode, cfg.student_width, nc.derive_seed(cfg.seed, 13), cfg.task_onehot)
    outputs = [lay.student(mode, "offline"), lay.student_metrics(mode, "offline"), lay.student_timing(mode, "offline")]
    rows = []
    if student.mode.offline_enabled:
        teachers, _ = load_teachers(cfg, out)
        _require(lay.buffer(s) for s in specs)
        buffers = HierarchicalReplay(specs, cfg.buffer_capacity)
        for s in specs:
            buffers.buffers[s.task_id] = load_buffer(lay.buffer(s), s, cfg.buffer_capacity)
        _claim(outputs, overwrite)
        rows = offline_transfer(student, teachers, buffers, nc.derive_seed(cfg.seed, 14), _stage_cfg(cfg))
    else:
        _claim(outputs, overwrite)
        sync_targets(student)
    # the metrics file exists even when empty so downstream steps can rely on it
    lay.student_metrics(mode, "offline").touch()
    _write_rows(lay.student_metrics(mode, "offline"), lay.student_timing(mode, "offline"), rows)
    best = _best_from_rows(rows, specs)
    _save_student(lay.student(mode, "offline"), student, cfg, "offline", best)
    return best


def restore_student(ck: Checkpoint, cfg: RunConfig, mode: str) -> StudentAgent:
    specs = cfg.task_specs()
    hidden = tuple(ck.online.actor.sizes[1:-1])
    student = StudentAgent(specs, cfg.hp, mode, hidden, 0, cfg.task_onehot)
    for dst, src in zip(student.triple.nets() + student.targets.nets(), ck.online.nets() + ck.target.nets()):
        if not dst.same_shape(src):
            raise ArtifactError("student checkpoint does not match the configured tasks/architecture")
        nc.copy_into(dst, src)
    if ck.adam is not None:
        student.opt = Optimizers(ck.adam.actor, ck.adam.critic1, ck.adam.critic2)
        for st in student.opt.actor, student.opt.critic1, student.opt.critic2:
            st.lr = student.hp.lr
    student.counters.update(ck.provenance.get("counters", {}))
    return student


def online(cfg: RunConfig, out, mode: str | None = None, overwrite: bool = False) -> dict[str, float]:
    """Online stage, resuming from the offline checkpoint of ``mode``."""
    mode = mode or cfg.mode
    lay = Layout(Path(out))
    specs = cfg.task_specs()
    _require([lay.student(mode, "offline")])
    ck = load_checkpoint(lay.student(mode, "offline"), role="student")
    student = restore_student(ck, cfg, mode)
    teachers = None
    if student.mode.use_teacher_term and student.mode.online_enabled:
        teachers, _ = load_teachers(cfg, out)
    outputs = [lay.student(mode, "online"), lay.student_metrics(mode, "online"), lay.student_timing(mode, "online")]
    _claim(outputs, overwrite)
    rows = []
    if student.mode.online_enabled:
        rows = online_learning(student, teachers, HierarchicalReplay(specs, cfg.buffer_capacity),
                               nc.derive_seed(cfg.seed, 15), _stage_cfg(cfg))
    lay.student_metrics(mode, "online").touch()
    _write_rows(lay.student_metrics(mode, "online"), lay.student_timing(mode, "online"), rows)
    best = _best_from_rows(rows, specs, ck.provenance.get("best_returns"))
    _save_student(lay.student(mode, "online"), student, cfg, "online", best)
    return best


@dataclass
class RatioRow:
    task: str
    final_return: float
    best_return: float
    ideal_return: float
    ratio: float | None


RATIO_FIELDS = ("task", "final_return", "best_return", "ideal_return", "ratio")


def evaluate_run(cfg: RunConfig, out, mode: str | None = None, overwrite: bool = True) -> list[RatioRow]:
    """Per-task table for the latest student checkpoint of ``mode``.

    The ratio compares max averaged evaluation returns over the student's
    whole learning curve with the teacher's; ``final_return`` is a fresh
    evaluation of the last checkpoint.
    """
    mode = mode or cfg.mode
    lay = Layout(Path(out))
    specs = cfg.task_specs()
    path = lay.student(mode, "online")
    if not path.exists():
        path = lay.student(mode, "offline")
    _require([path])
    _, ideal = load_teachers(cfg, out)
    ck = load_checkpoint(path, role="student")
    student = restore_student(ck, cfg, mode)
    best = ck.provenance.get("best_returns", {})
    rows = []
    for s in specs:
        final = evaluate_policy(student, s, cfg)
        b = max(best.get(s.key, -math.inf), final)
        rows.append(RatioRow(s.name, final, b, ideal[s.task_id], performance_ratio(b, ideal[s.task_id])))
    _claim([lay.ratios(mode)], overwrite)
    write_table(lay.ratios(mode), RATIO_FIELDS, [[r.task, r.final_return, r.best_return, r.ideal_return, r.ratio]
                                                 for r in rows])
    return rows


def read_ratios(path) -> list[RatioRow]:
    with open(path, encoding="utf-8", newline="") as f:
        return [RatioRow(r["task"], float(r["final_return"]), float(r["best_return"]), float(r["ideal_return"]),
                         float(r["ratio"]) if r["ratio"] else None) for r in csv.DictReader(f)]


def evaluate_policy(student: StudentAgent, spec: TaskSpec, cfg: RunConfig) -> float:
    from .td3 import rollout_returns

    return float(rollout_returns(student.policy(spec), spec, cfg.eval_episodes, cfg.eval_seed).mean())


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(_cell(v) for v in r) + "\n")
    tmp.replace(path)


def run_mode(cfg: RunConfig, out, mode: str, overwrite: bool = False) -> list[RatioRow]:
    transfer(cfg, out, mode, overwrite)
    online(cfg, out, mode, overwrite)
    return evaluate_run(cfg, out, mode, overwrite=True)


def mean_ratio(rows: list[RatioRow]) -> float:
    vals = [r.ratio for r in rows if r.ratio is not None]
    return float(np.mean(vals)) if vals else math.nan


def offline_signature(mode: str) -> tuple[bool, bool]:
    """Modes with equal signatures run an identical offline stage (the actor
    weights of the online stage do not enter it)."""
    m = MODES[mode]
    return (m.offline_enabled, m.her_enabled)


def reuse_offline(cfg: RunConfig, out, src_mode: str, mode: str, overwrite: bool = False) -> None:
    """Copy the offline stage of ``src_mode`` to ``mode`` instead of recomputing it."""
    if offline_signature(src_mode) != offline_signature(mode):
        raise ArtifactError(f"offline stages of {src_mode} and {mode} differ")
    lay = Layout(Path(out))
    srcs = [lay.student(src_mode, "offline"), lay.student_metrics(src_mode, "offline"),
            lay.student_timing(src_mode, "offline")]
    _require(srcs[:2])
    dsts = [lay.student(mode, "offline"), lay.student_metrics(mode, "offline"), lay.student_timing(mode, "offline")]
    _claim(dsts, overwrite)
    ck = load_checkpoint(srcs[0], role="student")
    ck.hyperparams = MODES[mode].hyperparams(cfg.hp)
    ck.provenance = {**ck.provenance, "mode": mode}
    save_checkpoint(dsts[0], ck)
    for src, dst in zip(srcs[1:], dsts[1:]):
        dst.write_bytes(src.read_bytes() if src.exists() else b"")


def ablate(cfg: RunConfig, out, modes=ABLATION_MODES, overwrite: bool = False) -> dict[str, list[RatioRow]]:
    """Run every ablation mode from the shared teachers and buffers; write the ratio matrix."""
    lay = Layout(Path(out))
    specs = cfg.task_specs()
    _claim([lay.ablation], overwrite)
    table, offline_done = {}, {}
    for m in modes:
        sig = offline_signature(m)
        if sig in offline_done:
            reuse_offline(cfg, out, offline_done[sig], m, overwrite)
        else:
            transfer(cfg, out, m, overwrite)
            offline_done[sig] = m
        online(cfg, out, m, overwrite)
        table[m] = evaluate_run(cfg, out, m, overwrite=True)
    header = ("mode",) + tuple(s.name for s in specs) + ("mean",)
    write_table(lay.ablation, header, [[m] + [r.ratio for r in rows] + [mean_ratio(rows)]
                                       for m, rows in table.items()])
    return table


def run_all(cfg: RunConfig, out, overwrite: bool = False) -> list[RatioRow]:
    train_teachers(cfg, out, overwrite)
    collect(cfg, out, overwrite)
    return run_mode(cfg, out, cfg.mode, overwrite)

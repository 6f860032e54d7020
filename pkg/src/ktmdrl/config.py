"""Run configuration: the training hyperparameters plus the desk-scale run plan."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .envs import suite
from .td3 import DEFAULT_HIDDEN, Hyperparams

# Desk-scale teacher budgets (environment steps) per task key.
DEFAULT_TEACHER_STEPS = {
    "pendulum": 30_000,
    "pointmass-light": 20_000,
    "pointmass-heavy": 20_000,
    "pointmass-drag": 20_000,
    "reacher2": 30_000,
}


@dataclass
class RunConfig:
    hp: Hyperparams = field(default_factory=Hyperparams)
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    student_hidden: tuple[int, ...] | None = None
    teacher_steps: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_TEACHER_STEPS))
    warmup: int = 1000
    online_warmup: int = 1000
    offline_buffer_size: int = 20_000
    collect_sigma: float = 0.1
    buffer_capacity: int = 1_000_000
    eval_interval: int = 1000
    student_eval_interval: int = 1000
    eval_episodes: int = 10
    eval_seed: int = 10_007
    task_onehot: bool = False
    seed: int = 0
    mode: str = "full"
    tasks: tuple[str, ...] = field(default_factory=lambda: tuple(s.key for s in suite()))
    workers: int = 1

    @property
    def student_width(self) -> tuple[int, ...]:
        return self.student_hidden or self.hidden

    def task_specs(self):
        from .envs import task_by_key

        return sorted((task_by_key(t) for t in self.tasks), key=lambda s: s.task_id)

    def plan_dict(self) -> dict:
        """Everything except the hyperparameters, JSON-ready."""
        out = {}
        for f in fields(self):
            if f.name == "hp":
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

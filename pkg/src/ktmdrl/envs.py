"""Seedable continuous-control tasks with heterogeneous state/action sizes.

All tasks integrate with semi-implicit Euler at ``DT`` and run fixed
200-step episodes with no early termination.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .numcore import ContractError, make_rng

DT = 0.05
EPISODE_STEPS = 200


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    state_dim: int
    action_dim: int
    action_bound: float
    max_episode_steps: int = EPISODE_STEPS

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ContractError("state_dim and action_dim must be >= 1")
        if not self.action_bound > 0 or self.max_episode_steps < 1:
            raise ContractError("action_bound must be > 0 and max_episode_steps >= 1")

    @property
    def key(self) -> str:
        return self.name.lower()


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    # true only for a genuine terminal state; timeouts are not terminal
    terminated: bool = False


class Env:
    """Base class: subclasses implement ``_init_state``, ``_dynamics`` and ``_obs``."""

    spec: TaskSpec

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.state: np.ndarray | None = None
        self.t = 0
        self.done = True
        self.rng = make_rng(0)

    def reset(self, seed: int) -> np.ndarray:
        self.rng = make_rng(seed)
        self.state = self._init_state(self.rng)
        self.t = 0
        self.done = False
        return self._obs()

    def step(self, action) -> StepResult:
        if self.done:
            raise ContractError("step() called on a finished episode; call reset()")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.spec.action_dim,):
            raise ContractError(f"{self.spec.name}: expected action of length {self.spec.action_dim}, got {a.shape}")
        a = np.clip(a, -self.spec.action_bound, self.spec.action_bound)
        reward = self._dynamics(a)
        self.t += 1
        self.done = self.t >= self.spec.max_episode_steps
        return StepResult(self._obs(), float(reward), self.done)

    def _init_state(self, rng) -> np.ndarray:
        raise NotImplementedError

    def _dynamics(self, u: np.ndarray) -> float:
        raise NotImplementedError

    def _obs(self) -> np.ndarray:
        raise NotImplementedError


def wrap_angle(x: float) -> float:
    return (x + math.pi) % (2 * math.pi) - math.pi


class Pendulum(Env):
    """Torque-limited swing-up. State (theta, omega) with theta=0 upright.

    Cost is taken on the pre-step state and the applied torque.
    """

    G, M, L = 10.0, 1.0, 1.0
    MAX_SPEED = 8.0

    def _init_state(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def _dynamics(self, u):
        th, om = self.state
        torque = u[0]
        reward = -(wrap_angle(th) ** 2 + 0.1 * om ** 2 + 0.001 * torque ** 2)
        om = om + DT * (3 * self.G / (2 * self.L) * math.sin(th) + 3.0 / (self.M * self.L ** 2) * torque)
        om = min(max(om, -self.MAX_SPEED), self.MAX_SPEED)
        th = wrap_angle(th + DT * om)
        self.state = np.array([th, om])
        return reward

    def _obs(self):
        th, om = self.state
        return np.array([math.cos(th), math.sin(th), om])


class PointMass(Env):
    """2-D point mass with linear drag pushed toward a fixed target.

    Cost is the post-step distance to the target plus a small force penalty.
    """

    TARGET = np.array([1.0, 1.0])
    LIMIT = 2.0

    def __init__(self, spec, mass: float, drag: float):
        super().__init__(spec)
        self.mass = mass
        self.drag = drag

    def _init_state(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, 2), np.zeros(2)])

    def _dynamics(self, u):
        p, v = self.state[:2], self.state[2:]
        v = v + DT * (u / self.mass - self.drag * v)
        p = np.clip(p + DT * v, -self.LIMIT, self.LIMIT)
        self.state = np.concatenate([p, v])
        return -float(np.linalg.norm(p - self.TARGET)) - 0.01 * float(u @ u)

    def _obs(self):
        return self.state.copy()


class Reacher2(Env):
    """Planar two-link arm (unit links) reaching a fixed target with its tip."""

    TARGET = np.array([0.5, 1.0])
    MAX_SPEED = 4.0

    def _init_state(self, rng):
        return np.concatenate([rng.uniform(-0.1, 0.1, 2), np.zeros(2)])

    def _dynamics(self, u):
        q, dq = self.state[:2], self.state[2:]
        dq = np.clip(dq + DT * (u - 0.1 * dq), -self.MAX_SPEED, self.MAX_SPEED)
        q = q + DT * dq
        self.state = np.concatenate([q, dq])
        return -float(np.linalg.norm(self.tip() - self.TARGET)) - 0.01 * float(u @ u)

    def tip(self) -> np.ndarray:
        q1, q2 = self.state[:2]
        return np.array([math.cos(q1) + math.cos(q1 + q2), math.sin(q1) + math.sin(q1 + q2)])

    def _obs(self):
        q1, q2, dq1, dq2 = self.state
        tx, ty = self.TARGET
        return np.array([math.cos(q1), math.sin(q1), math.cos(q2), math.sin(q2), dq1, dq2, tx, ty])


_SUITE = (
    (TaskSpec(0, "Pendulum", 3, 1, 2.0), lambda s: Pendulum(s)),
    (TaskSpec(1, "PointMass-light", 4, 2, 1.0), lambda s: PointMass(s, 0.5, 0.1)),
    (TaskSpec(2, "PointMass-heavy", 4, 2, 1.0), lambda s: PointMass(s, 2.0, 0.1)),
    (TaskSpec(3, "PointMass-drag", 4, 2, 1.0), lambda s: PointMass(s, 1.0, 1.0)),
    (TaskSpec(4, "Reacher2", 8, 2, 1.0), lambda s: Reacher2(s)),
)


def suite() -> list[TaskSpec]:
    """The five tasks, ordered by task_id."""
    return [spec for spec, _ in _SUITE]


def make_env(task) -> Env:
    """Build an environment from a TaskSpec, task_id or (case-insensitive) name."""
    spec = task_by_key(task)
    return _SUITE[spec.task_id][1](spec)


def task_by_key(task) -> TaskSpec:
    if isinstance(task, TaskSpec):
        return task
    if isinstance(task, (int, np.integer)):
        if not 0 <= task < len(_SUITE):
            raise ContractError(f"unknown task id {task}")
        return _SUITE[task][0]
    key = str(task).strip().lower()
    for spec, _ in _SUITE:
        if spec.key == key:
            return spec
    raise ContractError(f"unknown task {task!r}; known: {', '.join(s.key for s in suite())}")


def fingerprint(specs=None) -> str:
    """sha256 over the TaskSpec list; checkpoints refuse to load across suites."""
    specs = suite() if specs is None else specs
    blob = json.dumps([asdict(s) for s in specs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()

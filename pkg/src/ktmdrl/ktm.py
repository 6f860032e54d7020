"""Multi-task student: offline knowledge transfer from frozen teachers, then
teacher-guided online learning, over zero-padded states and actions."""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .envs import TaskSpec, make_env
from .numcore import ContractError, Mlp
from .replay import Batch, HierarchicalReplay
from .td3 import (
    DEFAULT_HIDDEN,
    Hyperparams,
    Optimizers,
    Triple,
    action_gradient,
    make_triple,
    regress_critics,
    rollout_returns,
    update_targets,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mode:
    """Which parts of the two-stage procedure run. Ablations only flip these flags."""

    name: str = "full"
    offline_enabled: bool = True
    online_enabled: bool = True
    use_teacher_term: bool = True
    use_own_term: bool = True
    her_enabled: bool = True

    def hyperparams(self, hp: Hyperparams) -> Hyperparams:
        """Zero the actor-gradient weights of disabled terms."""
        return replace(hp, alpha=hp.alpha if self.use_teacher_term else 0.0,
                       beta=hp.beta if self.use_own_term else 0.0)


MODES = {
    "full": Mode("full"),
    "no-offline": Mode("no-offline", offline_enabled=False),
    "no-online": Mode("no-online", online_enabled=False),
    "online-no-teacher": Mode("online-no-teacher", use_teacher_term=False),
    "online-only-teacher": Mode("online-only-teacher", use_own_term=False),
    "no-her": Mode("no-her", her_enabled=False),
    "td3-mt": Mode("td3-mt", offline_enabled=False, use_teacher_term=False),
}

ABLATION_MODES = ("full", "no-offline", "no-online", "online-no-teacher", "online-only-teacher", "no-her")


class PaddingScheme:
    """Zero-padding of native states/actions to suite-wide widths, plus the
    slice (execute) and mask (bootstrap) maps from padded actions back to a task."""

    def __init__(self, specs: list[TaskSpec], task_onehot: bool = False):
        if not specs:
            raise ContractError("empty task list")
        self.specs = {s.task_id: s for s in specs}
        self.s_max = max(s.state_dim for s in specs)
        self.a_max = max(s.action_dim for s in specs)
        self.task_onehot = task_onehot
        self.n_tasks = max(self.specs) + 1
        self.state_width = self.s_max + (self.n_tasks if task_onehot else 0)

    def _check(self, x, width, what):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != width:
            raise ContractError(f"{what}: expected last dimension {width}, got {x.shape}")
        return x

    def pad_state(self, s, task: TaskSpec) -> np.ndarray:
        s = self._check(s, task.state_dim, f"{task.name} state")
        out = np.zeros(s.shape[:-1] + (self.state_width,))
        out[..., :task.state_dim] = s
        if self.task_onehot:
            out[..., self.s_max + task.task_id] = 1.0
        return out

    def pad_action(self, a, task: TaskSpec) -> np.ndarray:
        a = self._check(a, task.action_dim, f"{task.name} action")
        out = np.zeros(a.shape[:-1] + (self.a_max,))
        out[..., :task.action_dim] = a
        return out

    def slice_f(self, a_pred, task: TaskSpec) -> np.ndarray:
        """First action_dim components, clipped to the task bound."""
        a_pred = self._check(a_pred, self.a_max, "padded action")
        return np.clip(a_pred[..., :task.action_dim], -task.action_bound, task.action_bound)

    def mask_g(self, a_pred, task: TaskSpec) -> np.ndarray:
        """Clipped native components kept in place, padding components set to 0."""
        a_pred = self._check(a_pred, self.a_max, "padded action")
        out = np.zeros_like(a_pred)
        out[..., :task.action_dim] = np.clip(a_pred[..., :task.action_dim], -task.action_bound, task.action_bound)
        return out


class StudentAgent:
    """One actor/twin-critic triple over padded dimensions serving every task."""

    def __init__(self, specs: list[TaskSpec], hp: Hyperparams, mode: Mode | str = "full",
                 hidden=DEFAULT_HIDDEN, seed: int = 0, task_onehot: bool = False):
        self.specs = list(specs)
        self.mode = MODES[mode] if isinstance(mode, str) else mode
        self.hp = self.mode.hyperparams(hp)
        self.pad = PaddingScheme(self.specs, task_onehot)
        self.bound = max(s.action_bound for s in self.specs)
        rng = nc.make_rng(nc.derive_seed(seed, 101))
        self.triple = make_triple(self.pad.state_width, self.pad.a_max, self.bound, rng, hidden)
        self.targets = self.triple.copy()
        self.opt = Optimizers.for_triple(self.triple, self.hp.lr)
        self.counters: Counter = Counter()
        self.stage = "init"

    def task(self, k) -> TaskSpec:
        return self.pad.specs[k]

    def policy(self, task: TaskSpec):
        """Deterministic native-dimension policy for ``task``."""
        def act(states):
            return self.pad.slice_f(nc.forward(self.triple.actor, self.pad.pad_state(states, task)), task)
        return act

    def act(self, state, task: TaskSpec, sigma: float, rng) -> np.ndarray:
        a = self.policy(task)(state)
        if sigma > 0:
            a = a + nc.gaussian(rng, sigma, a.shape)
        return np.clip(a, -task.action_bound, task.action_bound)


def pad_batch(student: StudentAgent, batch: Batch, task: TaskSpec):
    return student.pad.pad_state(batch.states, task), student.pad.pad_action(batch.actions, task)


def _nonempty(batch: Batch):
    if len(batch) == 0:
        raise ContractError("empty batch")


def offline_critic_update(student: StudentAgent, teacher: Triple, batch: Batch, task: TaskSpec) -> float:
    """Regress the student's twin critics (padded inputs) onto the teacher's (native inputs)."""
    _nonempty(batch)
    x_native = np.concatenate([batch.states, batch.actions], axis=1)
    y1 = nc.forward(teacher.critic1, x_native)[:, 0]
    y2 = nc.forward(teacher.critic2, x_native)[:, 0]
    s_hat, a_hat = pad_batch(student, batch, task)
    loss = regress_critics(student.triple, student.opt, np.concatenate([s_hat, a_hat], axis=1), y1, y2)
    student.counters[f"offline_critic/{task.task_id}"] += 1
    return loss


def teacher_action_grad(student: StudentAgent, teacher: Triple, states, task: TaskSpec, a_pred) -> np.ndarray:
    """Per-sample dQ1^k(s, a)/da at a = f^k(a_pred), placed in the padded action layout.

    Components beyond the task's action_dim receive zero gradient.
    """
    g = np.zeros_like(a_pred)
    g[:, :task.action_dim] = action_gradient(teacher.critic1, states, student.pad.slice_f(a_pred, task))
    return g


def own_action_grad(student: StudentAgent, s_hat, task: TaskSpec, a_pred) -> np.ndarray:
    """Per-sample dQ1(s_hat, a)/da at a = g^k(a_pred), with padding components zeroed."""
    g = action_gradient(student.triple.critic1, s_hat, student.pad.mask_g(a_pred, task))
    g[:, task.action_dim:] = 0.0
    return g


def actor_gradient(student: StudentAgent, teacher: Triple | None, batch: Batch, task: TaskSpec,
                   alpha: float, beta: float) -> Mlp:
    """Descent direction for the student actor.

    Negated ``(alpha/N) sum dQ1^k/da * dpi/dtheta + (beta/N) sum dQ1/da * dpi/dtheta``:
    the action gradient of each critic is evaluated at the sliced (teacher) or
    masked (own) action and pushed straight into the actor output, so the
    clip inside slice/mask does not gate the gradient.
    """
    _nonempty(batch)
    n = len(batch)
    s_hat = student.pad.pad_state(batch.states, task)
    a_pred, cache = nc.forward_cached(student.triple.actor, s_hat)
    g = np.zeros_like(a_pred)
    if alpha:
        if teacher is None:
            raise ContractError("teacher term requested without a teacher")
        g += alpha * teacher_action_grad(student, teacher, batch.states, task, a_pred)
    if beta:
        g += beta * own_action_grad(student, s_hat, task, a_pred)
    grad, _ = nc.backward(student.triple.actor, s_hat, g * (-1.0 / n), cache)
    return grad


def offline_actor_update(student: StudentAgent, teacher: Triple, batch: Batch, task: TaskSpec) -> None:
    grad = actor_gradient(student, teacher, batch, task, 1.0, 0.0)
    nc.adam_step(student.opt.actor, student.triple.actor, grad)
    student.counters[f"offline_actor/{task.task_id}"] += 1


def sync_targets(student: StudentAgent) -> None:
    for t, o in zip(student.targets.nets(), student.triple.nets()):
        nc.copy_into(t, o)
    student.counters["sync"] += 1


def target_noise(student: StudentAgent, n: int, task: TaskSpec, rng) -> np.ndarray:
    """Clipped Gaussian smoothing noise, nonzero only in the task's native action slots."""
    hp = student.hp
    eps = np.zeros((n, student.pad.a_max))
    eps[:, :task.action_dim] = np.clip(
        nc.gaussian(rng, hp.target_noise_sigma, (n, task.action_dim)), -hp.noise_clip, hp.noise_clip)
    return eps


def compute_target_y(student: StudentAgent, batch: Batch, task: TaskSpec, rng, noise=None) -> np.ndarray:
    """y_i = r_i + gamma (1 - done_i) min_j Q'_j(s'_hat, g(pi'(s'_hat)) + eps)."""
    _nonempty(batch)
    hp = student.hp
    s2_hat = student.pad.pad_state(batch.next_states, task)
    a2 = student.pad.mask_g(nc.forward(student.targets.actor, s2_hat), task)
    if noise is None:
        noise = target_noise(student, len(batch), task, rng)
    a2 = student.pad.mask_g(a2 + noise, task)
    x = np.concatenate([s2_hat, a2], axis=1)
    q1 = nc.forward(student.targets.critic1, x)[:, 0]
    q2 = nc.forward(student.targets.critic2, x)[:, 0]
    return batch.rewards + hp.gamma * (1.0 - batch.dones) * np.minimum(q1, q2)


def online_critic_update(student: StudentAgent, batch: Batch, task: TaskSpec, rng) -> float:
    y = compute_target_y(student, batch, task, rng)
    s_hat, a_hat = pad_batch(student, batch, task)
    loss = regress_critics(student.triple, student.opt, np.concatenate([s_hat, a_hat], axis=1), y, y)
    student.counters[f"online_critic/{task.task_id}"] += 1
    return loss


def online_actor_update(student: StudentAgent, teacher: Triple | None, batch: Batch, task: TaskSpec) -> None:
    hp = student.hp
    if hp.alpha == 0 and hp.beta == 0:
        return
    grad = actor_gradient(student, teacher, batch, task, hp.alpha, hp.beta)
    nc.adam_step(student.opt.actor, student.triple.actor, grad)
    student.counters[f"online_actor/{task.task_id}"] += 1


class _Schedule:
    """Task order for one stage.

    With hierarchical replay every epoch visits each task once.  Without it an
    epoch is K consecutive updates of a single task and the driver moves to the
    next task after ``block`` updates (an episode's worth of samples).
    """

    def __init__(self, task_ids, her: bool, block: int):
        self.ids = list(task_ids)
        self.her = her
        self.block = block
        self.cur = 0
        self.run = 0

    def epoch(self):
        if self.her:
            return list(self.ids)
        return [self.ids[self.cur]] * len(self.ids)

    def advance(self, done: bool):
        """Called after each non-HER update with whether the block finished."""
        self.run += 1
        if done or self.run >= self.block:
            self.cur = (self.cur + 1) % len(self.ids)
            self.run = 0


@dataclass
class StageConfig:
    eval_interval: int = 1000
    eval_episodes: int = 10
    eval_seed: int = 10_007
    online_warmup: int = 1000
    buffer_capacity: int = 1_000_000


def evaluate_student(student: StudentAgent, episodes: int, seed: int) -> dict[int, float]:
    return {s.task_id: float(rollout_returns(student.policy(s), s, episodes, seed).mean()) for s in student.specs}


class _Recorder:
    def __init__(self, student, cfg, stage, on_eval):
        self.student, self.cfg, self.stage, self.on_eval = student, cfg, stage, on_eval
        self.losses = {s.task_id: [] for s in student.specs}
        self.rows: list[dict] = []
        self.t0 = time.perf_counter()
        self.last = -1

    def __call__(self, epoch):
        if epoch == self.last:
            return
        self.last = epoch
        rets = evaluate_student(self.student, self.cfg.eval_episodes, self.cfg.eval_seed)
        for s in self.student.specs:
            ls = self.losses[s.task_id]
            self.rows.append(dict(
                stage=self.stage, epoch=epoch, task=s.name, mean_return=rets[s.task_id],
                critic_loss=float(np.mean(ls)) if ls else float("nan"), actor_objective=float("nan"),
                wall_ms=int((time.perf_counter() - self.t0) * 1000),
            ))
            ls.clear()
        if self.on_eval is not None:
            self.on_eval(self.stage, epoch, rets)


def offline_transfer(student: StudentAgent, teachers: dict[int, Triple], buffers: HierarchicalReplay,
                     seed: int = 0, cfg: StageConfig | None = None, on_eval=None) -> list[dict]:
    """Offline stage: T_off epochs of teacher-critic regression and teacher-guided
    actor updates on the stored teacher experience, then a hard target sync."""
    cfg = cfg or StageConfig()
    hp = student.hp
    ids = [s.task_id for s in student.specs]
    for k in ids:
        if len(buffers[k]) == 0:
            raise ContractError(f"offline buffer for task {k} is empty")
    rng = nc.make_rng(nc.derive_seed(seed, 201))
    rec = _Recorder(student, cfg, "offline", on_eval)
    sched = _Schedule(ids, student.mode.her_enabled,
                      max(s.max_episode_steps for s in student.specs))
    student.stage = "offline"
    for t in range(1, hp.t_off + 1):
        for k in sched.epoch():
            task = student.task(k)
            batch = buffers.sample(k, hp.batch_size, rng)
            rec.losses[k].append(offline_critic_update(student, teachers[k], batch, task))
            offline_actor_update(student, teachers[k], batch, task)
            if not sched.her:
                sched.advance(False)
        student.counters["offline_epochs"] += 1
        if t % cfg.eval_interval == 0:
            rec(t)
    if hp.t_off > 0:
        rec(hp.t_off)
    sync_targets(student)
    return rec.rows


def online_learning(student: StudentAgent, teachers: dict[int, Triple] | None, buffers: HierarchicalReplay,
                    seed: int = 0, cfg: StageConfig | None = None, on_eval=None) -> list[dict]:
    """Online stage: each epoch steps every task's environment once with the
    noisy student policy, stores the native transition, and makes one critic
    update per task; every d-th update of a task also updates the actor with
    the combined teacher/own-critic gradient and Polyak-averages the targets."""
    cfg = cfg or StageConfig()
    hp = student.hp
    teachers = teachers or {}
    ids = [s.task_id for s in student.specs]
    rng = nc.make_rng(nc.derive_seed(seed, 301))
    envs = {k: make_env(student.task(k)) for k in ids}
    episodes = Counter()
    obs = {k: envs[k].reset(nc.derive_seed(seed, 302, k, 0)) for k in ids}
    updates = Counter()
    rec = _Recorder(student, cfg, "online", on_eval)
    sched = _Schedule(ids, student.mode.her_enabled, max(s.max_episode_steps for s in student.specs))
    student.stage = "online"
    for t in range(1, hp.t_on + 1):
        for k in sched.epoch():
            task = student.task(k)
            a = student.act(obs[k], task, hp.explore_sigma, rng)
            step = envs[k].step(a)
            buffers[k].push(obs[k], a, step.reward, step.next_state, step.terminated)
            student.counters[f"env_steps/{k}"] += 1
            obs[k] = step.next_state
            if step.done:
                episodes[k] += 1
                obs[k] = envs[k].reset(nc.derive_seed(seed, 302, k, episodes[k]))
            if not sched.her:
                sched.advance(step.done)
            if len(buffers[k]) < cfg.online_warmup:
                continue
            batch = buffers.sample(k, hp.batch_size, rng)
            rec.losses[k].append(online_critic_update(student, batch, task, rng))
            updates[k] += 1
            if updates[k] % hp.policy_delay == 0:
                online_actor_update(student, teachers.get(k), batch, task)
                update_targets(student.targets, student.triple, hp.tau)
                student.counters["polyak"] += 1
        student.counters["online_epochs"] += 1
        if t % cfg.eval_interval == 0:
            rec(t)
    if hp.t_on > 0:
        rec(hp.t_on)
    return rec.rows


def performance_ratio(method_return: float, ideal_return: float) -> float | None:
    """Method over ideal, as a cost ratio when returns are negative (1.0 = parity, larger is better)."""
    if ideal_return == 0:
        return None
    if ideal_return > 0:
        return method_return / ideal_return
    if method_return >= 0:
        return float("inf")
    return ideal_return / method_return


def evaluate_multi(student: StudentAgent, specs, episodes: int, seed: int,
                   teacher_returns: dict[int, float]) -> dict[int, tuple[float, float | None]]:
    out = {}
    for s in specs:
        ret = float(rollout_returns(student.policy(s), s, episodes, seed).mean())
        out[s.task_id] = (ret, performance_ratio(ret, teacher_returns[s.task_id]))
    return out

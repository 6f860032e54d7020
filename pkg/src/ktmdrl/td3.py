"""Single-task TD3: trains the per-task teachers and collects their offline experience."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numcore as nc
from .envs import TaskSpec, make_env
from .numcore import AdamState, ContractError, Mlp
from .replay import Batch, SubBuffer

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (400, 400)


@dataclass
class Hyperparams:
    gamma: float = 0.99
    tau: float = 0.005
    explore_sigma: float = 0.1
    target_noise_sigma: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    batch_size: int = 256
    lr: float = 3e-4
    alpha: float = 1.0
    beta: float = 1.0
    t_off: int = 20_000
    t_on: int = 30_000

    def __post_init__(self):
        self.validate()

    def validate(self) -> Hyperparams:
        checks = {
            "gamma": 0.0 < self.gamma <= 1.0,
            "tau": 0.0 < self.tau <= 1.0,
            "explore_sigma": self.explore_sigma >= 0.0,
            "target_noise_sigma": self.target_noise_sigma >= 0.0,
            "noise_clip": self.noise_clip >= 0.0,
            "policy_delay": int(self.policy_delay) == self.policy_delay and self.policy_delay >= 1,
            "batch_size": int(self.batch_size) == self.batch_size and self.batch_size >= 1,
            "lr": self.lr > 0.0,
            "alpha": self.alpha >= 0.0,
            "beta": self.beta >= 0.0,
            "t_off": self.t_off >= 0,
            "t_on": self.t_on >= 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ContractError(f"hyperparameter out of range: {', '.join(f'{k}={getattr(self, k)}' for k in bad)}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Hyperparams:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(eq=False)
class Triple:
    """Actor plus twin critics."""

    actor: Mlp
    critic1: Mlp
    critic2: Mlp

    def nets(self) -> tuple[Mlp, Mlp, Mlp]:
        return self.actor, self.critic1, self.critic2

    def copy(self) -> Triple:
        return Triple(self.actor.copy(), self.critic1.copy(), self.critic2.copy())

    @property
    def state_dim(self) -> int:
        return self.actor.n_in

    @property
    def action_dim(self) -> int:
        return self.actor.n_out

    @property
    def bound(self) -> float:
        return self.actor.bound


def make_triple(state_dim: int, action_dim: int, bound: float, rng, hidden=DEFAULT_HIDDEN) -> Triple:
    hidden = tuple(hidden)
    return Triple(
        nc.init_mlp((state_dim, *hidden, action_dim), rng, nc.TANH, bound),
        nc.init_mlp((state_dim + action_dim, *hidden, 1), rng),
        nc.init_mlp((state_dim + action_dim, *hidden, 1), rng),
    )


@dataclass
class Optimizers:
    actor: AdamState
    critic1: AdamState
    critic2: AdamState

    @classmethod
    def for_triple(cls, triple: Triple, lr: float) -> Optimizers:
        return cls(*(AdamState.for_params(n, lr) for n in triple.nets()))


def select_action(triple: Triple, state, sigma: float, rng) -> np.ndarray:
    a = nc.forward(triple.actor, state)
    if sigma > 0:
        a = a + nc.gaussian(rng, sigma, a.shape)
    return np.clip(a, -triple.bound, triple.bound)


def critic_values(triple_or_critics, states, actions):
    """(Q1, Q2) on a batch as flat vectors."""
    t = triple_or_critics
    x = np.concatenate([states, actions], axis=-1)
    return nc.forward(t.critic1, x)[..., 0], nc.forward(t.critic2, x)[..., 0]


def regress_critics(triple: Triple, opt: Optimizers, x: np.ndarray, y1: np.ndarray, y2: np.ndarray) -> float:
    """One Adam step per critic on mean((Q_j(x) - y_j)^2); returns the summed loss."""
    n = len(x)
    loss = 0.0
    for net, state, y in ((triple.critic1, opt.critic1, y1), (triple.critic2, opt.critic2, y2)):
        q, cache = nc.forward_cached(net, x)
        diff = q[:, 0] - y
        loss += float(diff @ diff) / n
        grad, _ = nc.backward(net, x, (2.0 / n) * diff[:, None], cache)
        nc.adam_step(state, net, grad)
    return loss


def action_gradient(critic: Mlp, states, actions) -> np.ndarray:
    """d Q(s, a) / d a for every row of the batch."""
    x = np.concatenate([states, actions], axis=-1)
    _, cache = nc.forward_cached(critic, x)
    _, gx = nc.backward(critic, x, np.ones((len(x), 1)), cache, param_grads=False)
    return gx[:, states.shape[-1]:]


def td3_target(targets: Triple, batch: Batch, hp: Hyperparams, rng) -> np.ndarray:
    """y = r + gamma (1 - done) min_j Q'_j(s', clip(pi'(s') + clipped noise))."""
    na = nc.forward(targets.actor, batch.next_states)
    noise = np.clip(nc.gaussian(rng, hp.target_noise_sigma, na.shape), -hp.noise_clip, hp.noise_clip)
    na = np.clip(na + noise, -targets.bound, targets.bound)
    q1, q2 = critic_values(targets, batch.next_states, na)
    return batch.rewards + hp.gamma * (1.0 - batch.dones) * np.minimum(q1, q2)


def td3_critic_update(triple: Triple, targets: Triple, batch: Batch, hp: Hyperparams, opt: Optimizers, rng) -> float:
    if len(batch) == 0:
        raise ContractError("empty batch")
    y = td3_target(targets, batch, hp, rng)
    x = np.concatenate([batch.states, batch.actions], axis=1)
    return regress_critics(triple, opt, x, y, y)


def actor_objective_grad(triple: Triple, states) -> tuple[Mlp, float]:
    """Gradient of -(1/N) sum Q1(s, pi(s)) w.r.t. the actor parameters, and the objective."""
    n = len(states)
    a, cache = nc.forward_cached(triple.actor, states)
    x = np.concatenate([states, a], axis=1)
    q, qc = nc.forward_cached(triple.critic1, x)
    _, gx = nc.backward(triple.critic1, x, np.full((n, 1), -1.0 / n), qc, param_grads=False)
    grad, _ = nc.backward(triple.actor, states, gx[:, states.shape[1]:], cache)
    return grad, float(q.mean())


def td3_actor_update(triple: Triple, batch: Batch, hp: Hyperparams, opt: Optimizers) -> float:
    """Ascent on mean Q1(s, pi(s)); returns the objective before the step."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    grad, obj = actor_objective_grad(triple, batch.states)
    nc.adam_step(opt.actor, triple.actor, grad)
    return obj


def update_targets(targets: Triple, online: Triple, tau: float) -> None:
    for t, o in zip(targets.nets(), online.nets()):
        nc.polyak_update(t, o, tau)


def episode_seed(seed: int, episode: int) -> int:
    return nc.derive_seed(seed, episode)


def rollout_returns(policy, spec: TaskSpec, episodes: int, seed: int) -> np.ndarray:
    """Undiscounted returns of ``episodes`` deterministic episodes run in lockstep.

    ``policy`` maps a (episodes, state_dim) array to (episodes, action_dim).
    """
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    envs = [make_env(spec) for _ in range(episodes)]
    obs = np.stack([e.reset(episode_seed(seed, i)) for i, e in enumerate(envs)])
    returns = np.zeros(episodes)
    live = np.ones(episodes, dtype=bool)
    while live.any():
        acts = policy(obs)
        for i, env in enumerate(envs):
            if not live[i]:
                continue
            res = env.step(acts[i])
            returns[i] += res.reward
            obs[i] = res.next_state
            live[i] = not res.done
    return returns


def evaluate(triple: Triple, task, episodes: int = 10, seed: int = 0) -> float:
    """Mean undiscounted return of the noiseless policy."""
    spec = make_env(task).spec
    return float(rollout_returns(lambda s: nc.forward(triple.actor, s), spec, episodes, seed).mean())


@dataclass
class TeacherConfig:
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    warmup: int = 1000
    eval_interval: int = 1000
    eval_episodes: int = 10
    eval_seed: int = 10_007
    buffer_capacity: int = 1_000_000


@dataclass
class TeacherResult:
    triple: Triple
    targets: Triple
    opt: Optimizers
    metrics: list[dict] = field(default_factory=list)
    best_return: float = float("-inf")
    best_step: int = 0
    counters: dict = field(default_factory=dict)
    buffer: SubBuffer | None = None


def train_teacher(task, hp: Hyperparams, total_steps: int, seed: int, cfg: TeacherConfig | None = None) -> TeacherResult:
    """Standard TD3 loop on one task.

    The first ``cfg.warmup`` steps use uniform random actions and no updates.
    After that every step makes one critic update; actor and target updates
    happen on steps with ``t % policy_delay == 0``.  The policy is evaluated
    every ``cfg.eval_interval`` steps and the best-scoring snapshot is returned
    (its score is the task's max average return).
    """
    cfg = cfg or TeacherConfig()
    env = make_env(task)
    spec = env.spec
    rng = nc.make_rng(nc.derive_seed(seed, spec.task_id, 1))
    triple = make_triple(spec.state_dim, spec.action_dim, spec.action_bound, rng, cfg.hidden)
    targets = triple.copy()
    opt = Optimizers.for_triple(triple, hp.lr)
    res = TeacherResult(triple, targets, opt)
    counters = res.counters
    counters.update(critic_updates=0, actor_updates=0, target_updates=0)
    if total_steps <= 0:
        return res
    buf = SubBuffer(spec, cfg.buffer_capacity)
    episode = 0
    obs = env.reset(episode_seed(seed, episode))
    best = None
    closs, aobj = [], []
    t0 = time.perf_counter()
    for t in range(1, total_steps + 1):
        if t <= cfg.warmup:
            action = rng.uniform(-spec.action_bound, spec.action_bound, spec.action_dim)
        else:
            action = select_action(triple, obs, hp.explore_sigma, rng)
        step = env.step(action)
        buf.push(obs, np.clip(action, -spec.action_bound, spec.action_bound), step.reward, step.next_state, step.terminated)
        obs = step.next_state
        if step.done:
            episode += 1
            obs = env.reset(episode_seed(seed, episode))
        if t > cfg.warmup:
            batch = buf.sample(hp.batch_size, rng)
            closs.append(td3_critic_update(triple, targets, batch, hp, opt, rng))
            counters["critic_updates"] += 1
            if t % hp.policy_delay == 0:
                aobj.append(td3_actor_update(triple, batch, hp, opt))
                update_targets(targets, triple, hp.tau)
                counters["actor_updates"] += 1
                counters["target_updates"] += 1
        if t % cfg.eval_interval == 0 or t == total_steps:
            ret = evaluate(triple, spec, cfg.eval_episodes, cfg.eval_seed)
            res.metrics.append(dict(
                stage="teacher", epoch=t, task=spec.name, mean_return=ret,
                critic_loss=float(np.mean(closs)) if closs else float("nan"),
                actor_objective=float(np.mean(aobj)) if aobj else float("nan"),
                wall_ms=int((time.perf_counter() - t0) * 1000),
            ))
            closs, aobj = [], []
            log.debug("%s step %d return %.2f", spec.name, t, ret)
            if ret > res.best_return:
                res.best_return, res.best_step = ret, t
                best = (triple.copy(), targets.copy())
    res.triple, res.targets = best
    res.buffer = buf
    return res


def collect_offline(triple: Triple, task, steps: int, sigma: float = 0.1, seed: int = 0,
                    capacity: int = 1_000_000) -> SubBuffer:
    """Roll out a (trained) policy with Gaussian exploration noise into a fresh sub-buffer."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    env = make_env(task)
    spec = env.spec
    rng = nc.make_rng(nc.derive_seed(seed, spec.task_id, 2))
    buf = SubBuffer(spec, max(capacity, steps))
    episode = 0
    obs = env.reset(nc.derive_seed(seed, spec.task_id, 3, episode))
    for _ in range(steps):
        action = select_action(triple, obs, sigma, rng)
        step = env.step(action)
        buf.push(obs, action, step.reward, step.next_state, step.terminated)
        obs = step.next_state
        if step.done:
            episode += 1
            obs = env.reset(nc.derive_seed(seed, spec.task_id, 3, episode))
    return buf

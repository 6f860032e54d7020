"""Hierarchical experience replay: one bounded FIFO sub-buffer per task."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import TaskSpec
from .numcore import ContractError

DEFAULT_CAPACITY = 1_000_000

BUFFER_MAGIC = b"KTMB"
BUFFER_VERSION = 1
# magic, version, task_id, state_dim, action_dim, count
_HEADER = struct.Struct("<4sIIIIQ")


class EmptyBufferError(RuntimeError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    """Column-stacked transitions of one task, in native dimensions."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.rewards)

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[i], self.actions[i], float(self.rewards[i]), self.next_states[i], bool(self.dones[i]))
            for i in range(len(self))
        ]


class SubBuffer:
    """Ring buffer for a single task. Storage grows on demand up to ``capacity``."""

    def __init__(self, spec: TaskSpec, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.spec = spec
        self.capacity = int(capacity)
        self.inserted = 0
        self.sampled = 0  # number of sample() calls, for cadence checks
        self._alloc(min(self.capacity, 1024))

    def _alloc(self, n):
        sd, ad = self.spec.state_dim, self.spec.action_dim
        old = getattr(self, "_s", None)
        s, a = np.zeros((n, sd)), np.zeros((n, ad))
        r, s2, d = np.zeros(n), np.zeros((n, sd)), np.zeros(n, dtype=bool)
        if old is not None:
            k = len(self._r)
            s[:k], a[:k], r[:k], s2[:k], d[:k] = self._s, self._a, self._r, self._s2, self._d
        self._s, self._a, self._r, self._s2, self._d = s, a, r, s2, d

    def __len__(self):
        return min(self.inserted, self.capacity)

    def push(self, state, action, reward, next_state, done) -> None:
        sd, ad = self.spec.state_dim, self.spec.action_dim
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        next_state = np.asarray(next_state, dtype=np.float64)
        if state.shape != (sd,) or next_state.shape != (sd,) or action.shape != (ad,):
            raise ContractError(
                f"{self.spec.name}: transition shapes {state.shape}/{action.shape}/{next_state.shape} "
                f"do not match state_dim={sd}, action_dim={ad}"
            )
        if not (np.isfinite(state).all() and np.isfinite(action).all() and np.isfinite(next_state).all()
                and np.isfinite(reward)):
            raise ContractError("non-finite transition")
        i = self.inserted % self.capacity
        if i >= len(self._r):
            self._alloc(min(self.capacity, max(1024, 2 * len(self._r))))
        self._s[i], self._a[i], self._r[i], self._s2[i], self._d[i] = state, action, reward, next_state, done
        self.inserted += 1

    def _order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        n = len(self)
        start = self.inserted % self.capacity if self.inserted > self.capacity else 0
        return (start + np.arange(n)) % self.capacity

    def take(self, idx) -> Batch:
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx])

    def contents(self) -> Batch:
        """All retained transitions, oldest first."""
        return self.take(self._order())

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        """``n`` transitions drawn uniformly with replacement."""
        if n < 1:
            raise ContractError("sample size must be >= 1")
        if len(self) == 0:
            raise EmptyBufferError(f"sub-buffer for {self.spec.name} is empty; warm it up first")
        self.sampled += 1
        return self.take(rng.integers(0, len(self), n))


class HierarchicalReplay:
    """K independent sub-buffers indexed by task_id."""

    def __init__(self, specs: list[TaskSpec], capacity: int = DEFAULT_CAPACITY):
        self.specs = list(specs)
        self.buffers = {s.task_id: SubBuffer(s, capacity) for s in self.specs}

    def __getitem__(self, task_id: int) -> SubBuffer:
        try:
            return self.buffers[task_id]
        except KeyError:
            raise ContractError(f"no sub-buffer for task {task_id}") from None

    def push(self, task_id: int, transition: Transition) -> None:
        t = transition
        self[task_id].push(t.state, t.action, t.reward, t.next_state, t.done)

    def sample(self, task_id: int, n: int, rng: np.random.Generator) -> Batch:
        return self[task_id].sample(n, rng)

    def sizes(self) -> dict[int, int]:
        return {k: len(b) for k, b in self.buffers.items()}


def save_buffer(path, buf: SubBuffer) -> None:
    """Write a sub-buffer as a KTMB file (records oldest first)."""
    data = buf.contents()
    sd, ad = buf.spec.state_dim, buf.spec.action_dim
    n = len(data)
    rec = np.dtype([("s", "<f8", (sd,)), ("a", "<f8", (ad,)), ("r", "<f8"), ("s2", "<f8", (sd,)), ("d", "u1")])
    arr = np.zeros(n, dtype=rec)
    arr["s"], arr["a"], arr["r"], arr["s2"], arr["d"] = data.states, data.actions, data.rewards, data.next_states, data.dones
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(BUFFER_MAGIC, BUFFER_VERSION, buf.spec.task_id, sd, ad, n))
        f.write(arr.tobytes())
    tmp.replace(path)


def load_buffer(path, spec: TaskSpec, capacity: int = DEFAULT_CAPACITY) -> SubBuffer:
    from .io import FormatError, TruncatedError, VersionError

    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: file shorter than header")
    magic, version, task_id, sd, ad, n = _HEADER.unpack_from(raw)
    if magic != BUFFER_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != BUFFER_VERSION:
        raise VersionError(f"{path}: unsupported buffer version {version}")
    if (task_id, sd, ad) != (spec.task_id, spec.state_dim, spec.action_dim):
        raise FormatError(f"{path}: buffer is for task {task_id} ({sd}/{ad}), expected {spec.name}")
    rec = np.dtype([("s", "<f8", (sd,)), ("a", "<f8", (ad,)), ("r", "<f8"), ("s2", "<f8", (sd,)), ("d", "u1")])
    body = raw[_HEADER.size:]
    if len(body) != n * rec.itemsize:
        raise TruncatedError(f"{path}: expected {n} records, payload holds {len(body) / rec.itemsize:g}")
    arr = np.frombuffer(body, dtype=rec)
    buf = SubBuffer(spec, max(capacity, n))
    buf._s, buf._a, buf._r = arr["s"].copy(), arr["a"].copy(), arr["r"].copy()
    buf._s2, buf._d = arr["s2"].copy(), arr["d"].astype(bool)
    buf.inserted = n
    return buf

"""Checkpoints (KTMC), metrics CSV and the ``key = value`` config grammar.

Checkpoint layout::

    b"KTMC" | u32 version | u64 header length | UTF-8 JSON header | payload

The payload is the concatenation of little-endian float64 arrays listed, in
order, by the header's ``arrays`` table (name and length).  The header also
records a sha256 of the payload.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .envs import fingerprint as suite_fingerprint
from .envs import task_by_key
from .numcore import AdamState, ContractError, Mlp
from .td3 import Hyperparams, Optimizers, Triple

CHECKPOINT_MAGIC = b"KTMC"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ArtifactError(Exception):
    """Base class for every load/parse failure."""


class FormatError(ArtifactError):
    pass


class VersionError(ArtifactError):
    pass


class TruncatedError(ArtifactError):
    pass


class FingerprintError(ArtifactError):
    pass


class RoleError(ArtifactError):
    pass


class ConfigError(ArtifactError):
    pass


@dataclass(eq=False)
class Checkpoint:
    role: str  # "teacher" or "student"
    online: Triple
    target: Triple
    hyperparams: Hyperparams
    adam: Optimizers | None = None
    task_id: int | None = None
    fingerprint: str = field(default_factory=suite_fingerprint)
    provenance: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


_NETS = ("actor", "critic1", "critic2")


def _net_meta(net: Mlp) -> dict:
    return {"sizes": list(net.sizes), "output": net.output, "bound": net.bound}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays, table = [], []

    def add(name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        arrays.append(arr)
        table.append({"name": name, "len": int(arr.size)})

    nets = {}
    for group, triple in (("online", ckpt.online), ("target", ckpt.target)):
        for name, net in zip(_NETS, triple.nets()):
            nets[f"{group}.{name}"] = _net_meta(net)
            add(f"{group}.{name}", net.flat)
    adam = None
    if ckpt.adam is not None:
        adam = {}
        for name in _NETS:
            st: AdamState = getattr(ckpt.adam, name)
            adam[name] = {"step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
            add(f"adam.{name}.m", st.m)
            add(f"adam.{name}.v", st.v)
    payload = b"".join(a.tobytes() for a in arrays)
    header = {
        "role": ckpt.role,
        "task_id": ckpt.task_id,
        "fingerprint": ckpt.fingerprint,
        "hyperparams": ckpt.hyperparams.to_dict(),
        "nets": nets,
        "adam": adam,
        "provenance": ckpt.provenance,
        "arrays": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(CHECKPOINT_MAGIC, ckpt.version, len(hbytes)))
        f.write(hbytes)
        f.write(payload)
    tmp.replace(path)


def load_checkpoint(path, role: str | None = None, fingerprint: str | None = None) -> Checkpoint:
    """Load and validate a checkpoint.

    ``role`` and ``fingerprint`` (default: the current suite's) are checked
    before anything is returned.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise TruncatedError(f"{path}: shorter than the checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < _PREFIX.size + hlen:
        raise TruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    payload = raw[_PREFIX.size + hlen:]
    expected = 8 * sum(a["len"] for a in header["arrays"])
    if len(payload) < expected:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise FormatError(f"{path}: payload checksum mismatch")
    want_fp = suite_fingerprint() if fingerprint is None else fingerprint
    if header["fingerprint"] != want_fp:
        raise FingerprintError(f"{path}: checkpoint was written for a different task suite")
    if role is not None and header["role"] != role:
        raise RoleError(f"{path}: expected a {role} checkpoint, found {header['role']}")

    arrays, off = {}, 0
    for a in header["arrays"]:
        n = a["len"]
        arrays[a["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n

    def triple(group):
        nets = []
        for name in _NETS:
            meta = header["nets"][f"{group}.{name}"]
            nets.append(Mlp(tuple(meta["sizes"]), meta["output"], meta["bound"], arrays[f"{group}.{name}"]))
        return Triple(*nets)

    adam = None
    if header["adam"] is not None:
        states = []
        for name in _NETS:
            m = header["adam"][name]
            states.append(AdamState(arrays[f"adam.{name}.m"], arrays[f"adam.{name}.v"], lr=m["lr"],
                                    beta1=m["beta1"], beta2=m["beta2"], eps=m["eps"], step=m["step"]))
        adam = Optimizers(*states)
    return Checkpoint(
        role=header["role"], online=triple("online"), target=triple("target"),
        hyperparams=Hyperparams.from_dict(header["hyperparams"]), adam=adam, task_id=header["task_id"],
        fingerprint=header["fingerprint"], provenance=header["provenance"], version=version,
    )


METRIC_FIELDS = ("stage", "epoch", "task", "mean_return", "critic_loss", "actor_objective")
TIMING_FIELDS = ("stage", "epoch", "task", "wall_ms")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _append_row(path, names, row) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    line = ",".join(_fmt(row[k]) for k in names) + "\n"
    with open(path, "a", encoding="utf-8", newline="") as f:
        if new:
            f.write(",".join(names) + "\n")
        f.write(line)
        f.flush()


def append_metrics(path, row: dict) -> None:
    """Append one metrics row (header on first write).

    Wall-clock time is not part of this file so reruns are byte-identical;
    see ``append_timing``.
    """
    _append_row(path, METRIC_FIELDS, row)


def append_timing(path, row: dict) -> None:
    _append_row(path, TIMING_FIELDS, row)


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in ("mean_return", "critic_loss", "actor_objective"):
            r[k] = float(r[k])
    return rows


# Config grammar: one ``key = value`` per line, ``#`` starts a comment, no sections.
_HP_KEYS = {f.name for f in fields(Hyperparams)}
_ALIASES = {"batch": "batch_size", "n": "batch_size", "d": "policy_delay", "c": "noise_clip",
            "sigma": "explore_sigma", "learning_rate": "lr"}


def _to_bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_int(s: str) -> int:
    f = float(s)
    if not f.is_integer():
        raise ValueError(f"not an integer: {s!r}")
    return int(f)


def _to_widths(s: str) -> tuple[int, ...]:
    widths = tuple(_to_int(p) for p in s.replace(" ", "").split(",") if p)
    if not widths or min(widths) < 1:
        raise ValueError(f"bad layer widths {s!r}")
    return widths


_PLAN_TYPES = {
    "hidden": _to_widths,
    "student_hidden": _to_widths,
    "warmup": _to_int,
    "online_warmup": _to_int,
    "offline_buffer_size": _to_int,
    "collect_sigma": float,
    "buffer_capacity": _to_int,
    "eval_interval": _to_int,
    "student_eval_interval": _to_int,
    "eval_episodes": _to_int,
    "eval_seed": _to_int,
    "task_onehot": _to_bool,
    "seed": _to_int,
    "mode": str,
    "tasks": lambda s: tuple(t.strip().lower() for t in s.split(",") if t.strip()),
    "workers": _to_int,
}
_PLAN_MIN = {"warmup": 0, "online_warmup": 0, "offline_buffer_size": 1, "collect_sigma": 0.0,
             "buffer_capacity": 1, "eval_interval": 1, "student_eval_interval": 1, "eval_episodes": 1,
             "eval_seed": 0, "seed": 0, "workers": 1}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    from .ktm import MODES

    cfg = RunConfig()
    hp_values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: syntax error, expected 'key = value'")
        key, value = (p.strip() for p in body.split("=", 1))
        key = _ALIASES.get(key.lower(), key.lower())
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: syntax error, empty key or value")
        try:
            if key in _HP_KEYS:
                ftype = {f.name: f.type for f in fields(Hyperparams)}[key]
                hp_values[key] = _to_int(value) if ftype in ("int", int) else float(value)
            elif key.startswith("teacher_steps"):
                n = _to_int(value)
                if n < 0:
                    raise ConfigError(f"{source}:{lineno}: {key} out of range ({n})")
                if key == "teacher_steps":
                    cfg.teacher_steps = {k: n for k in cfg.teacher_steps}
                elif key.startswith("teacher_steps."):
                    cfg.teacher_steps[task_by_key(key.split(".", 1)[1]).key] = n
                else:
                    raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            elif key in _PLAN_TYPES:
                v = _PLAN_TYPES[key](value)
                if key in _PLAN_MIN and v < _PLAN_MIN[key]:
                    raise ConfigError(f"{source}:{lineno}: {key} out of range ({v})")
                if key == "mode" and v not in MODES:
                    raise ConfigError(f"{source}:{lineno}: mode must be one of {', '.join(MODES)}")
                if key == "tasks":
                    for t in v:
                        task_by_key(t)
                setattr(cfg, key, v)
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except (ValueError, ContractError) as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from None
    try:
        cfg.hp = Hyperparams(**hp_values)
    except ContractError as e:
        raise ConfigError(f"{source}: {e}") from None
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, str(path))


def format_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the config grammar (parse_config round-trips it)."""
    lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in cfg.hp.to_dict().items()]
    for k, v in cfg.plan_dict().items():
        if v is None:
            continue
        if k == "teacher_steps":
            lines += [f"teacher_steps.{t} = {n}" for t, n in v.items()]
        elif isinstance(v, list):
            lines.append(f"{k} = {','.join(str(x) for x in v)}")
        elif isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        else:
            lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})


def is_nan(x) -> bool:
    return isinstance(x, float) and math.isnan(x)

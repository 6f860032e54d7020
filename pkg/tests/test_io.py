import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ktmdrl import numcore as nc
from ktmdrl.config import RunConfig
from ktmdrl.io import (
    Checkpoint,
    ConfigError,
    FingerprintError,
    FormatError,
    RoleError,
    TruncatedError,
    VersionError,
    append_metrics,
    append_timing,
    format_config,
    load_checkpoint,
    parse_config,
    parse_config_text,
    read_metrics,
    save_checkpoint,
)
from ktmdrl.ktm import StudentAgent
from ktmdrl.envs import suite
from ktmdrl.td3 import Hyperparams


def student_ckpt(seed=0):
    stu = StudentAgent(suite(), Hyperparams(), hidden=(6, 5), seed=seed)
    rng = nc.make_rng(seed)
    for st_ in stu.opt.actor, stu.opt.critic1, stu.opt.critic2:
        st_.m[:] = rng.normal(size=st_.m.shape)
        st_.v[:] = rng.random(st_.v.shape)
        st_.step = 17
    stu.targets.critic2.flat[:] = rng.normal(size=stu.targets.critic2.flat.shape)
    return Checkpoint("student", stu.triple, stu.targets, stu.hp, stu.opt,
                      provenance={"stage": "offline", "seed": seed})


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        ck = student_ckpt()
        save_checkpoint(tmp_path / "s.ktmc", ck)
        back = load_checkpoint(tmp_path / "s.ktmc", role="student")
        for a, b in zip(ck.online.nets() + ck.target.nets(), back.online.nets() + back.target.nets()):
            assert a.flat.tobytes() == b.flat.tobytes()
            assert (a.sizes, a.output, a.bound) == (b.sizes, b.output, b.bound)
        for name in ("actor", "critic1", "critic2"):
            x, y = getattr(ck.adam, name), getattr(back.adam, name)
            assert x.m.tobytes() == y.m.tobytes() and x.v.tobytes() == y.v.tobytes() and x.step == y.step
        assert back.hyperparams == ck.hyperparams and back.provenance == ck.provenance

    def test_resave_identical_bytes(self, tmp_path):
        save_checkpoint(tmp_path / "a", student_ckpt())
        save_checkpoint(tmp_path / "b", load_checkpoint(tmp_path / "a"))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_corrupt_magic(self, tmp_path):
        p = tmp_path / "s.ktmc"
        save_checkpoint(p, student_ckpt())
        raw = bytearray(p.read_bytes())
        raw[0:4] = b"XXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(p)

    def test_version(self, tmp_path):
        p = tmp_path / "s.ktmc"
        save_checkpoint(p, student_ckpt())
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "s.ktmc"
        save_checkpoint(p, student_ckpt())
        raw = p.read_bytes()
        for cut in (3, 20, len(raw) - 8):
            p.write_bytes(raw[:cut])
            with pytest.raises(TruncatedError):
                load_checkpoint(p)

    def test_flipped_payload_byte(self, tmp_path):
        p = tmp_path / "s.ktmc"
        save_checkpoint(p, student_ckpt())
        raw = bytearray(p.read_bytes())
        raw[-5] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(p)

    def test_role_and_fingerprint(self, tmp_path):
        ck = student_ckpt()
        ck.role = "teacher"
        save_checkpoint(tmp_path / "t", ck)
        with pytest.raises(RoleError):
            load_checkpoint(tmp_path / "t", role="student")
        ck.fingerprint = "0" * 64
        save_checkpoint(tmp_path / "f", ck)
        with pytest.raises(FingerprintError):
            load_checkpoint(tmp_path / "f")


class TestMetrics:
    ROW = dict(stage="online", epoch=3, task="Pendulum", mean_return=-0.1, critic_loss=1 / 3, actor_objective=math.nan)

    def test_header_once(self, tmp_path):
        p = tmp_path / "m.csv"
        append_metrics(p, self.ROW)
        append_metrics(p, {**self.ROW, "epoch": 4})
        lines = p.read_text().splitlines()
        assert len(lines) == 3 and lines[0].startswith("stage,epoch,task")
        assert "wall_ms" not in lines[0]

    @settings(max_examples=100, deadline=None)
    @given(v=st.floats(allow_nan=False, allow_infinity=False, width=64))
    def test_exact_float_round_trip(self, tmp_path_factory, v):
        p = tmp_path_factory.mktemp("m") / "m.csv"
        append_metrics(p, {**self.ROW, "mean_return": v, "critic_loss": v})
        row = read_metrics(p)[0]
        assert row["mean_return"] == v and row["critic_loss"] == v
        assert math.isnan(row["actor_objective"])

    def test_timing_separate(self, tmp_path):
        append_timing(tmp_path / "t.csv", dict(stage="offline", epoch=1, task="Reacher2", wall_ms=12))
        assert (tmp_path / "t.csv").read_text() == "stage,epoch,task,wall_ms\noffline,1,Reacher2,12\n"

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            append_metrics(tmp_path / "missing" / "m.csv", self.ROW)


class TestConfig:
    def test_empty_file_defaults(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("")
        hp = parse_config(p).hp
        assert (hp.gamma, hp.tau, hp.explore_sigma, hp.noise_clip, hp.policy_delay, hp.batch_size, hp.lr,
                hp.alpha, hp.beta) == (0.99, 0.005, 0.1, 0.5, 2, 256, 3e-4, 1.0, 1.0)

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigError, match="gamma"):
            parse_config_text("gamma = 1.5")

    def test_policy_delay(self):
        assert parse_config_text("policy_delay = 2").hp.policy_delay == 2
        assert parse_config_text("d = 3  # alias").hp.policy_delay == 3

    def test_syntax_error_line_number(self):
        with pytest.raises(ConfigError, match=r":3: syntax"):
            parse_config_text("# c\ngamma = 0.9\nnot a pair\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="frobnicate"):
            parse_config_text("frobnicate = 1")

    def test_plan_keys(self):
        cfg = parse_config_text("hidden = 64,64\nteacher_steps = 500\nteacher_steps.pendulum = 700\n"
                                "tasks = pendulum, reacher2\ntask_onehot = true\nmode = no-her\n")
        assert cfg.hidden == (64, 64) and cfg.task_onehot and cfg.mode == "no-her"
        assert cfg.teacher_steps["pendulum"] == 700 and cfg.teacher_steps["reacher2"] == 500
        assert [s.key for s in cfg.task_specs()] == ["pendulum", "reacher2"]

    @pytest.mark.parametrize("text", ["mode = turbo", "eval_episodes = 0", "tasks = cartpole",
                                      "hidden = 0", "batch_size = 2.5", "teacher_steps = -1"])
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_format_round_trip(self):
        cfg = RunConfig(hidden=(32, 16), collect_sigma=0.25, seed=4)
        cfg.hp.lr = 1e-3
        assert parse_config_text(format_config(cfg)) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "nope.cfg")

import pytest

from ktmdrl.cli import build_parser, main, resolve_config
from ktmdrl.io import read_metrics

TINY = """\
hidden = 16,16
teacher_steps = 300
warmup = 100
eval_interval = 150
student_eval_interval = 10
eval_episodes = 2
offline_buffer_size = 300
online_warmup = 20
batch_size = 32
t_off = 20
t_on = 30
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_pipeline_steps_and_artifacts(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert run("train-teachers", "--config", cfg_path, "--out", out) == 0
    assert len(list((out / "teachers").glob("*.ktmc"))) == 5
    assert run("collect", "--config", cfg_path, "--out", out) == 0
    assert len(list((out / "buffers").glob("*.ktmb"))) == 5
    assert run("transfer", "--config", cfg_path, "--out", out) == 0
    assert run("online", "--config", cfg_path, "--out", out) == 0
    capsys.readouterr()
    assert run("eval", "--config", cfg_path, "--out", out) == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 7  # header, 5 tasks, mean
    rows = (out / "ratios-full.csv").read_text().splitlines()
    assert len(rows) == 6
    metrics = read_metrics(out / "student" / "full" / "online.metrics.csv")
    assert {r["stage"] for r in metrics} == {"online"} and len(metrics) == 15


def test_missing_artifacts_named(tmp_path, cfg_path, capsys):
    assert run("collect", "--config", cfg_path, "--out", tmp_path) == 1
    assert "pendulum.ktmc" in capsys.readouterr().err
    assert run("online", "--config", cfg_path, "--out", tmp_path) == 1
    assert "offline.ktmc" in capsys.readouterr().err


def test_overwrite_guard(tmp_path, cfg_path, capsys):
    args = ("train-teachers", "--config", cfg_path, "--out", tmp_path, "--tasks", "pendulum")
    assert run(*args) == 0
    assert run(*args) == 1
    assert "--overwrite" in capsys.readouterr().err
    assert run(*args, "--overwrite") == 0


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("gamma = 1.5\n")
    assert run("collect", "--config", bad, "--out", tmp_path) == 2
    assert "gamma" in capsys.readouterr().err
    assert run("collect", "--config", tmp_path / "nope.cfg") == 2
    assert run("collect", "--tasks", "cartpole") == 2


def test_flags_win_over_config(cfg_path):
    p = build_parser()
    cfg = resolve_config(p.parse_args(["transfer", "--config", str(cfg_path), "--steps", "7", "--seed", "9",
                                       "--mode", "no-her", "--tasks", "reacher2,pendulum"]))
    assert cfg.hp.t_off == 7 and cfg.hp.t_on == 30 and cfg.seed == 9 and cfg.mode == "no-her"
    assert [s.key for s in cfg.task_specs()] == ["pendulum", "reacher2"]
    cfg = resolve_config(p.parse_args(["train-teachers", "--config", str(cfg_path), "--steps", "50"]))
    assert set(cfg.teacher_steps.values()) == {50}


def test_unknown_mode_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["transfer", "--mode", "warp"])


def test_rerun_identical_metrics(tmp_path, cfg_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert run("run-all", "--config", cfg_path, "--out", out, "--seed", 5, "--tasks", "pendulum,reacher2") == 0
    for rel in ("teachers/pendulum.metrics.csv", "student/full/offline.metrics.csv",
                "student/full/online.metrics.csv", "ratios-full.csv"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()


def test_ablate_writes_matrix(tmp_path, cfg_path):
    out = tmp_path / "run"
    assert run("train-teachers", "--config", cfg_path, "--out", out, "--tasks", "pendulum,pointmass-drag") == 0
    assert run("collect", "--config", cfg_path, "--out", out, "--tasks", "pendulum,pointmass-drag") == 0
    assert run("ablate", "--config", cfg_path, "--out", out, "--tasks", "pendulum,pointmass-drag") == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "mode,Pendulum,PointMass-drag,mean"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["full", "no-offline", "no-online", "online-no-teacher",
                                                      "online-only-teacher", "no-her"]


def test_parallel_workers_match_serial(tmp_path, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train-teachers", "--config", cfg_path, "--out", a, "--tasks", "pendulum,reacher2") == 0
    assert run("train-teachers", "--config", cfg_path, "--out", b, "--tasks", "pendulum,reacher2",
               "--workers", 2) == 0
    for f in ("pendulum.ktmc", "reacher2.ktmc", "reacher2.metrics.csv"):
        assert (a / "teachers" / f).read_bytes() == (b / "teachers" / f).read_bytes()

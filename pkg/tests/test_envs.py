import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ktmdrl.envs import DT, Pendulum, PointMass, Reacher2, fingerprint, make_env, suite, task_by_key, wrap_angle
from ktmdrl.numcore import ContractError


def test_pendulum_reset_distribution():
    env = make_env("pendulum")
    for seed in range(50):
        c, s, om = env.reset(seed)
        th = env.state[0]
        assert -math.pi <= th <= math.pi and -1.0 <= om <= 1.0
        assert c * c + s * s == pytest.approx(1.0, abs=1e-15)


def test_pointmass_reset_distribution():
    env = make_env(1)
    for seed in range(50):
        obs = env.reset(seed)
        assert np.all(np.abs(obs[:2]) <= 1.0)
        assert np.all(obs[2:] == 0.0)


@pytest.mark.parametrize("task", range(5))
def test_reset_deterministic(task):
    a, b = make_env(task), make_env(task)
    np.testing.assert_array_equal(a.reset(123), b.reset(123))


def test_pendulum_upright_equilibrium():
    env = make_env("pendulum")
    env.reset(0)
    env.state = np.array([0.0, 0.0])
    res = env.step([0.0])
    assert res.reward == 0.0
    np.testing.assert_array_equal(res.next_state, [1.0, 0.0, 0.0])


def test_pointmass_statics():
    env = make_env("pointmass-heavy")
    env.reset(0)
    env.state = np.array([0.25, -0.5, 0.0, 0.0])
    res = env.step([0.0, 0.0])
    np.testing.assert_array_equal(res.next_state[:2], [0.25, -0.5])
    assert res.reward == pytest.approx(-math.hypot(0.75, 1.5), abs=1e-15)


def test_pendulum_one_step_hand_calculation():
    env = make_env("pendulum")
    env.reset(0)
    env.state = np.array([math.pi / 2, 0.0])
    res = env.step([2.0])
    # omega' = 0.05 * (1.5 * 10 * sin(pi/2) + 3 * 2) = 1.05 ; theta' = pi/2 + 0.05 * 1.05
    assert env.state[1] == pytest.approx(1.05, abs=1e-14)
    assert env.state[0] == pytest.approx(math.pi / 2 + 0.0525, abs=1e-14)
    assert res.reward == pytest.approx(-((math.pi / 2) ** 2 + 0.001 * 4.0), abs=1e-14)
    np.testing.assert_allclose(res.next_state, [math.cos(math.pi / 2 + 0.0525), math.sin(math.pi / 2 + 0.0525), 1.05])


def test_reacher_one_step_hand_calculation():
    env = make_env("reacher2")
    env.reset(0)
    env.state = np.array([0.0, 0.0, 0.0, 0.0])
    res = env.step([1.0, -0.5])
    dq = np.array([DT * 1.0, DT * -0.5])
    q = DT * dq
    tip = np.array([math.cos(q[0]) + math.cos(q[0] + q[1]), math.sin(q[0]) + math.sin(q[0] + q[1])])
    expected = -np.linalg.norm(tip - [0.5, 1.0]) - 0.01 * 1.25
    assert res.reward == pytest.approx(expected, abs=1e-14)
    np.testing.assert_allclose(res.next_state[4:], [*dq, 0.5, 1.0])


def test_pointmass_dynamics_variants():
    for name, m, c in (("pointmass-light", 0.5, 0.1), ("pointmass-heavy", 2.0, 0.1), ("pointmass-drag", 1.0, 1.0)):
        env = make_env(name)
        env.reset(0)
        env.state = np.array([0.0, 0.0, 0.4, -0.2])
        u = np.array([0.5, 1.0])
        v = np.array([0.4, -0.2]) + DT * (u / m - c * np.array([0.4, -0.2]))
        res = env.step(u)
        np.testing.assert_allclose(res.next_state, np.concatenate([DT * v, v]), rtol=1e-14)


def test_actions_clipped_not_rejected():
    a, b = make_env("pendulum"), make_env("pendulum")
    a.reset(4), b.reset(4)
    assert a.step([50.0]).reward == b.step([2.0]).reward
    np.testing.assert_array_equal(a.state, b.state)


def test_errors():
    env = make_env("reacher2")
    env.reset(0)
    with pytest.raises(ContractError):
        env.step([0.0])
    for _ in range(200):
        res = env.step([0.0, 0.0])
    assert res.done
    with pytest.raises(ContractError):
        env.step([0.0, 0.0])


def test_suite_constants():
    specs = suite()
    assert [s.task_id for s in specs] == [0, 1, 2, 3, 4]
    p = specs[0]
    assert (p.name, p.state_dim, p.action_dim, p.action_bound) == ("Pendulum", 3, 1, 2.0)
    assert max(s.state_dim for s in specs) == 8
    assert max(s.action_dim for s in specs) == 2
    dims = [s.state_dim for s in specs]
    assert len(set(dims)) >= 2 and len(dims) > len(set(dims))
    assert all(s.max_episode_steps == 200 for s in specs)


def test_task_lookup_and_fingerprint():
    assert task_by_key("PointMass-Drag").task_id == 3
    assert task_by_key(4).name == "Reacher2"
    with pytest.raises(ContractError):
        task_by_key("hopper")
    assert fingerprint() == fingerprint(suite())
    assert fingerprint(suite()[:4]) != fingerprint()


def test_wrap_angle():
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.3) == pytest.approx(0.3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_rollout_properties(task, seed):
    """Determinism, finite rewards, position bounds and fixed episode length."""
    def run():
        env = make_env(task)
        rng = np.random.default_rng(seed)
        obs = [env.reset(seed)]
        rewards, dones = [], []
        while not env.done:
            res = env.step(rng.uniform(-3, 3, env.spec.action_dim))
            obs.append(res.next_state)
            rewards.append(res.reward)
            dones.append(res.done)
            if isinstance(env, PointMass):
                assert np.all(np.abs(env.state[:2]) <= 2.0)
        return np.array(obs), np.array(rewards), dones

    o1, r1, d1 = run()
    o2, r2, d2 = run()
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(r1, r2)
    assert d1 == d2 and len(r1) == 200 and d1[-1] and not any(d1[:-1])
    assert np.all(np.isfinite(r1))


def test_env_classes():
    assert isinstance(make_env(0), Pendulum)
    assert isinstance(make_env(4), Reacher2)

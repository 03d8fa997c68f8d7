from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from hypercal.envs import (
    AcrobotParams,
    CartpoleParams,
    ConfigurationError,
    PuddleWorld,
    acrobot_derivs,
    make_env,
)


def _acrobot_rhs(params: AcrobotParams, torque: float):
    """Textbook acrobot equations written out independently of the package."""
    m1, m2 = params.link_mass_1, params.link_mass_2
    l1, lc1, lc2 = params.link_length_1, params.link_com_1, params.link_com_2
    i1, i2, g = params.link_moi_1, params.link_moi_2, params.gravity

    def rhs(_t, y):
        th1, th2, w1, w2 = y
        d1 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * np.cos(th2)) + i1 + i2
        d2 = m2 * (lc2**2 + l1 * lc2 * np.cos(th2)) + i2
        phi2 = m2 * lc2 * g * np.cos(th1 + th2 - np.pi / 2)
        phi1 = (-m2 * l1 * lc2 * w2**2 * np.sin(th2) - 2 * m2 * l1 * lc2 * w2 * w1 * np.sin(th2)
                + (m1 * lc1 + m2 * l1) * g * np.cos(th1 - np.pi / 2) + phi2)
        a2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * w1**2 * np.sin(th2) - phi2) / (m2 * lc2**2 + i2 - d2**2 / d1)
        a1 = -(d2 * a2 + phi1) / d1
        return [w1, w2, a1, a2]

    return rhs


def test_acrobot_matches_high_resolution_integrator():
    params = AcrobotParams(reset_range=0.0)
    env = make_env("acrobot", 0, params)
    env.reset()
    assert np.array_equal(env.raw, np.zeros(4))  # zero-width randomisation: links hang down
    rhs = _acrobot_rhs(params, 1.0)
    for _ in range(40):
        before = env.raw.copy()
        env.step(2)  # torque +1
        ref = solve_ivp(rhs, (0.0, params.dt * params.substeps), before, method="DOP853",
                        rtol=1e-12, atol=1e-12).y[:, -1]
        ref[0] = (ref[0] + np.pi) % (2 * np.pi) - np.pi
        ref[1] = (ref[1] + np.pi) % (2 * np.pi) - np.pi
        ref[2] = np.clip(ref[2], -params.max_vel_1, params.max_vel_1)
        ref[3] = np.clip(ref[3], -params.max_vel_2, params.max_vel_2)
        assert np.max(np.abs(env.raw - ref)) < 1e-6


def test_derivatives_at_rest_vanish():
    p = AcrobotParams()
    packed = np.array([p.link_mass_1, p.link_mass_2, p.link_length_1, p.link_com_1, p.link_com_2,
                       p.link_moi_1, p.link_moi_2, p.gravity])
    assert np.allclose(acrobot_derivs(np.zeros(4), 0.0, packed), 0.0, atol=1e-12)


def test_changed_acrobot_doubles_first_link():
    env = make_env("acrobot-changed", 0)
    assert env.params.link_length_1 == 2.0 and env.params.link_mass_1 == 2.0
    assert env.params.link_length_2 == 1.0 and env.params.link_mass_2 == 1.0
    assert env.spec.action_count == 3


def test_action_counts_and_unknown_env():
    assert make_env("acrobot", 0).spec.action_count == 3
    assert make_env("puddleworld", 0).spec.action_count == 4
    assert make_env("cartpole", 0).spec.action_count == 2
    with pytest.raises(ConfigurationError):
        make_env("mountaincar", 0)


@pytest.mark.parametrize("name", ["acrobot", "puddleworld", "cartpole"])
def test_equal_seeds_give_identical_streams(name):
    a, b = make_env(name, 7), make_env(name, 7)
    assert np.array_equal(a.reset(), b.reset())
    rng = np.random.default_rng(0)
    for act in rng.integers(a.spec.action_count, size=200):
        oa, ob = a.step(int(act)), b.step(int(act))
        assert np.array_equal(oa.next_state, ob.next_state)
        assert oa.reward == ob.reward and oa.terminal == ob.terminal and oa.restarted == ob.restarted
        if oa.terminal:
            assert np.array_equal(a.reset(), b.reset())


def test_acrobot_reward_and_trig_invariant():
    env = make_env("acrobot", 3)
    env.reset()
    rng = np.random.default_rng(1)
    for _ in range(500):
        out = env.step(int(rng.integers(3)))
        s = out.next_state
        assert abs(s[0] ** 2 + s[1] ** 2 - 1) < 1e-9 and abs(s[2] ** 2 + s[3] ** 2 - 1) < 1e-9
        if not out.terminal:
            assert out.reward == -1.0
        else:
            env.reset()


def test_puddle_resets_avoid_goal():
    env = make_env("puddleworld", 11)
    starts = np.array([env.reset() for _ in range(10_000)])
    assert not np.any((starts[:, 0] >= 0.95) & (starts[:, 1] >= 0.95))


@given(st.floats(0, 1), st.floats(0, 1))
def test_puddle_reward_at_most_minus_one(x, y):
    env = PuddleWorld()
    assert env.reward_at((x, y)) <= -1.0


def test_puddle_penalty_grows_with_depth():
    env = PuddleWorld()
    # walk from outside the horizontal puddle straight onto its centre line
    ys = np.linspace(0.6, 0.75, 40)
    rewards = [env.reward_at((0.3, y)) for y in ys]
    depths = [env.puddle_depth((0.3, y)) for y in ys]
    inside = [i for i, d in enumerate(depths) if d > 0]
    assert inside
    for i, j in zip(inside[:-1], inside[1:]):
        assert depths[j] > depths[i] and rewards[j] < rewards[i]


def test_cartpole_resets_and_balanced_reward():
    env = make_env("cartpole", 5)
    for _ in range(1000):
        s = env.reset()
        assert np.all(np.abs(s) <= 0.05)
    out = env.step(1)
    assert out.reward == 0.0 and not out.terminal


def test_cartpole_failure_teleports_without_terminating():
    env = make_env("cartpole", 2)
    env.reset()
    for _ in range(10_000):
        out = env.step(1)
        if out.restarted:
            assert out.reward == -1.0 and not out.terminal
            assert np.all(np.abs(out.next_state) <= 0.05)
            return
    pytest.fail("always pushing right should topple the pole")


def test_cartpole_mirror_symmetry_without_noise():
    params = CartpoleParams(noise_std=0.0)
    left, right = make_env("cartpole", 0, params), make_env("cartpole", 0, params)
    s0 = np.array([0.01, -0.02, 0.03, 0.01])
    left.state, right.state = s0.copy(), -s0
    for _ in range(20):
        a, b = left.step(0), right.step(1)
        if a.restarted or b.restarted:
            break
        assert np.allclose(a.next_state, -b.next_state, atol=1e-12)


def test_invalid_actions_rejected():
    for name, n in (("acrobot", 3), ("puddleworld", 4), ("cartpole", 2)):
        env = make_env(name, 0)
        env.reset()
        with pytest.raises(ValueError):
            env.step(n)

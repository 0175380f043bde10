import itertools
import math

import numpy as np
import pytest

from visreg.envs import (RIGHT, UP, CartPole, CartpoleParams, CartpoleState, EpisodeOver,
                         GridState, GridWorld, cartpole_reset, cartpole_step, grid_reset,
                         grid_step, paint, paint_planes, render, render_labels, stack_frames,
                         write_ppm)
from visreg.randomizers import color


def run_grid(actions, time_limit=10):
    s, total, done = grid_reset(), 0.0, False
    for a in actions:
        s, r, done = grid_step(s, a, time_limit)
        total += r
        if done:
            break
    return s, total, done


def test_goal_step_terminates_with_plus_one():
    s, r, done = grid_step(GridState(2, 1, 3), UP)
    assert (s.x, s.y, r, done) == (2, 2, 1.0, True)


def test_fire_terminates_with_minus_one():
    s, r, done = grid_step(GridState(0, 1, 1), RIGHT)
    assert (s.x, s.y, r, done) == (1, 1, -1.0, True)


def test_invalid_move_costs_one_and_stays():
    s, r, done = grid_step(GridState(2, 0, 0), RIGHT)
    assert (s.x, s.y, s.t, r, done) == (2, 0, 1, -1.0, False)


def test_exactly_two_monotone_paths_avoid_fire():
    # oracle: enumerate every arrangement of two ups and two rights
    paths = set(itertools.permutations([UP, UP, RIGHT, RIGHT]))
    assert len(paths) == 6
    returns = sorted(run_grid(p)[1] for p in paths)
    assert returns == [-1.0] * 4 + [1.0] * 2
    assert run_grid([RIGHT, RIGHT, UP, UP])[1] == 1.0


def test_time_limit_ends_episode():
    # bouncing off the top wall forever
    s, total, done = run_grid([UP, UP] + [UP] * 20)
    assert done and s.t == 10 and total == -8.0
    with pytest.raises(EpisodeOver):
        grid_step(s, UP)


def test_gridworld_env_contract():
    env = GridWorld()
    env.reset()
    np.testing.assert_array_equal(env.payload(), [0.0, 0.0])
    assert len(GridWorld.positions()) == 9
    assert env.spec.r_max == 1.0 and env.spec.gamma == 1.0 and env.spec.time_limit == 10
    with pytest.raises(ValueError):
        env.step(2)


def gym_step(state, a, p=CartpoleParams()):
    """Independent transcription of the canonical cart-pole equations."""
    x, xd, th, thd = state
    f = p.force if a == 1 else -p.force
    mt = p.cart_mass + p.pole_mass
    tmp = (f + p.pole_mass * p.half_length * thd * thd * math.sin(th)) / mt
    tha = (p.gravity * math.sin(th) - math.cos(th) * tmp) / (
        p.half_length * (4 / 3 - p.pole_mass * math.cos(th) ** 2 / mt))
    xa = tmp - p.pole_mass * p.half_length * tha * math.cos(th) / mt
    xd = xd + p.tau * xa
    thd = thd + p.tau * tha
    return x + p.tau * xd, xd, th + p.tau * thd, thd


def test_cartpole_matches_reference_dynamics():
    rng = np.random.default_rng(0)
    s = cartpole_reset(rng)
    ref = (s.x, s.x_dot, s.theta, s.theta_dot)
    for a in rng.integers(0, 2, 30):
        if s.done:
            break
        s, r, _ = cartpole_step(s, int(a))
        ref = gym_step(ref, int(a))
        np.testing.assert_allclose((s.x, s.x_dot, s.theta, s.theta_dot), ref, rtol=1e-12, atol=1e-15)


def test_cartpole_rewards_and_termination():
    s, r, done = cartpole_step(CartpoleState(theta=0.25), 0)
    assert done and r == 0.0
    s, r, done = cartpole_step(CartpoleState(), 1)
    assert not done and r == 1.0
    s, r, done = cartpole_step(CartpoleState(t=199), 1)
    assert done and r == 1.0


def test_reset_draws_within_band_and_forces_actions():
    env = CartPole()
    s = env.reset(np.random.default_rng(3))
    assert s.t == 0 and not s.done
    assert len(env.forced_actions) == 2
    assert env.payload().shape == (3, 32, 32) and env.payload().dtype == np.uint8
    raw = cartpole_reset(np.random.default_rng(5))
    assert all(abs(v) <= 0.05 for v in (raw.x, raw.x_dot, raw.theta, raw.theta_dot))


def test_white_background_render():
    img = render(CartpoleState(), (1.0, 1.0, 1.0))
    labels = render_labels(CartpoleState())
    assert img.shape == (32, 32, 3)
    np.testing.assert_array_equal(img[labels == 0], 1.0)
    assert (labels == 1).any() and (labels == 2).any()


def test_render_is_resolution_independent_in_layout():
    small = render_labels(CartpoleState(x=1.0), 32)
    big = render_labels(CartpoleState(x=1.0), 64)
    # the cart's horizontal centre sits at the same screen fraction
    cs = np.argwhere(small == 1)[:, 1].mean() / 32
    cb = np.argwhere(big == 1)[:, 1].mean() / 64
    assert abs(cs - cb) < 0.02


def test_paint_planes_matches_paint():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, (4, 3, 6, 6)).astype(np.uint8)
    bg = rng.random((4, 3))
    expect = np.moveaxis(paint(labels, bg), -1, -3).reshape(4, 9, 6, 6)
    np.testing.assert_array_equal(paint_planes(labels, bg), expect)


def test_dynamics_ignore_randomizer():
    # paired rollouts under two colours give identical state trajectories
    a_seq = np.random.default_rng(1).integers(0, 2, 40)
    trajs = []
    for bg in [(1, 1, 1), (0.1, 0.7, 0.2)]:
        env = CartPole()
        env.reset(np.random.default_rng(9))
        phi = color(*bg)
        states = []
        for a in a_seq:
            phi(env.payload())
            s, _, done = env.step(int(a))
            states.append(s)
            if done:
                break
        trajs.append(states)
    assert trajs[0] == trajs[1]


def test_stack_frames_seeds_by_repetition():
    f0, f1 = np.zeros((2, 2)), np.ones((2, 2))
    h = stack_frames([], f0, 3)
    assert len(h) == 3 and all(x is f0 for x in h)
    h = stack_frames(h, f1, 3)
    assert h[-1] is f1 and h[0] is f0
    with pytest.raises(ValueError):
        stack_frames(h, np.zeros(3), 3)


def test_ppm_header_and_size(tmp_path):
    img = render(CartpoleState(), (0.5, 0.5, 0.5), 16)
    path = tmp_path / "f.ppm"
    write_ppm(img, path)
    data = path.read_bytes()
    assert data.startswith(b"P6\n16 16\n255\n")
    assert len(data) == len(b"P6\n16 16\n255\n") + 16 * 16 * 3

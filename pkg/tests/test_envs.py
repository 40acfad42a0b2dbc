import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from crpndrm.envs import (
    ChainMDP,
    Trajectory,
    TrajectoryBatch,
    chain_mdp_env,
    cliff_walk_env,
    make_env,
    random_chain_mdp,
    read_traces,
    rollout,
    rollout_batch,
    saddle_mdp_env,
    write_traces,
)
from crpndrm.policies import TabularBoltzmann, make_policy

UP, RIGHT, DOWN, LEFT = range(4)


def walk(env, actions):
    s = np.array([env.start_state])
    shaped, default = [], []
    for a in actions:
        s, r, rd, done = env.step_batch(s, np.array([a]), None)
        shaped.append(r[0])
        default.append(rd[0])
        if done[0]:
            break
    return int(s[0]), shaped, default, bool(done[0])


def test_risky_path_scores_minus_12():
    env = cliff_walk_env()
    s, _, default, done = walk(env, [UP] + [RIGHT] * 11 + [DOWN])
    assert done and s == env.goal_state
    assert sum(default) == -12


def test_safe_path_scores_minus_16():
    env = cliff_walk_env()
    _, _, default, done = walk(env, [UP] * 3 + [RIGHT] * 11 + [DOWN] * 3)
    assert done and sum(default) == -16


def test_cliff_teleports_without_ending():
    env = cliff_walk_env()
    s, shaped, default, done = walk(env, [RIGHT])
    assert s == env.start_state and not done
    assert default == [-100.0]
    # start is at L1 distance 11 from the goal
    assert shaped == [-100.0 - 0.5 * 11]


def test_fall_then_risky_path_is_minus_112_class():
    env = cliff_walk_env()
    _, _, default, done = walk(env, [RIGHT] + [UP] + [RIGHT] * 11 + [DOWN])
    assert done and sum(default) == -112


def test_walls_clip_moves():
    env = cliff_walk_env()
    s, _, default, _ = walk(env, [LEFT, DOWN])
    assert s == env.start_state and default == [-1.0, -1.0]


def test_shaping_uses_next_state_distance():
    env = cliff_walk_env(c=2.0)
    _, shaped, default, _ = walk(env, [UP])
    assert shaped[0] == default[0] - 2.0 * 12


def test_cliff_spec_and_bad_c():
    env = cliff_walk_env()
    assert env.spec.n_states == 48 and env.spec.horizon == 250 and env.spec.gamma == 1.0
    assert env.spec.return_bound == pytest.approx(env.spec.r_max * 250)
    with pytest.raises(ValueError):
        cliff_walk_env(c=-1)


def test_episode_truncates_at_horizon():
    env = cliff_walk_env()
    pol = TabularBoltzmann(48, 4)
    theta = np.zeros((48, 4))
    theta[:, LEFT] = 50.0  # stay pinned against the west wall
    b = rollout_batch(env, pol, theta.ravel(), 3, 0)
    assert_array_equal(b.lengths, [250] * 3)
    assert_allclose(b.episode_returns, -250.0)


def test_rollouts_are_reproducible():
    env = cliff_walk_env()
    pol = TabularBoltzmann(48, 4)
    theta = np.zeros(pol.dim)
    a = rollout_batch(env, pol, theta, 8, 123)
    b = rollout_batch(env, pol, theta, 8, 123)
    assert_array_equal(a.actions, b.actions)
    assert_array_equal(a.returns, b.returns)
    assert not np.array_equal(a.actions, rollout_batch(env, pol, theta, 8, 124).actions)


def test_batch_padding_and_trajectories_agree():
    env = cliff_walk_env()
    pol = TabularBoltzmann(48, 4)
    theta = np.zeros((48, 4))
    theta[:, RIGHT] = 3.0
    theta[36, UP] = 5.0
    b = rollout_batch(env, pol, theta.ravel(), 5, 7)
    for i, tr in enumerate(b):
        assert len(tr) == b.lengths[i]
        assert tr.ret == pytest.approx(b.returns[i])
        assert tr.episode_return == pytest.approx(b.episode_returns[i])
    assert np.all(b.rewards[~b.step_mask] == 0)


def test_trace_roundtrip(tmp_path):
    env = cliff_walk_env()
    pol = TabularBoltzmann(48, 4)
    trajs = list(rollout_batch(env, pol, np.zeros(pol.dim), 3, 1))
    path = tmp_path / "traces.jsonl"
    write_traces(path, trajs)
    back = read_traces(path)
    for a, b in zip(trajs, back):
        assert_array_equal(a.actions, b.actions)
        assert_allclose(a.rewards, b.rewards)
        assert a.ret == b.ret
    rebuilt = TrajectoryBatch.from_trajectories(back)
    assert_allclose(rebuilt.returns, [t.ret for t in trajs])


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.zeros(2), np.zeros(2, dtype=int), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        TrajectoryBatch.from_trajectories([])


def test_cart_pole_terminates_and_discounts():
    env = make_env("cart_pole")
    pol = make_policy("linear_boltzmann", env)
    b = rollout_batch(env, pol, np.zeros(pol.dim), 20, 0)
    assert np.all(b.lengths < 500)
    assert_allclose(b.episode_returns, b.lengths)
    assert_allclose(b.returns, (1 - 0.99 ** b.lengths) / (1 - 0.99))
    assert env.spec.return_bound == pytest.approx((1 - 0.99 ** 500) / 0.01)


def test_chain_validation():
    P = np.full((2, 2, 2), 0.5)
    with pytest.raises(ValueError):
        ChainMDP(P * 2, np.zeros((2, 2)), horizon=2)
    with pytest.raises(ValueError):
        ChainMDP(P, np.zeros((2, 2)), horizon=9)
    with pytest.raises(ValueError):
        chain_mdp_env(3, 2, 2, P, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        make_env("mountain_car")


def test_chain_path_probabilities_sum_to_one():
    env = random_chain_mdp(np.random.default_rng(0), nS=3, nA=2, T=3)
    # environment probabilities only, so a uniform policy weights each path by 1/nA^T
    total = sum(p for _, _, p in env.enumerate_paths()) / 2 ** 3
    assert total == pytest.approx(1.0)


def test_chain_sampling_matches_transition_table():
    env = random_chain_mdp(np.random.default_rng(4), nS=3, nA=2, T=1)
    rng = np.random.default_rng(0)
    n = 200_000
    nxt, *_ = env.step_batch(np.zeros(n, dtype=int), np.ones(n, dtype=int), rng)
    freq = np.bincount(nxt, minlength=3) / n
    assert_allclose(freq, env.P[0, 1], atol=5e-3)


def test_saddle_rewards_pairs_of_matching_actions():
    env = saddle_mdp_env()
    pol = make_policy("linear_boltzmann", env)
    assert pol.dim == 4
    for a0 in range(2):
        for a1 in range(2):
            tr = env.trajectory([0, 1 + a0, 1 + a0], [a0, a1])
            assert tr.ret == float(a0 == a1)
    assert rollout(env, pol, np.zeros(4), 0).actions.shape == (2,)

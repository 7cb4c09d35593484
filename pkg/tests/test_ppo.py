import csv

import numpy as np
import pytest
from scipy.stats import norm as normal

from app.core.controller import Environment, Trajectory
from app.core.errors import ConfigError, ParseError
from app.core.fixtures import PointGoalEnv, toy_task
from app.core.ppo import (
    GridSampler, PolicyBundle, RunningNorm, build_batch, compute_gae, gaussian_logp, optimize_generalized, ppo_optimize,
    warm_start, write_training_log,
)
from app.core.scene import OccupancyGrid
from app.models.base import PPOConfig
from app.models.cues import ActionCue


@pytest.fixture
def toy_config():
    return PPOConfig(
        tuples_per_update=512, minibatch=64, epochs_per_update=4, policy_lr=3e-3, value_lr=3e-3,
        policy_hidden=[32, 32], value_hidden=[32], log_std_init=-0.5,
    )


def toy_bundle(config, seed=0):
    env = PointGoalEnv()
    return PolicyBundle.create(env.observation_dim, env.type_count, env.continuous_dim, config, np.random.default_rng(seed))


def test_gae_hand_computed():
    adv, ret = compute_gae([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 0.0, gamma=0.5, lam=1.0)
    np.testing.assert_allclose(adv, [1.75, 1.5, 1.0])
    np.testing.assert_allclose(ret, adv)
    adv, _ = compute_gae([1.0, 1.0], [0.5, 0.5], 0.0, gamma=0.5, lam=0.0)
    np.testing.assert_allclose(adv, [0.75, 0.5])
    adv, _ = compute_gae([0.0], [0.0], 2.0, gamma=0.9, lam=0.95)
    np.testing.assert_allclose(adv, [1.8])


def test_batch_bootstraps_only_truncated_episodes():
    config = PPOConfig(gamma=0.9, lam=1.0)
    def episode(**flags):
        return Trajectory(obs=[np.zeros(2)], types=[0], actions=[np.zeros(2)], logps=[0.0], values=[0.0],
                          rewards=[0.0], bootstrap=5.0, **flags)
    batch = build_batch([episode(terminated=True), episode(truncated=True), Trajectory()], config)
    assert len(batch) == 2
    np.testing.assert_allclose(batch.advantages, [0.0, 4.5])
    assert batch.obs.shape == (2, 2)


def test_running_norm_matches_pooled_statistics(rng):
    data = rng.standard_normal((300, 4)) * [1.0, 2.0, 3.0, 4.0] + 7.0
    running = RunningNorm.create(4)
    for chunk in np.array_split(data, 7):
        running.update(chunk)
    np.testing.assert_allclose(running.mean, data.mean(axis=0), rtol=1e-10)
    np.testing.assert_allclose(running.var, data.var(axis=0), rtol=1e-10)
    assert np.all(np.abs(running(data * 1000.0)) <= running.clip)


def test_gaussian_logp_matches_scipy(rng):
    mean, log_std = rng.standard_normal(5), rng.standard_normal(5) * 0.3
    u = mean + rng.standard_normal(5)
    expected = normal.logpdf(u, loc=mean, scale=np.exp(log_std)).sum()
    assert gaussian_logp(u, mean, log_std) == pytest.approx(expected, rel=1e-12)


def test_act_produces_consistent_decision(toy_config, rng):
    bundle = toy_bundle(toy_config)
    decision = bundle.act(np.array([0.3, -0.2]), rng)
    assert 0 <= decision.type_index < 3
    assert decision.u.shape == (2,)
    assert decision.type_probs.sum() == pytest.approx(1.0)
    greedy = bundle.act(np.array([0.3, -0.2]), rng, greedy=True)
    assert greedy.type_index == int(np.argmax(greedy.type_probs))


def test_greedy_action_survives_normalizer_refit(toy_config, rng):
    bundle = toy_bundle(toy_config)
    for key, value in bundle.policy_params().items():
        if key != "policy.log_std":
            bundle.params[key] = rng.standard_normal(value.shape)
    data = rng.standard_normal((400, 2)) * [0.5, 2.0] + [1.0, -1.0]
    bundle.norm.update(data)
    before = [bundle.act(obs, rng, greedy=True) for obs in data[:60]]

    bundle.norm = RunningNorm.create(2, bundle.norm.clip)
    for chunk in np.array_split(data, 9):
        bundle.norm.update(chunk)
    after = [bundle.act(obs, rng, greedy=True) for obs in data[:60]]
    assert [d.type_index for d in after] == [d.type_index for d in before]
    np.testing.assert_allclose([d.u for d in after], [d.u for d in before], atol=1e-9)


def test_bundle_save_load(toy_config, tmp_path, rng):
    bundle = toy_bundle(toy_config)
    bundle.norm.update(rng.standard_normal((10, 2)))
    path = bundle.save(tmp_path / "policy.ckpt")
    loaded = PolicyBundle.load(path)
    obs = np.array([0.5, 0.1])
    a = bundle.act(obs, np.random.default_rng(3))
    b = loaded.act(obs, np.random.default_rng(3))
    assert a.type_index == b.type_index
    np.testing.assert_array_equal(a.u, b.u)
    assert a.value == b.value
    assert loaded.norm.count == bundle.norm.count


def test_load_rejects_non_finite_log_std(toy_config, tmp_path):
    bundle = toy_bundle(toy_config)
    bundle.params["policy.log_std"][0] = np.inf
    path = bundle.save(tmp_path / "policy.ckpt")
    with pytest.raises(ParseError):
        PolicyBundle.load(path)


def test_warm_start_checks_dimensions(toy_config, tmp_path):
    path = toy_bundle(toy_config).save(tmp_path / "policy.ckpt")
    assert warm_start(path, PointGoalEnv()).obs_dim == 2

    class Wider(PointGoalEnv):
        observation_dim = 3

    with pytest.raises(ConfigError):
        warm_start(path, Wider())


def test_point_goal_return_improves(toy_config):
    bundle = toy_bundle(toy_config)
    best, log = ppo_optimize(bundle, PointGoalEnv(), toy_config, iterations=15, seed=3)
    first = log[0]["average_return"]
    last = np.mean([row["average_return"] for row in log[-3:]])
    assert last > first + 0.5
    assert best.meta["best_average_return"] == max(row["average_return"] for row in log)


def test_optimization_is_deterministic(toy_config, tmp_path):
    logs = []
    for name in ("a", "b"):
        _, log = ppo_optimize(toy_bundle(toy_config), PointGoalEnv(), toy_config, iterations=2, seed=11)
        logs.append(write_training_log(log, tmp_path / f"{name}.csv").read_bytes())
    assert logs[0] == logs[1]


def test_training_log_columns(tmp_path):
    rows = [{"iteration": 0, "average_return": 1.0, "seconds": 2.5}, {"iteration": 1, "average_return": 2.0, "val": 3.0}]
    path = write_training_log(rows, tmp_path / "log.csv")
    with path.open() as handle:
        reader = csv.DictReader(handle)
        assert reader.fieldnames == ["iteration", "average_return", "val"]
        assert len(list(reader)) == 2


def test_grid_sampler_draws_free_positions(rng):
    bits = np.zeros((10, 10), dtype=np.uint8)
    bits[:5] = 1
    grid = OccupancyGrid(bits, 0.5, np.array([0.0, 0.0]), (0.1, 1.8))
    cue = ActionCue(q_root=(1.0, 0.47, 1.0))
    sampler = GridSampler(grid, [cue])
    for _ in range(50):
        initial, sampled = sampler.sample(rng)
        assert initial.position[0] >= 2.5
        assert not grid.occupied((initial.position[0], initial.position[2]))
        assert sampled == cue


def test_grid_sampler_errors(rng):
    grid = OccupancyGrid(np.ones((4, 4), dtype=np.uint8), 1.0, np.zeros(2), (0.1, 1.8))
    with pytest.raises(ConfigError):
        GridSampler(grid, [])
    with pytest.raises(ConfigError):
        GridSampler(grid, [ActionCue(q_root=(0.0, 0.47, 0.0))], max_resample=5).sample(rng)


def test_optimize_generalized_resamples_starts(database, room, run_config):
    run_config.ppo.tuples_per_update = 64
    run_config.ppo.minibatch = 32
    run_config.termination.max_frames = 30
    env = Environment(database, room, run_config)
    sampler = GridSampler(env.grid, [toy_task()[1]], (np.array([-4.5, -4.5]), np.array([4.5, 4.5])))
    bundle = PolicyBundle.create(env.observation_dim, env.type_count, env.continuous_dim, run_config.ppo,
                                 np.random.default_rng(0))
    best, rows = optimize_generalized(bundle, env, sampler, run_config.ppo, iterations=1)
    assert env.sampler is sampler
    assert len(rows) == 1
    assert best.obs_dim == env.observation_dim

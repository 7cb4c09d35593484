import math

import numpy as np
import pytest

from app.core import rotations as rot
from app.core.controller import (
    Environment, INTER_DIM, ScriptedPolicy, assemble_state, decode_action, heuristic_future, inter_state,
    r_collision, r_interaction, r_position, r_velocity, reward_action, reward_regularization, run_episode,
    state_dim, total_reward,
)
from app.core.fixtures import toy_task
from app.core.motion import Posture, rigid_xz
from app.core.scene import build_global_grid
from app.models.base import ACTION_ORDER, ActionType, GridConfig, RewardConfig
from app.models.cues import ActionCue, InitialState


@pytest.fixture
def standing(skeleton):
    return Posture(np.array([0.0, 0.91, 0.0]), np.zeros((len(skeleton), 3)))


def test_collision_reward():
    weights = np.ones(4)
    assert r_collision(np.zeros(4), weights, 2.0) == 1.0
    assert r_collision(np.array([1, 1, 1, 1]), weights, 2.0) == pytest.approx(math.exp(-1.0))


def test_position_reward():
    assert r_position((1.0, 2.0), (1.0, 2.0), 1.5) == 1.0
    assert r_position((1.5, 0.0), (0.0, 0.0), 1.5) == pytest.approx(math.exp(-1.0))


def test_velocity_reward():
    assert r_velocity(0.5, 0.2, 25.0) == 1.0
    assert r_velocity(0.1, 0.2, 25.0) == pytest.approx(0.25)


def test_interaction_reward():
    points = np.array([[0.0, 0.5, 0.0]])
    assert r_interaction(points, points, 0.1) == 1.0
    assert r_interaction(points, points + [0.1, 0.0, 0.0], 0.1) == pytest.approx(math.exp(-1.0))


def test_total_reward_weights():
    assert total_reward(1.0, 1.0, 1.0, RewardConfig()) == pytest.approx(2.5)
    assert total_reward(0.2, 0.0, 0.4, RewardConfig(w_tr=2.0)) == pytest.approx(0.6)


def test_action_reward_terms(skeleton):
    positions = np.zeros((len(skeleton), 3))
    positions[0] = (0.0, 0.47, 2.0)
    cue = ActionCue(action=ActionType.sit, q_root=(0.0, 0.47, 2.0))
    walk = reward_action(positions, ActionType.walk, cue, skeleton, 3.0, 3.0, RewardConfig())
    assert walk["R_act"] == 0.0
    sit = reward_action(positions, ActionType.sit, cue, skeleton, 0.0, 0.0, RewardConfig())
    assert sit["R_act"] == pytest.approx(1.0)
    costly = reward_action(positions, ActionType.sit, cue, skeleton, 1.0, 0.0, RewardConfig())
    assert costly["r_dt"] == pytest.approx(math.exp(-1.0))
    ablated = reward_action(positions, ActionType.sit, cue, skeleton, 1.0, 1.0, RewardConfig(use_transition=False))
    assert ablated["R_act"] == pytest.approx(1.0)


def test_regularization_of_identical_postures(standing):
    assert reward_regularization(standing, standing, standing, 1.0) == 1.0
    moved = standing.copy()
    moved.root_pos[0] += 1.0
    assert reward_regularization(standing, standing, moved, 1.0) == pytest.approx(math.exp(-1.0))


def test_heuristic_future_heads_for_the_cue(standing):
    cue = ActionCue(action=ActionType.sit, q_root=(0.0, 0.47, 1.0), r_root=0.5)
    walk = heuristic_future(standing, cue, ActionType.walk, [10, 20, 30], 0.04)
    np.testing.assert_allclose(walk, [[0.0, 0.4, 0.0], [0.0, 0.8, 0.0], [0.0, 1.0, 0.0]], atol=1e-12)
    sit = heuristic_future(standing, cue, ActionType.sit, [10, 20, 30], 0.04)
    np.testing.assert_allclose(sit[:, 2], 0.5)


def test_decode_action_bounds(standing, run_config):
    cue = ActionCue(action=ActionType.sit, q_root=(0.0, 0.47, 1.0))
    joints = len(run_config.synthesizer.offset_joints)
    zero = decode_action(0, np.zeros(9 + 3 * joints), standing, cue, [10, 20, 30], run_config)
    prior = heuristic_future(standing, cue, ActionType.walk, [10, 20, 30], run_config.synthesizer.nominal_speed)
    np.testing.assert_allclose(zero.future[:, :2], prior[:, :2])
    np.testing.assert_allclose(zero.offset, 0.0)
    huge = decode_action(1, np.full(9 + 3 * joints, 1e6), standing, cue, [10, 20, 30], run_config)
    assert huge.action_type == ActionType.sit
    assert np.all(np.abs(huge.offset) <= run_config.synthesizer.offset_clamp)
    np.testing.assert_allclose(np.hypot(huge.future[:, 2], huge.future[:, 3]), 1.0)


def test_inter_state_layout(standing):
    cue = ActionCue(action=ActionType.stop, q_root=(1.0, 0.9, 0.0), q_lfoot=(1.1, 0.0, 0.0))
    inter = inter_state(standing, cue)
    assert inter.shape == (INTER_DIM,)
    np.testing.assert_allclose(inter[:4], [1.0, 0.0, 1.0, 0.0])
    assert inter[7] == 0.0 and inter[11] == 1.0  # right foot absent, left present
    assert list(inter[12:]) == [1.0 if a == ActionType.stop else 0.0 for a in ACTION_ORDER]


def test_environment_observation(database, room, run_config):
    initial, cue = toy_task()
    env = Environment(database, room, run_config, initial, cue)
    obs = env.reset()
    assert obs.shape == (env.observation_dim,)
    assert env.observation_dim == state_dim(database.skeleton, run_config.scene.grid.n)
    result = env.step(0, np.zeros(env.continuous_dim))
    assert result.obs.shape == obs.shape
    assert np.isfinite(result.reward)
    assert {"R_tr", "R_act", "R_reg", "r_coli"} <= set(result.terms)


def test_leaving_the_scene_terminates(database, room, run_config):
    cue = ActionCue(action=ActionType.sit, q_root=(0.0, 0.47, 2.0))
    env = Environment(database, room, run_config, InitialState(position=(20.0, 0.0, 20.0)), cue)
    env.reset()
    result = env.step(0, np.zeros(env.continuous_dim))
    assert result.terminated and result.reason == "exit" and not result.success


def test_episode_records_motion(database, room, run_config):
    initial, cue = toy_task()
    env = Environment(database, room, run_config, initial, cue)
    traj = run_episode(ScriptedPolicy(env), env, np.random.default_rng(0), max_frames=40, keep_motion=True)
    assert 0 < len(traj) <= 40
    assert len(traj.motion) == len(traj) + 1
    assert traj.reason is not None


def test_environment_needs_a_cue(database, room, run_config):
    env = Environment(database, room, run_config)
    with pytest.raises(ValueError):
        env.reset()


def test_collision_reward_never_rises_with_intersections(rng):
    weights = np.array([0.5, 1.0, 2.0, 1.0])
    for _ in range(50):
        rho = rng.integers(0, 6, 4).astype(float)
        base = r_collision(rho, weights, 2.0)
        for node in range(4):
            more = rho.copy()
            more[node] += rng.integers(1, 4)
            assert r_collision(more, weights, 2.0) <= base


def _moved_point(p, yaw, shift):
    return tuple(rot.yaw_matrix(yaw) @ np.asarray(p, dtype=np.float64) + np.array([shift[0], 0.0, shift[1]]))


def _moved_posture(posture, yaw, shift):
    root_pos, root_rot = rigid_xz(posture.root_pos, posture.rotations[0], yaw, shift)
    rotations = posture.rotations.copy()
    rotations[0] = root_rot
    return Posture(root_pos, rotations)


def test_state_is_invariant_to_moving_the_whole_setup(skeleton, room, rng):
    yaw, shift = 0.7, (1.5, -0.8)
    rotations = 0.2 * rng.standard_normal((len(skeleton), 3))
    rotations[0] = (0.0, 0.3, 0.0)
    m_t = Posture(np.array([0.23, 0.91, -1.37]), rotations)
    m_prev = Posture(np.array([0.21, 0.90, -1.41]), rotations + 0.01)
    cue = ActionCue(action=ActionType.sit, q_root=(0.4, 0.47, 2.0), r_root=1.0,
                    q_rfoot=(0.5, 0.0, 1.7), q_lfoot=(0.3, 0.0, 1.7))
    moved_cue = ActionCue(action=ActionType.sit, q_root=_moved_point(cue.q_root, yaw, shift), r_root=1.0 + yaw,
                          q_rfoot=_moved_point(cue.q_rfoot, yaw, shift), q_lfoot=_moved_point(cue.q_lfoot, yaw, shift))
    moved_room = room.transformed(rot.yaw_matrix(yaw), (shift[0], 0.0, shift[1]))
    config = GridConfig(n=24)

    state = assemble_state(m_prev, m_t, room, build_global_grid(room, config), cue, skeleton, config)
    moved = assemble_state(_moved_posture(m_prev, yaw, shift), _moved_posture(m_t, yaw, shift), moved_room,
                           build_global_grid(moved_room, config), moved_cue, skeleton, config)
    assert state.occupancy.sum() > 0 and not state.outside and not moved.outside
    np.testing.assert_array_equal(moved.occupancy, state.occupancy)
    np.testing.assert_allclose(moved.vector(), state.vector(), atol=1e-7)


def test_state_off_the_grid_reads_occupied(skeleton, room, standing):
    config = GridConfig(n=8)
    far = standing.copy()
    far.root_pos[[0, 2]] = (40.0, 40.0)
    cue = ActionCue(action=ActionType.stop, q_root=(0.0, 0.91, 0.0))
    state = assemble_state(far, far, room, build_global_grid(room, config), cue, skeleton, config)
    assert state.outside
    assert state.occupancy.shape == (8, 8) and np.all(state.occupancy == 1)


def test_slow_root_stalls_after_the_window(database, room, run_config):
    initial, cue = toy_task()
    env = Environment(database, room, run_config, initial, cue)
    env.reset()
    terms = {"r_coli": 1.0, "r_inter": 0.0}
    window = run_config.termination.stall_window
    assert window == 50
    env._speeds = [0.01] * (window - 1)
    assert env._termination(terms) == (False, None, False)
    env._speeds.append(0.01)
    assert env._termination(terms) == (True, "stall", False)
    env._speeds = [0.01] * (window - 1) + [10.0]
    assert env._termination(terms) == (False, None, False)

from types import SimpleNamespace

import numpy as np
import pytest

from app.core.errors import ConfigError
from app.core.fixtures import walk_clip
from app.core.matcher import (
    MotionSynthesizer, apply_offset, database_feature, extract_feature, posture_heading, search, top_candidates,
)
from app.core.motion import transform_clip
from app.core.motion_db import FeatureLayout, Partition, build_database, feature_weights
from app.models.base import ActionType, FeatureWeights, SynthesizerConfig

STRAIGHT_AHEAD = np.array([[0.0, 0.4, 1.0, 0.0], [0.0, 0.8, 1.0, 0.0], [0.0, 1.2, 1.0, 0.0]])


@pytest.fixture(scope="module")
def random_db(skeleton):
    rng = np.random.default_rng(99)
    layout = FeatureLayout(len(skeleton.end_effectors), 3)
    features = rng.standard_normal((10000, layout.dim)) * rng.uniform(0.1, 5.0, layout.dim)
    features[5] = features[2]
    part = Partition(
        action=ActionType.walk, layout=layout, indices=np.arange(10000, dtype=np.int64), features=features,
        mean=features.mean(axis=0), std=features.std(axis=0),
        weights=feature_weights(layout, skeleton, FeatureWeights()),
    )
    return SimpleNamespace(partition=lambda action: part, part=part)


def test_tree_and_brute_agree(random_db):
    rng = np.random.default_rng(5)
    part = random_db.part
    for _ in range(1000):
        x = part.features[rng.integers(len(part))] + rng.standard_normal(part.layout.dim) * part.std * 0.3
        tree = search(x, random_db, ActionType.walk, "tree")
        brute = search(x, random_db, ActionType.walk, "brute")
        assert tree[0] == brute[0]
        assert tree[1] == pytest.approx(brute[1], rel=1e-9)


def test_ties_resolve_to_lowest_position(random_db):
    x = random_db.part.features[2]
    assert search(x, random_db, ActionType.walk, "tree") == (2, 0.0)
    assert search(x, random_db, ActionType.walk, "brute") == (2, 0.0)


def test_search_rejects_bad_queries(random_db):
    with pytest.raises(ConfigError):
        search(np.zeros(3), random_db, ActionType.walk)
    with pytest.raises(ConfigError):
        search(random_db.part.features[0], random_db, ActionType.walk, "annoy")


def test_top_candidates_sorted(random_db):
    found = top_candidates(random_db.part.features[7], random_db, ActionType.walk, k=5)
    assert found[0] == (7, 0.0)
    distances = [d for _, d in found]
    assert distances == sorted(distances)


def test_database_frame_feature_matches_index(database):
    # periodic gaits repeat frames, so only the distance is pinned
    for action in (ActionType.walk, ActionType.sit):
        for index in database.partition(action).indices[::97]:
            _, distance = search(database_feature(database, int(index)), database, action)
            assert distance < 1e-9


def test_initial_state_places_character(database):
    synth = MotionSynthesizer(database)
    state = synth.initial_state((1.0, 0.0, -2.0), 0.3)
    np.testing.assert_allclose(state.posture.root_pos[[0, 2]], [1.0, -2.0], atol=1e-12)
    assert posture_heading(state.posture) == pytest.approx(0.3, abs=1e-9)


def test_playback_continues_clip_between_searches(skeleton):
    db = build_database([walk_clip(skeleton, frames=200)])
    synth = MotionSynthesizer(db, SynthesizerConfig(search_period=1000, use_offset=False))
    state = synth.initial_state((0.0, 0.0, 0.0), 0.0)
    state, info = synth.step(state, ActionType.walk, STRAIGHT_AHEAD)
    assert info.searched
    for _ in range(25):
        cursor = state.cursor
        state, info = synth.step(state, ActionType.walk, STRAIGHT_AHEAD)
        assert not info.searched
        assert state.cursor == cursor + 1
        np.testing.assert_allclose(state.posture.rotations[1:], db.rotations[state.cursor][1:])
        step = np.linalg.norm(state.posture.root_pos[[0, 2]] - state.previous.root_pos[[0, 2]])
        assert step == pytest.approx(np.linalg.norm(db.root_pos[cursor + 1, [0, 2]] - db.root_pos[cursor, [0, 2]]), abs=1e-9)


def test_searches_keep_the_root_continuous(database):
    synth = MotionSynthesizer(database, SynthesizerConfig(search_period=3, use_offset=False))
    largest = max(
        float(np.max(np.linalg.norm(np.diff(clip.root_pos[:, [0, 2]], axis=0), axis=1))) for clip in database.clips
    )
    state = synth.initial_state((0.0, 0.0, 0.0), 1.0)
    for t in range(90):
        future = STRAIGHT_AHEAD if t % 30 < 15 else STRAIGHT_AHEAD[:, [1, 0, 2, 3]]
        state, _ = synth.step(state, ActionType.walk, future)
        assert np.linalg.norm(state.posture.root_pos[[0, 2]] - state.previous.root_pos[[0, 2]]) <= largest + 1e-9


def test_far_switch_is_discarded(database):
    synth = MotionSynthesizer(database, SynthesizerConfig(transition_max_distance=1e-9))
    state = synth.initial_state((0.0, 0.0, 0.0), 0.0)
    state, info = synth.step(state, ActionType.sit, STRAIGHT_AHEAD)
    assert info.discarded
    assert state.action == ActionType.walk


def test_accepted_switch_changes_action(database):
    synth = MotionSynthesizer(database, SynthesizerConfig(transition_max_distance=1e9))
    state = synth.initial_state((0.0, 0.0, 0.0), 0.0)
    state, info = synth.step(state, ActionType.sit, STRAIGHT_AHEAD)
    assert not info.discarded
    assert state.action == ActionType.sit
    assert database.action_of(state.cursor) == ActionType.sit


def test_offsets_only_touch_listed_joints(database):
    synth = MotionSynthesizer(database)
    posture = synth.initial_state((0.0, 0.0, 0.0), 0.0).posture
    joints = synth.offset_joints
    offset = np.full((len(joints), 3), 5.0)
    moved = apply_offset(posture, offset, joints, clamp=0.3)
    untouched = [j for j in range(len(posture.rotations)) if j not in joints]
    np.testing.assert_array_equal(moved.rotations[untouched], posture.rotations[untouched])
    np.testing.assert_array_equal(moved.root_pos, posture.root_pos)
    assert not np.allclose(moved.rotations[joints], posture.rotations[joints])
    same = apply_offset(posture, np.zeros((len(joints), 3)), joints, clamp=0.3)
    np.testing.assert_array_equal(same.rotations, posture.rotations)


def test_debug_dump_writes_candidates(database, tmp_path):
    path = tmp_path / "dump" / "matches.csv"
    synth = MotionSynthesizer(database, SynthesizerConfig(debug_dump_path=str(path)))
    state = synth.initial_state((0.0, 0.0, 0.0), 0.0)
    state, info = synth.step(state, ActionType.walk, STRAIGHT_AHEAD)
    assert len(info.candidates) == 5
    lines = path.read_text().splitlines()
    assert lines[0].startswith("frame,action,query")
    assert len(lines) == 2


def test_search_ignores_where_the_source_motion_stands(database, skeleton):
    for clip in database.clips[:3]:
        moved = transform_clip(clip, 0.7, (1.5, -0.8))
        for k in (5, 17, len(clip) // 2):
            x = extract_feature(clip.posture(k - 1), clip.posture(k), clip.contacts[k], STRAIGHT_AHEAD, skeleton,
                                clip.action)
            x_moved = extract_feature(moved.posture(k - 1), moved.posture(k), moved.contacts[k], STRAIGHT_AHEAD,
                                      skeleton, clip.action)
            np.testing.assert_allclose(x_moved, x, atol=1e-9)
            index, distance = search(x, database, clip.action)
            moved_index, moved_distance = search(x_moved, database, clip.action)
            assert moved_index == index
            assert moved_distance == pytest.approx(distance, abs=1e-9)


def test_root_never_jumps_past_the_clip_step(database):
    synth = MotionSynthesizer(database, SynthesizerConfig(search_period=4, transition_max_distance=1e9))
    rng = np.random.default_rng(11)
    state = synth.initial_state((0.5, 0.0, -1.0), 2.0)
    for t in range(120):
        action = ActionType.sit if 60 <= t < 70 else ActionType.walk
        future = STRAIGHT_AHEAD + np.concatenate([rng.normal(0.0, 0.3, (3, 2)), np.zeros((3, 2))], axis=1)
        offset = rng.normal(0.0, 0.5, (len(synth.offset_joints), 3))
        state, _ = synth.step(state, action, future, offset)
        cursor = state.cursor
        clip_step = np.linalg.norm(database.root_pos[cursor, [0, 2]] - database.root_pos[cursor - 1, [0, 2]])
        jump = np.linalg.norm(state.posture.root_pos[[0, 2]] - state.previous.root_pos[[0, 2]])
        assert jump <= clip_step + 1e-6

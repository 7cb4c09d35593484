import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.core import numerics as nx
from app.core.editor import (
    Autoencoder, ChannelLayout, decode_channels_t, descend, edit, edit_objective, generate_cue, ik_edit,
    splice_manipulation, train_autoencoder, window_decode_motion, window_encode_motion, windows_from_clips,
)
from app.core.errors import ConfigError, CueError
from app.core.fixtures import sit_clip, walk_clip
from app.models.base import EditorConfig
from app.models.cues import ArticulationSpec, ManipulationCue, Waypoint

SMALL_AE = EditorConfig(window=16, channels=8, kernel=3, stride=2, layers=2, batch_size=4, val_fraction=0.25,
                        ae_lr=1e-3, edit_lr=1e-2)


@pytest.fixture(scope="module")
def small_ae(skeleton):
    windows = windows_from_clips([walk_clip(skeleton, turn=0.01, frames=64)], window=16, hop=8)
    return train_autoencoder(windows, skeleton, SMALL_AE, np.random.default_rng(0), epochs=3)


def hand_cue(clip, frame, shift=(0.1, 0.0, 0.0)):
    target = clip.positions()[frame, clip.skeleton.index("r_hand")] + np.asarray(shift)
    return ManipulationCue(waypoints=[Waypoint(time=frame, joint="r_hand", xyz=target.tolist())])


def test_window_round_trip(skeleton):
    clip = walk_clip(skeleton, turn=0.02, frames=50).with_contacts()
    window = window_encode_motion(clip, 64)
    assert window.data.shape == (64, ChannelLayout(len(skeleton)).count)
    np.testing.assert_array_equal(window.mask[:50], 1.0)
    np.testing.assert_array_equal(window.data[50:], 0.0)
    decoded = window_decode_motion(window, skeleton)
    np.testing.assert_allclose(decoded.positions(), clip.positions(), atol=1e-8)
    np.testing.assert_array_equal(decoded.contacts, clip.contacts)


def test_differentiable_decode_matches(skeleton):
    clip = sit_clip(skeleton).slice(0, 60).with_contacts()
    window = window_encode_motion(clip, 64)
    positions, root_xz = decode_channels_t(window.valid[None], skeleton, window.start_xz, np.array([window.start_yaw]))
    np.testing.assert_allclose(positions.data[0], clip.positions(), atol=1e-8)
    np.testing.assert_allclose(root_xz.data[0], clip.root_pos[:, [0, 2]], atol=1e-8)


def test_window_rejects_long_segments(skeleton):
    with pytest.raises(ConfigError):
        window_encode_motion(walk_clip(skeleton, frames=20), 16)


def test_windows_from_clips_hops(skeleton):
    windows = windows_from_clips([walk_clip(skeleton, frames=150), walk_clip(skeleton, frames=40)], window=64, hop=32)
    assert len(windows) == 4
    assert windows[-1].length == 40


def test_splice_holds_the_target_frame(skeleton):
    clip = walk_clip(skeleton, frames=10).with_contacts()
    spliced = splice_manipulation(clip, tau=3, t_target=4)
    assert len(spliced) == 13
    for k in (5, 6, 7):
        np.testing.assert_array_equal(spliced.root_pos[k], clip.root_pos[4])
        np.testing.assert_array_equal(spliced.contacts[k], 0.0)
    np.testing.assert_array_equal(spliced.root_pos[8], clip.root_pos[5])
    assert spliced.meta["spliced"] == {"frame": 4, "length": 3}
    assert len(splice_manipulation(clip, 0, 4)) == 10
    with pytest.raises(ConfigError):
        splice_manipulation(clip, 2, 10)


def test_generate_cue_revolute_and_prismatic():
    door = ArticulationSpec(type="revolute", axis_direction=(0.0, 1.0, 0.0), contact_vertex=(1.0, 1.0, 0.0),
                            theta=[0.0, math.pi / 2], translation=(0.0, 0.0, 2.0), start_frame=5)
    cue = generate_cue(door)
    assert [wp.time for wp in cue.waypoints] == [5, 6]
    np.testing.assert_allclose(cue.waypoints[0].xyz, [1.0, 1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(cue.waypoints[1].xyz, [0.0, 1.0, 1.0], atol=1e-12)

    drawer = ArticulationSpec(type="prismatic", axis_direction=(0.0, 0.0, 2.0), contact_vertex=(0.0, 0.8, 0.3),
                              theta=[0.0, 0.1, 0.2], joint="l_hand")
    cue = generate_cue(drawer)
    np.testing.assert_allclose(cue.waypoints[2].xyz, [0.0, 0.8, 0.5], atol=1e-12)
    assert cue.waypoints[0].joint == "l_hand"


def test_generate_cue_rejects_zero_axis():
    spec = ArticulationSpec(type="prismatic", axis_direction=(0.0, 0.0, 0.0), contact_vertex=(0.0, 0.0, 0.0), theta=[0.0])
    with pytest.raises(CueError):
        generate_cue(spec)


def test_descend_never_increases_loss():
    def evaluate(x):
        return float(np.sum((x - 3.0) ** 2)), 2.0 * (x - 3.0)

    x, history = descend(evaluate, np.zeros(4), lr=0.5, epochs=200)
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert history[-1] < 1e-2
    np.testing.assert_allclose(x, 3.0, atol=0.1)


def test_ik_edit_reduces_waypoint_error(skeleton):
    clip = walk_clip(skeleton, frames=30)
    result = ik_edit(clip, hand_cue(clip, 10), (0, 30), EditorConfig(crossfade=0), epochs=100, lr=1e-2)
    assert result.method == "ik"
    assert result.initial_error == pytest.approx(0.1)
    assert result.final_error < result.initial_error
    np.testing.assert_array_equal(result.motion.root_pos, clip.root_pos)


def test_autoencoder_training(small_ae):
    assert not small_ae.aborted
    assert len(small_ae.history) == 3
    assert "val_mpjpe" in small_ae.history[-1]
    assert len(small_ae.validation) == 2
    assert all(np.isfinite(row["loss"]) for row in small_ae.history)


def test_autoencoder_shapes(small_ae, skeleton):
    ae = small_ae.autoencoder
    assert ae.lengths == [16, 8, 4]
    window = window_encode_motion(walk_clip(skeleton, frames=12), 16)
    out = ae.reconstruct(window)
    assert out.shape == window.data.shape
    np.testing.assert_array_equal(out[12:], 0.0)


def test_autoencoder_save_load(small_ae, skeleton, tmp_path):
    ae = small_ae.autoencoder
    loaded = Autoencoder.load(ae.save(tmp_path / "autoencoder.ckpt"))
    window = window_encode_motion(walk_clip(skeleton, frames=16), 16)
    np.testing.assert_array_equal(loaded.reconstruct(window), ae.reconstruct(window))


def test_training_rejects_mismatched_windows(skeleton):
    windows = windows_from_clips([walk_clip(skeleton, frames=20)], window=32)
    with pytest.raises(ConfigError):
        train_autoencoder(windows, skeleton, SMALL_AE, epochs=1)
    with pytest.raises(ConfigError):
        train_autoencoder([], skeleton, SMALL_AE, epochs=1)


def test_manifold_edit_touches_only_the_segment(small_ae, skeleton):
    clip = walk_clip(skeleton, turn=0.01, frames=40).with_contacts()
    result = edit(clip, hand_cue(clip, 15), (10, 26), small_ae.autoencoder, epochs=10)
    assert result.method == "manifold"
    assert len(result.motion) == len(clip)
    assert all(b <= a for a, b in zip(result.losses, result.losses[1:]))
    np.testing.assert_array_equal(result.motion.root_pos[:10], clip.root_pos[:10])
    np.testing.assert_array_equal(result.motion.rotations[26:], clip.rotations[26:])


def test_edit_validates_cue_and_segment(small_ae, skeleton):
    clip = walk_clip(skeleton, frames=40)
    with pytest.raises(CueError):
        edit(clip, hand_cue(clip, 30), (10, 26), small_ae.autoencoder, epochs=1)
    with pytest.raises(ConfigError):
        edit(clip, hand_cue(clip, 15), (0, 30), small_ae.autoencoder, epochs=1)
    with pytest.raises(CueError):
        edit(clip, ManipulationCue(), (10, 26), small_ae.autoencoder, epochs=1)


@pytest.mark.parametrize("kind, theta", [("revolute", [0.0, 0.3, 0.6, 0.9]), ("prismatic", [0.0, 0.1, 0.2])])
def test_generate_cue_follows_the_object_placement(kind, theta):
    spec = ArticulationSpec(type=kind, axis_origin=(0.1, 0.0, 0.2), axis_direction=(0.0, 1.0, 0.3),
                            rotation=(0.0, 0.4, 0.0), translation=(1.0, 0.0, -0.5), contact_vertex=(0.8, 1.0, 0.1),
                            theta=theta)
    R = Rotation.from_rotvec([0.2, -0.5, 0.3])
    T = np.array([0.4, -1.0, 2.0])
    moved = spec.model_copy(update={
        "rotation": tuple((R * Rotation.from_rotvec(spec.rotation)).as_rotvec()),
        "translation": tuple(R.apply(spec.translation) + T),
    })
    expected = R.apply([wp.xyz for wp in generate_cue(spec).waypoints]) + T
    np.testing.assert_allclose([wp.xyz for wp in generate_cue(moved).waypoints], expected, atol=1e-12)


def test_edit_loss_gradient_matches_finite_differences(small_ae, skeleton, gradcheck):
    ae = small_ae.autoencoder
    clip = walk_clip(skeleton, turn=0.01, frames=40).with_contacts()
    source = clip.slice(10, 26)
    window = window_encode_motion(source, ae.window)
    target = clip.positions()[15, skeleton.index("r_hand")] + [0.1, 0.0, 0.0]
    objective = edit_objective(ae, window, source, np.array([5]), np.array([skeleton.index("r_hand")]),
                               target[None], ae.config)
    xn = ae.normalize(window.data) * window.mask[:, None]
    with nx.no_grad():
        z0 = ae.encode(xn[None]).data
    gradcheck(objective, z0, eps=1e-6, rtol=1e-4, atol=1e-6)


def test_reported_error_is_measured_on_the_returned_motion(small_ae, skeleton):
    clip = walk_clip(skeleton, turn=0.01, frames=40).with_contacts()
    # frame 23 sits inside the crossfade at the end of the segment
    cue = hand_cue(clip, 23)
    target = np.array(cue.waypoints[0].xyz)
    hand = skeleton.index("r_hand")
    results = [
        edit(clip, cue, (10, 26), small_ae.autoencoder, epochs=10),
        ik_edit(clip, cue, (10, 26), EditorConfig(crossfade=5), epochs=20, lr=1e-2),
    ]
    for result in results:
        reached = result.motion.positions()[23, hand]
        assert result.final_error == pytest.approx(float(np.linalg.norm(reached - target)), abs=1e-9)

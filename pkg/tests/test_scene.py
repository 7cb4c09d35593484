import numpy as np
import pytest

from app.core import rotations as rot
from app.core.errors import ParseError
from app.core.fixtures import penetration_clip, room_obj, slab_scene
from app.core.motion import transform_clip
from app.core.scene import (
    SceneWorld, build_global_grid, build_occupancy, count_intersections, count_intersections_naive,
    from_triangles, load_mesh, load_scene, motion_intersections, penetration_metric, person_window,
    segment_triangle_hits,
)
from app.models.base import GridConfig, SceneConfig

UNIT_TRIANGLE = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]])


def test_load_mesh_fan_triangulates_quads(room):
    # five boxes, six quads each
    assert len(room) == 5 * 6 * 2
    lo, hi = room.bbox
    np.testing.assert_allclose(lo, [-5.1, 0.0, -5.1])
    np.testing.assert_allclose(hi, [5.1, 2.5, 5.1])


def test_load_mesh_negative_indices_and_comments():
    text = "# tri\nv 0 0 0\nv 1 0 0\nv 0 0 1  # trailing\nf -3 -2 -1\n"
    scene = load_mesh(text)
    np.testing.assert_allclose(scene.triangles, UNIT_TRIANGLE)


@pytest.mark.parametrize("text, line", [
    ("v 0 0\n", 1),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2\n", 4),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n", 4),
    ("v 0 0 0\nv a 0 0\n", 2),
])
def test_load_mesh_errors_carry_line(text, line):
    with pytest.raises(ParseError) as info:
        load_mesh(text)
    assert info.value.line == line


def test_degenerate_triangles_skipped(caplog):
    tris = np.concatenate([UNIT_TRIANGLE, np.zeros((1, 3, 3))])
    with caplog.at_level("WARNING"):
        scene = from_triangles(tris)
    assert len(scene) == 1
    assert "degenerate" in caplog.text


def test_load_scene_missing_file(tmp_path):
    with pytest.raises(ParseError):
        load_scene(tmp_path / "absent.obj")


def test_load_scene_applies_unit_scale(tmp_path):
    path = tmp_path / "room.obj"
    path.write_text(room_obj())
    scene = load_scene(path, SceneConfig(unit_scale=0.5))
    assert scene.bbox[1][0] == pytest.approx(2.55)


def test_segment_through_triangle():
    hits = segment_triangle_hits(np.array([0.2, 1.0, 0.2]), np.array([0.2, -1.0, 0.2]), UNIT_TRIANGLE)
    np.testing.assert_allclose(hits, [[0.2, 0.0, 0.2]])


def test_segment_short_of_triangle():
    hits = segment_triangle_hits(np.array([0.2, 1.0, 0.2]), np.array([0.2, 0.5, 0.2]), UNIT_TRIANGLE)
    assert len(hits) == 0


def test_segment_in_plane_has_no_points():
    hits = segment_triangle_hits(np.array([-1.0, 0.0, 0.2]), np.array([2.0, 0.0, 0.2]), UNIT_TRIANGLE)
    assert len(hits) == 0


def test_shared_edge_hit_counts_once():
    quad = load_mesh("v 0 0 0\nv 1 0 0\nv 1 0 1\nv 0 0 1\nf 1 2 3 4\n")
    # the diagonal from (0,0,0) to (1,0,1) is shared by both triangles
    segment = np.array([[[0.5, 1.0, 0.5], [0.5, -1.0, 0.5]]])
    assert count_intersections(segment, quad) == 1


def test_spatial_hash_matches_all_pairs():
    rng = np.random.default_rng(7)
    centers = rng.uniform(-2.0, 2.0, (60, 1, 3))
    scene = from_triangles(centers + rng.uniform(-0.5, 0.5, (60, 3, 3)), hash_cell=0.5)
    for _ in range(1000):
        p0 = rng.uniform(-2.5, 2.5, 3)
        segment = np.stack([p0, p0 + rng.uniform(-1.0, 1.0, 3)])[None]
        assert count_intersections(segment, scene) == count_intersections_naive(segment, scene)


def test_empty_scene_counts_nothing(skeleton):
    scene = SceneWorld(np.zeros((0, 3, 3)))
    assert scene.contains_xz((100.0, -40.0))
    assert count_intersections(np.ones((1, 2, 3)), scene) == 0
    clip = penetration_clip(skeleton, frames=5, inside=5)
    assert penetration_metric(clip, scene) == 0.0
    assert motion_intersections(clip, scene).sum() == 0


def test_occupancy_marks_obstacle(room):
    grid = build_occupancy(room, n=21, cell=0.1, band=(0.1, 1.8), origin=(-1.05, -1.05))
    assert grid.shape == (21, 21)
    assert grid.occupied((0.0, 0.0))
    assert grid.occupied((0.5, 0.0))
    assert not grid.occupied((0.8, 0.8))
    assert grid.occupied((5.0, 5.0))  # off the grid


def test_occupancy_band_excludes_low_geometry():
    grid = build_occupancy(slab_scene(), n=20, cell=0.1, band=(0.5, 1.8))
    assert grid.bits.sum() == 0
    grid = build_occupancy(slab_scene(), n=20, cell=0.1, band=(0.1, 1.8))
    assert grid.occupied((0.0, 0.0))


def test_person_window_turns_with_heading(room):
    # obstacle is the unit cube at the origin; both roots stand 1.2 m from it, facing it
    ahead = person_window(room, (0.0, -1.2), 0.0, 32, 0.1, (0.1, 1.8))
    turned = person_window(room, (-1.2, 0.0), np.pi / 2, 32, 0.1, (0.1, 1.8))
    for window in (ahead, turned):
        assert window.shape == (32, 32)
        assert window[16, 25] == 1 and window[12, 27] == 1
        assert window[16, 5] == 0  # behind
        assert window[2, 25] == 0  # off to the side


def test_person_window_of_empty_scene():
    window = person_window(SceneWorld(np.zeros((0, 3, 3))), (0.0, 0.0), 1.0, 8, 0.1, (0.1, 1.8))
    assert window.shape == (8, 8) and window.sum() == 0


def test_occupancy_only_grows_with_triangles(room):
    rng = np.random.default_rng(3)
    order = rng.permutation(len(room))
    previous_grid, previous_window = None, None
    for count in (10, 30, len(room)):
        part = SceneWorld(room.triangles[order[:count]])
        grid = build_occupancy(part, n=40, cell=0.3, band=(0.1, 1.8))
        window = person_window(part, (0.4, -0.9), 0.6, 32, 0.1, (0.1, 1.8))
        if previous_grid is not None:
            assert np.all(grid.bits >= previous_grid)
            assert np.all(window >= previous_window)
        previous_grid, previous_window = grid.bits, window
    assert previous_grid.sum() > 0 and previous_window.sum() > 0


def test_intersections_and_window_survive_rigid_motion(skeleton, room):
    yaw, shift = 0.7, (1.5, -0.8)
    R = rot.yaw_matrix(yaw)
    t = np.array([shift[0], 0.0, shift[1]])

    clip = penetration_clip(skeleton, frames=4, inside=2)
    moved_clip = transform_clip(clip, yaw, shift)
    slabs = slab_scene()
    counts = motion_intersections(clip, slabs)
    assert counts.sum() > 0
    np.testing.assert_array_equal(motion_intersections(moved_clip, slabs.transformed(R, t)), counts)

    root = np.array([0.23, -1.37])
    moved_root = rot.rotate_xz(root, yaw) + np.array(shift)
    window = person_window(room, root, 0.3, 32, 0.1, (0.1, 1.8))
    assert window.sum() > 0
    moved = person_window(room.transformed(R, t), moved_root, 0.3 + yaw, 32, 0.1, (0.1, 1.8))
    np.testing.assert_array_equal(moved, window)


def test_global_grid_covers_scene(room):
    grid = build_global_grid(room, GridConfig(cell=0.5))
    assert grid.inside((-5.0, -5.0)) and grid.inside((5.0, 5.0))
    assert not grid.occupied((2.5, 2.5))
    assert grid.occupied((0.0, 0.0))


def test_penetration_metric_on_slabs(skeleton):
    clip = penetration_clip(skeleton, frames=100, inside=10)
    assert penetration_metric(clip, slab_scene()) == pytest.approx(10.0)


def test_transformed_scene_moves_geometry():
    scene = from_triangles(UNIT_TRIANGLE)
    moved = scene.transformed(np.eye(3), (1.0, 0.0, 2.0))
    np.testing.assert_allclose(moved.bbox[0], [1.0, 0.0, 2.0])

import numpy as np
import pytest

from app.core.bvh import load_bvh, parse_bvh, save_bvh, write_bvh
from app.core.errors import ParseError
from app.core.fixtures import walk_clip
from app.models.base import ActionType

SMALL_BVH = """HIERARCHY
ROOT hips
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT knee
  {
    OFFSET 0 -40 0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0 -40 0
    }
  }
}
MOTION
Frames: 2
Frame Time: 0.0333333
0 90 0 0 0 0 0 0 90
10 90 0 0 0 0 0 0 0
"""


def test_parse_small_file():
    clip = parse_bvh(SMALL_BVH, unit_scale=0.01)
    assert clip.skeleton.names == ["hips", "knee"]
    assert len(clip) == 2
    np.testing.assert_allclose(clip.skeleton.offsets[1], [0.0, -0.4, 0.0])
    np.testing.assert_allclose(clip.root_pos[1], [0.1, 0.9, 0.0])
    # 90 degrees about Y on the knee in frame 0
    np.testing.assert_allclose(clip.rotations[0, 1], [0.0, np.pi / 2, 0.0], atol=1e-9)


def test_round_trip_keeps_frames_and_pose(skeleton):
    clip = walk_clip(skeleton, turn=0.01, frames=40)
    parsed = parse_bvh(write_bvh(clip), skeleton=skeleton, action=ActionType.walk)
    assert len(parsed) == len(clip)
    np.testing.assert_allclose(parsed.root_pos, clip.root_pos, atol=1e-9)
    np.testing.assert_allclose(parsed.positions(), clip.positions(), atol=1e-7)


def test_save_and_load(skeleton, tmp_path):
    clip = walk_clip(skeleton, frames=10)
    path = save_bvh(clip, tmp_path / "sub" / "walk.bvh")
    loaded = load_bvh(path, skeleton=skeleton)
    assert loaded.name == "walk"
    assert len(loaded) == 10


def test_resamples_to_thirty_hz():
    text = SMALL_BVH.replace("Frames: 2", "Frames: 4").replace("Frame Time: 0.0333333", "Frame Time: 0.0166666667")
    text += "20 90 0 0 0 0 0 0 0\n30 90 0 0 0 0 0 0 0\n"
    clip = parse_bvh(text)
    assert len(clip) == 2
    assert clip.frame_rate == 30.0


def test_empty_motion_section_parses_to_an_empty_clip():
    text = SMALL_BVH.replace("Frames: 2", "Frames: 0").replace("Frame Time: 0.0333333", "Frame Time: 0.0083333333")
    text = text.split("0 90 0 0 0 0 0 0 90")[0]
    clip = parse_bvh(text)
    assert len(clip) == 0
    assert clip.rotations.shape == (0, 2, 3)
    assert clip.frame_rate == 30.0


@pytest.mark.parametrize("broken, line", [
    (SMALL_BVH.replace("OFFSET 0 -40 0\n    CHANNELS", "OFFSET 0 -x 0\n    CHANNELS"), 8),
    (SMALL_BVH.replace("Frames: 2", "Frames: 3"), 20),
    (SMALL_BVH.replace("HIERARCHY", "HIERARCHYX"), 1),
])
def test_parse_errors_carry_line_numbers(broken, line):
    with pytest.raises(ParseError) as info:
        parse_bvh(broken)
    assert info.value.line == line


def test_unknown_channel_rejected():
    with pytest.raises(ParseError):
        parse_bvh(SMALL_BVH.replace("CHANNELS 3 Zrotation", "CHANNELS 3 Wrotation"))


def test_joint_mismatch_with_skeleton(skeleton):
    with pytest.raises(ParseError):
        parse_bvh(SMALL_BVH, skeleton=skeleton)

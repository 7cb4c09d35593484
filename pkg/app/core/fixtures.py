"""
Procedural motion clips, synthetic scenes and a toy point-goal environment.
They back the test suite and give the pipeline a small self-contained
workspace when no captured data is available.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.bvh import save_bvh
from app.core.controller import StepResult
from app.core.motion import MotionClip
from app.core.scene import SceneWorld, from_triangles, load_mesh
from app.core.skeleton import STANDING_ROOT_HEIGHT, Skeleton, default_skeleton
from app.models.base import ActionType, RunConfig
from app.models.cues import ActionCue, CueFile, InitialState

logger = logging.getLogger(__name__)

SEATED_ROOT_HEIGHT = 0.47
GAIT_STRIDE = 1.2  # meters per gait cycle
HIP_SWING = 0.45
KNEE_FLEX = 0.6
ARM_DROP = 1.2


# ---------------------------------------------------------------- poses

def _base_pose(skeleton: Skeleton) -> np.ndarray:
    """Standing pose with arms lowered"""
    rotations = np.zeros((len(skeleton), 3))
    rotations[skeleton.index("l_shoulder")] = (0.0, 0.0, -ARM_DROP)
    rotations[skeleton.index("r_shoulder")] = (0.0, 0.0, ARM_DROP)
    return rotations


def _gait_pose(skeleton: Skeleton, phase: float, amount: float = 1.0) -> np.ndarray:
    rotations = _base_pose(skeleton)
    swing = HIP_SWING * amount * math.sin(phase)
    rotations[skeleton.index("l_upper_leg"), 0] = -swing
    rotations[skeleton.index("r_upper_leg"), 0] = swing
    rotations[skeleton.index("l_lower_leg"), 0] = KNEE_FLEX * amount * max(0.0, math.sin(phase + math.pi / 2))
    rotations[skeleton.index("r_lower_leg"), 0] = KNEE_FLEX * amount * max(0.0, -math.sin(phase + math.pi / 2))
    return rotations


def _seated_pose(skeleton: Skeleton, s: float) -> np.ndarray:
    rotations = _base_pose(skeleton)
    for side in ("l", "r"):
        rotations[skeleton.index(f"{side}_upper_leg"), 0] = -0.5 * math.pi * s
        rotations[skeleton.index(f"{side}_lower_leg"), 0] = 0.5 * math.pi * s
    rotations[skeleton.index("spine"), 0] = 0.15 * s
    return rotations


def _smoothstep(x: float) -> float:
    x = min(max(x, 0.0), 1.0)
    return x * x * (3.0 - 2.0 * x)


class _Track:
    """Accumulates root transforms and local rotations frame by frame"""

    def __init__(self, skeleton: Skeleton, position=(0.0, 0.0), yaw: float = 0.0):
        self.skeleton = skeleton
        self.xz = np.array(position, dtype=np.float64)
        self.yaw = yaw
        self.phase = 0.0
        self.root_pos: List[np.ndarray] = []
        self.rotations: List[np.ndarray] = []

    def emit(self, pose: np.ndarray, height: float):
        rotations = pose.copy()
        rotations[0] = (0.0, self.yaw, 0.0)
        self.root_pos.append(np.array([self.xz[0], height, self.xz[1]]))
        self.rotations.append(rotations)

    def walk(self, speed: float, turn: float = 0.0):
        self.yaw += turn
        self.xz = self.xz + speed * np.array([math.sin(self.yaw), math.cos(self.yaw)])
        self.phase += 2.0 * math.pi * speed / GAIT_STRIDE
        amount = min(speed / 0.04, 1.0)
        bob = 0.01 * amount * math.cos(2.0 * self.phase)
        self.emit(_gait_pose(self.skeleton, self.phase, amount), STANDING_ROOT_HEIGHT + bob)

    def clip(self, action: ActionType, name: str) -> MotionClip:
        return MotionClip(skeleton=self.skeleton, root_pos=np.array(self.root_pos), rotations=np.array(self.rotations),
                          action=action, name=name)


# ---------------------------------------------------------------- clips

def walk_clip(skeleton: Skeleton, speed: float = 0.04, turn: float = 0.0, frames: int = 150,
              name: str = "walk") -> MotionClip:
    """Steady gait at `speed` m/frame turning `turn` rad/frame"""
    track = _Track(skeleton)
    for _ in range(frames):
        track.walk(speed, turn)
    return track.clip(ActionType.walk, name)


def sit_clip(skeleton: Skeleton, turn: float = math.pi, approach: int = 30, turning: int = 30,
             sitting: int = 30, hold: int = 40, name: str = "sit") -> MotionClip:
    """Walk in, slow down, turn in place by `turn`, lower onto a seat and stay seated"""
    track = _Track(skeleton)
    for f in range(approach):
        track.walk(0.04 * (1.0 - f / approach))
    standing = _base_pose(skeleton)
    for f in range(turning):
        track.yaw += turn / turning
        track.emit(standing, STANDING_ROOT_HEIGHT)
    start = track.xz.copy()
    back = -np.array([math.sin(track.yaw), math.cos(track.yaw)])
    for f in range(sitting):
        s = _smoothstep((f + 1) / sitting)
        track.xz = start + 0.1 * s * back
        track.emit(_seated_pose(skeleton, s), STANDING_ROOT_HEIGHT + (SEATED_ROOT_HEIGHT - STANDING_ROOT_HEIGHT) * s)
    for _ in range(hold):
        track.emit(_seated_pose(skeleton, 1.0), SEATED_ROOT_HEIGHT)
    return track.clip(ActionType.sit, name)


def stop_clip(skeleton: Skeleton, slow: int = 30, idle: int = 60, turn: float = 0.0, name: str = "stop") -> MotionClip:
    """Decelerate from walking speed into an idle stance"""
    track = _Track(skeleton)
    for f in range(slow):
        track.walk(0.04 * (1.0 - (f + 1) / slow), turn)
    for _ in range(idle):
        track.emit(_base_pose(skeleton), STANDING_ROOT_HEIGHT)
    return track.clip(ActionType.stop, name)


def procedural_clips(skeleton: Optional[Skeleton] = None, walk_frames: int = 150,
                     turns: Sequence[float] = (-0.03, -0.015, -0.006, 0.0, 0.006, 0.015, 0.03),
                     speeds: Sequence[float] = (0.03, 0.04),
                     sit_turns: Sequence[float] = (math.pi, math.pi / 2, -math.pi / 2, 0.0),
                     stop_turns: Sequence[float] = (0.0,)) -> List[MotionClip]:
    skeleton = skeleton or default_skeleton()
    clips = []
    for speed in speeds:
        for turn in turns:
            clips.append(walk_clip(skeleton, speed, turn, walk_frames, name=f"walk_{speed:.3f}_{turn:+.3f}"))
    for turn in sit_turns:
        clips.append(sit_clip(skeleton, turn, name=f"sit_{math.degrees(turn):+.0f}"))
    for turn in stop_turns:
        clips.append(stop_clip(skeleton, turn=turn, name=f"stop_{turn:+.3f}"))
    return clips


# ---------------------------------------------------------------- scenes

def _box_faces(lo, hi) -> Tuple[List[Tuple[float, float, float]], List[Tuple[int, ...]]]:
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    vertices = [(x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1),
                (x0, y1, z0), (x1, y1, z0), (x1, y1, z1), (x0, y1, z1)]
    faces = [(1, 2, 3, 4), (5, 8, 7, 6), (1, 5, 6, 2), (2, 6, 7, 3), (3, 7, 8, 4), (4, 8, 5, 1)]
    return vertices, faces


def room_obj(size: float = 10.0, height: float = 2.5, obstacle_center=(0.0, 0.0), obstacle_size: float = 1.0,
             wall: float = 0.1) -> str:
    """Four walls around a size x size floor (no floor polygons) and one cube obstacle"""
    half = size / 2.0
    boxes = [
        ((-half - wall, 0.0, -half - wall), (half + wall, height, -half)),
        ((-half - wall, 0.0, half), (half + wall, height, half + wall)),
        ((-half - wall, 0.0, -half), (-half, height, half)),
        ((half, 0.0, -half), (half + wall, height, half)),
    ]
    if obstacle_size > 0:
        cx, cz = obstacle_center
        h = obstacle_size / 2.0
        boxes.append(((cx - h, 0.0, cz - h), (cx + h, obstacle_size, cz + h)))
    lines = ["# synthetic room"]
    offset = 0
    for lo, hi in boxes:
        vertices, faces = _box_faces(lo, hi)
        lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
        lines += ["f " + " ".join(str(offset + i) for i in face) for face in faces]
        offset += len(vertices)
    return "\n".join(lines) + "\n"


def room_scene(size: float = 10.0, obstacle_center=(0.0, 0.0), obstacle_size: float = 1.0) -> SceneWorld:
    return load_mesh(room_obj(size, obstacle_center=obstacle_center, obstacle_size=obstacle_size), name="room")


def toy_task(size: float = 10.0) -> Tuple[InitialState, ActionCue]:
    """Start in front of the obstacle, sit target behind it facing back toward the start"""
    initial = InitialState(position=[0.0, 0.0, -size * 0.3], yaw=0.0)
    cue = ActionCue(action=ActionType.sit, q_root=[0.0, SEATED_ROOT_HEIGHT, size * 0.2], r_root=math.pi)
    return initial, cue


def slab_scene(heights: Sequence[float] = (0.30, 0.32, 0.34), extent=(0.5, 0.25)) -> SceneWorld:
    """Stacked horizontal sheets at shin height; any leg standing inside their footprint crosses every sheet"""
    ex, ez = extent
    tris = []
    for y in heights:
        a, b, c, d = (-ex, y, -ez), (ex, y, -ez), (ex, y, ez), (-ex, y, ez)
        tris += [(a, b, c), (a, c, d)]
    return from_triangles(np.array(tris), name="slabs")


def slab_obj(heights: Sequence[float] = (0.30, 0.32, 0.34), extent=(0.5, 0.25)) -> str:
    """The slab scene as OBJ text, one quad per sheet"""
    ex, ez = extent
    lines = ["# stacked slabs"]
    for k, y in enumerate(heights):
        lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, z in ((-ex, -ez), (ex, -ez), (ex, ez), (-ex, ez))]
        lines.append("f " + " ".join(str(4 * k + i) for i in range(1, 5)))
    return "\n".join(lines) + "\n"


def penetration_clip(skeleton: Optional[Skeleton] = None, frames: int = 100, inside: int = 10) -> MotionClip:
    """Standing clip whose first `inside` frames stand inside the slab footprint"""
    skeleton = skeleton or default_skeleton()
    root_pos = np.zeros((frames, 3))
    root_pos[:, 1] = STANDING_ROOT_HEIGHT
    root_pos[inside:, 2] = 3.0
    rotations = np.repeat(_base_pose(skeleton)[None], frames, axis=0)
    return MotionClip(skeleton=skeleton, root_pos=root_pos, rotations=rotations, name="slab_penetration")


# ---------------------------------------------------------------- toy environment

class PointGoalEnv:
    """
    A point moves toward a random goal in the unit square. Observation is the
    goal offset; the controller heads are the same shape as the motion
    controller's (categorical type plus Gaussian continuous actions).
    """

    observation_dim = 2
    type_count = 3
    continuous_dim = 2

    def __init__(self, max_frames: int = 40, step: float = 0.1, radius: float = 0.1):
        self.max_frames = max_frames
        self.step_size = step
        self.radius = radius
        self.position = np.zeros(2)
        self.goal = np.zeros(2)
        self.frame = 0

    def observe(self) -> np.ndarray:
        return self.goal - self.position

    def reset(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng()
        self.position = np.zeros(2)
        self.goal = rng.uniform(-1.0, 1.0, size=2)
        self.frame = 0
        return self.observe()

    def step(self, type_index: int, u: np.ndarray, type_probs=None) -> StepResult:
        before = float(np.linalg.norm(self.goal - self.position))
        self.position = self.position + self.step_size * np.tanh(np.asarray(u, dtype=np.float64)[:2])
        self.frame += 1
        after = float(np.linalg.norm(self.goal - self.position))
        reward = (before - after) / self.step_size
        success = after < self.radius
        if success:
            reward += 1.0
        truncated = not success and self.frame >= self.max_frames
        return StepResult(self.observe(), reward, success, truncated, {"distance": after},
                          "success" if success else None, success)


# ---------------------------------------------------------------- workspace

def write_workspace(root: Union[str, Path], skeleton: Optional[Skeleton] = None, clips: Optional[List[MotionClip]] = None,
                    config: Optional[RunConfig] = None) -> Dict[str, Path]:
    """Lay out clips as BVH, the room as OBJ, a cue file and a run config under `root`"""
    root = Path(root)
    skeleton = skeleton or default_skeleton()
    clips = clips if clips is not None else procedural_clips(skeleton)
    clips_dir = root / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        save_bvh(clip, clips_dir / f"{clip.name}.bvh")

    skeleton_path = root / "skeleton.json"
    skeleton.save(skeleton_path)
    scene_path = root / "room.obj"
    scene_path.write_text(room_obj())
    initial, cue = toy_task()
    cue_path = root / "cue.json"
    cue_path.write_text(CueFile(action=cue, targets=[cue], initial=initial).model_dump_json(indent=2))

    config = config or RunConfig()
    config.paths.clips_dir = str(clips_dir)
    config.paths.skeleton_file = str(skeleton_path)
    config.paths.scene_mesh = str(scene_path)
    config.paths.cue_file = str(cue_path)
    config.paths.output_dir = str(root / "runs")
    config_path = root / "run.json"
    config_path.write_text(json.dumps(config.model_dump(mode="json"), indent=2))
    logger.info(f"Wrote fixture workspace with {len(clips)} clips to {root}")
    return {"root": root, "clips": clips_dir, "skeleton": skeleton_path, "scene": scene_path,
            "cue": cue_path, "config": config_path}

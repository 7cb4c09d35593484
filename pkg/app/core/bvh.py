"""BVH (HIERARCHY / MOTION) reading and writing."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from app.core.errors import ParseError
from app.core.motion import MotionClip, TARGET_FRAME_RATE, resample
from app.core.skeleton import Skeleton
from app.models.base import ActionType

logger = logging.getLogger(__name__)

_AXES = {"Xrotation": "X", "Yrotation": "Y", "Zrotation": "Z"}
_POSITIONS = ("Xposition", "Yposition", "Zposition")


@dataclass
class _JointDecl:
    name: str
    parent: int
    offset: Tuple[float, float, float]
    channels: List[str]


class _Tokens:
    def __init__(self, text: str):
        self.items: List[Tuple[str, int]] = []
        for number, line in enumerate(text.splitlines(), start=1):
            for token in line.split():
                self.items.append((token, number))
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.items[self.pos][0] if self.pos < len(self.items) else None

    @property
    def line(self) -> int:
        if not self.items:
            return 1
        return self.items[min(self.pos, len(self.items) - 1)][1]

    def next(self) -> str:
        if self.pos >= len(self.items):
            raise ParseError("unexpected end of file", self.line)
        token = self.items[self.pos][0]
        self.pos += 1
        return token

    def expect(self, value: str):
        token = self.next()
        if token != value:
            raise ParseError(f"expected '{value}', found '{token}'", self.items[self.pos - 1][1])

    def number(self) -> float:
        token = self.next()
        try:
            return float(token)
        except ValueError:
            raise ParseError(f"expected a number, found '{token}'", self.items[self.pos - 1][1])


def _parse_joint(tokens: _Tokens, joints: List[_JointDecl], parent: int):
    name = tokens.next()
    tokens.expect("{")
    tokens.expect("OFFSET")
    offset = (tokens.number(), tokens.number(), tokens.number())
    channels: List[str] = []
    if tokens.peek() == "CHANNELS":
        tokens.next()
        count_line = tokens.line
        count = int(tokens.number())
        channels = [tokens.next() for _ in range(count)]
        for c in channels:
            if c not in _AXES and c not in _POSITIONS:
                raise ParseError(f"unknown channel '{c}'", count_line)
    index = len(joints)
    joints.append(_JointDecl(name, parent, offset, channels))
    while True:
        token = tokens.next()
        if token == "}":
            return
        if token == "JOINT":
            _parse_joint(tokens, joints, index)
        elif token == "End":
            tokens.expect("Site")
            tokens.expect("{")
            tokens.expect("OFFSET")
            tokens.number(), tokens.number(), tokens.number()
            tokens.expect("}")
        else:
            raise ParseError(f"unexpected token '{token}' in joint {name}", tokens.items[tokens.pos - 1][1])


def parse_bvh(text: str, unit_scale: float = 0.01, skeleton: Optional[Skeleton] = None,
              action: ActionType = ActionType.walk, name: str = "clip",
              target_rate: float = TARGET_FRAME_RATE) -> MotionClip:
    """
    Parse BVH text into a clip at target_rate. Lengths are multiplied by
    unit_scale. With a skeleton, joints are matched to it by name.
    """
    tokens = _Tokens(text)
    if tokens.peek() != "HIERARCHY":
        raise ParseError("missing HIERARCHY section", tokens.line)
    tokens.next()
    tokens.expect("ROOT")
    joints: List[_JointDecl] = []
    _parse_joint(tokens, joints, -1)

    if tokens.peek() != "MOTION":
        raise ParseError("missing MOTION section", tokens.line)
    tokens.next()
    tokens.expect("Frames:")
    frame_count_line = tokens.line
    frame_count = int(tokens.number())
    tokens.expect("Frame")
    tokens.expect("Time:")
    frame_time = tokens.number()
    if frame_time <= 0:
        raise ParseError("frame time must be positive", tokens.line)

    channel_count = sum(len(j.channels) for j in joints)
    values = tokens.items[tokens.pos:]
    if len(values) != frame_count * channel_count:
        line = values[-1][1] if values else frame_count_line
        raise ParseError(
            f"expected {frame_count} frames x {channel_count} channels, found {len(values)} values", line)
    try:
        data = np.array([float(v) for v, _ in values], dtype=np.float64).reshape(frame_count, channel_count)
    except ValueError as e:
        raise ParseError(f"non-numeric motion value: {e}", frame_count_line)

    parsed = Skeleton(
        names=[j.name for j in joints],
        parents=[j.parent for j in joints],
        offsets=np.array([j.offset for j in joints]) * unit_scale,
        end_effectors=[],
        box_nodes=[],
    )
    root_pos = np.zeros((frame_count, 3))
    rotations = np.zeros((frame_count, len(joints), 3))
    column = 0
    for j, decl in enumerate(joints):
        order = ""
        rot_columns = []
        for c in decl.channels:
            if c in _POSITIONS:
                if j == 0:
                    root_pos[:, _POSITIONS.index(c)] = data[:, column] * unit_scale
            else:
                order += _AXES[c]
                rot_columns.append(column)
            column += 1
        if order and frame_count:
            angles = data[:, rot_columns]
            rotations[:, j] = Rotation.from_euler(order, angles, degrees=True).as_rotvec()
    if not any(c in _POSITIONS for c in joints[0].channels):
        root_pos[:] = parsed.offsets[0]

    if skeleton is not None:
        try:
            order = [parsed.names.index(n) for n in skeleton.names]
        except ValueError as e:
            raise ParseError(f"BVH joints do not match the skeleton definition: {e}")
        rotations = rotations[:, order]
        target = skeleton
    else:
        target = parsed

    clip = MotionClip(skeleton=target, root_pos=root_pos, rotations=rotations,
                      frame_rate=1.0 / frame_time, action=action, name=name)
    return resample(clip, target_rate)


def load_bvh(path: Union[str, Path], **kwargs) -> MotionClip:
    path = Path(path)
    kwargs.setdefault("name", path.stem)
    return parse_bvh(path.read_text(), **kwargs)


def _fmt(values) -> str:
    return " ".join(f"{v:.10f}" for v in values)


def write_bvh(clip: MotionClip, unit_scale: float = 0.01) -> str:
    """Serialize with ZXY Euler channels, joints in skeleton order"""
    skeleton = clip.skeleton
    lines = ["HIERARCHY"]

    def emit(j: int, depth: int):
        pad = "  " * depth
        keyword = "ROOT" if j == 0 else "JOINT"
        lines.append(f"{pad}{keyword} {skeleton.names[j]}")
        lines.append(f"{pad}{{")
        lines.append(f"{pad}  OFFSET {_fmt(skeleton.offsets[j] / unit_scale)}")
        if j == 0:
            lines.append(f"{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation")
        else:
            lines.append(f"{pad}  CHANNELS 3 Zrotation Xrotation Yrotation")
        children = skeleton.children(j)
        for c in children:
            emit(c, depth + 1)
        if not children:
            lines.append(f"{pad}  End Site")
            lines.append(f"{pad}  {{")
            lines.append(f"{pad}    OFFSET {_fmt([0.0, 0.0, 0.0])}")
            lines.append(f"{pad}  }}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    # DFS emission order differs from skeleton order when joints are not listed depth-first
    order: List[int] = []

    def visit(j: int):
        order.append(j)
        for c in skeleton.children(j):
            visit(c)

    visit(0)
    lines.append("MOTION")
    lines.append(f"Frames: {len(clip)}")
    lines.append(f"Frame Time: {1.0 / clip.frame_rate:.10f}")
    euler = Rotation.from_rotvec(clip.rotations.reshape(-1, 3)).as_euler("ZXY", degrees=True)
    euler = euler.reshape(len(clip), len(skeleton), 3)
    for t in range(len(clip)):
        row = list(clip.root_pos[t] / unit_scale)
        for j in order:
            row.extend(euler[t, j])
        lines.append(_fmt(row))
    return "\n".join(lines) + "\n"


def save_bvh(clip: MotionClip, path: Union[str, Path], unit_scale: float = 0.01) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(write_bvh(clip, unit_scale))
    logger.info(f"Wrote {len(clip)} frames to {path}")
    return path

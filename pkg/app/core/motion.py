"""Postures, clips, forward kinematics and foot-contact labelling."""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from app.core import rotations as rot
from app.core.skeleton import Skeleton
from app.models.base import ActionType, ContactConfig

logger = logging.getLogger(__name__)

TARGET_FRAME_RATE = 30.0


@dataclass
class Posture:
    """Root position (m) plus local axis-angle rotations; row 0 is the root orientation"""
    root_pos: np.ndarray
    rotations: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.root_pos, self.rotations.reshape(-1)])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Posture":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3].copy(), v[3:].reshape(-1, 3).copy())

    def copy(self) -> "Posture":
        return Posture(self.root_pos.copy(), self.rotations.copy())


@dataclass
class MotionClip:
    skeleton: Skeleton
    root_pos: np.ndarray  # (T, 3)
    rotations: np.ndarray  # (T, J+1, 3)
    frame_rate: float = TARGET_FRAME_RATE
    action: ActionType = ActionType.walk
    contacts: Optional[np.ndarray] = None  # (T, 2) left/right in {0, 0.5, 1}
    name: str = "clip"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64).reshape(-1, 3)
        frames = len(self.root_pos)
        joints = -1 if frames else len(self.skeleton)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(frames, joints, 3)
        if self.rotations.shape[1] != len(self.skeleton):
            raise ValueError(f"clip has {self.rotations.shape[1]} joints, skeleton has {len(self.skeleton)}")
        if not np.all(np.isfinite(self.rotations)):
            raise ValueError("clip contains non-finite rotations")

    def __len__(self):
        return self.root_pos.shape[0]

    def posture(self, t: int) -> Posture:
        return Posture(self.root_pos[t].copy(), self.rotations[t].copy())

    def slice(self, start: int, stop: int) -> "MotionClip":
        contacts = None if self.contacts is None else self.contacts[start:stop].copy()
        return replace(self, root_pos=self.root_pos[start:stop].copy(), rotations=self.rotations[start:stop].copy(),
                       contacts=contacts, meta=dict(self.meta))

    def copy(self) -> "MotionClip":
        return self.slice(0, len(self))

    def positions(self) -> np.ndarray:
        return forward_kinematics(self.root_pos, self.rotations, self.skeleton)[0]

    def with_contacts(self, config: ContactConfig = None, floor_height: float = 0.0) -> "MotionClip":
        config = config or ContactConfig()
        clip = self.copy()
        if len(clip) >= 2:
            clip.contacts = label_contacts(clip, config.vel_thresh, config.contact_height, config.near_height, floor_height)
        else:
            clip.contacts = np.zeros((len(clip), 2))
        return clip

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "action": self.action.value,
            "frame_rate": self.frame_rate,
            "joints": self.skeleton.names,
            "root_pos": self.root_pos.round(12).tolist(),
            "rotations": self.rotations.round(12).tolist(),
            "contacts": None if self.contacts is None else self.contacts.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict, skeleton: Skeleton) -> "MotionClip":
        contacts = data.get("contacts")
        return cls(
            skeleton=skeleton,
            root_pos=np.array(data["root_pos"]),
            rotations=np.array(data["rotations"]),
            frame_rate=data.get("frame_rate", TARGET_FRAME_RATE),
            action=ActionType(data.get("action", "walk")),
            contacts=None if contacts is None else np.array(contacts),
            name=data.get("name", "clip"),
        )

    def save_json(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_json()))


def forward_kinematics(root_pos: np.ndarray, rotations: np.ndarray, skeleton: Skeleton) -> Tuple[np.ndarray, np.ndarray]:
    """
    Global joint positions (..., J+1, 3) and orientations (..., J+1, 3, 3).
    p_child = p_parent + R_parent_global @ offset_child.
    """
    root_pos = np.asarray(root_pos, dtype=np.float64)
    local = rot.axis_angle_to_matrix(rotations)
    n = len(skeleton)
    positions = np.empty(local.shape[:-3] + (n, 3))
    globals_ = np.empty(local.shape)
    positions[..., 0, :] = root_pos
    globals_[..., 0, :, :] = local[..., 0, :, :]
    for j in range(1, n):
        p = skeleton.parents[j]
        parent_R = globals_[..., p, :, :]
        positions[..., j, :] = positions[..., p, :] + parent_R @ skeleton.offsets[j]
        globals_[..., j, :, :] = parent_R @ local[..., j, :, :]
    return positions, globals_


def label_contacts(clip: MotionClip, vel_thresh: float, contact_height: float, near_height: float,
                   floor_height: float = 0.0) -> np.ndarray:
    """Per foot per frame: 1 planted, 0.5 near the floor, 0 airborne"""
    positions = clip.positions()
    feet = positions[:, list(clip.skeleton.feet), :]  # (T, 2, 3)
    step = np.linalg.norm(np.diff(feet, axis=0), axis=-1)  # (T-1, 2)
    speed = np.concatenate([step[:1], step], axis=0)
    height = feet[..., 1] - floor_height
    labels = np.zeros(speed.shape)
    labels[height < near_height] = 0.5
    labels[(speed < vel_thresh) & (height < contact_height)] = 1.0
    return labels


def resample(clip: MotionClip, target_rate: float = TARGET_FRAME_RATE) -> MotionClip:
    """Nearest-frame decimation to target_rate"""
    if abs(clip.frame_rate - target_rate) < 1e-9:
        return clip
    if len(clip) == 0:
        return replace(clip, frame_rate=target_rate)
    count = max(int(round(len(clip) * target_rate / clip.frame_rate)), 1)
    index = np.minimum(np.round(np.arange(count) * clip.frame_rate / target_rate).astype(int), len(clip) - 1)
    contacts = None if clip.contacts is None else clip.contacts[index]
    return replace(clip, root_pos=clip.root_pos[index], rotations=clip.rotations[index],
                   frame_rate=target_rate, contacts=contacts)


def mirror(clip: MotionClip) -> MotionClip:
    """Reflect across the YZ plane and swap left/right joints"""
    perm = clip.skeleton.mirror_permutation()
    root_pos = clip.root_pos * np.array([-1.0, 1.0, 1.0])
    rotations = clip.rotations[:, perm, :] * np.array([1.0, -1.0, -1.0])
    contacts = None if clip.contacts is None else clip.contacts[:, ::-1].copy()
    return replace(clip, root_pos=root_pos, rotations=rotations, contacts=contacts,
                   name=f"{clip.name}_mirror", meta=dict(clip.meta))


def rigid_xz(root_pos: np.ndarray, root_rot: np.ndarray, yaw: float, translation_xz) -> Tuple[np.ndarray, np.ndarray]:
    """Apply a yaw about the origin then a floor-plane translation to root transforms"""
    root_pos = np.asarray(root_pos, dtype=np.float64)
    new_pos = root_pos.copy()
    new_pos[..., [0, 2]] = rot.rotate_xz(root_pos[..., [0, 2]], yaw) + np.asarray(translation_xz)
    R = rot.yaw_matrix(yaw) @ rot.axis_angle_to_matrix(root_rot)
    return new_pos, rot.matrix_to_axis_angle(R)


def transform_clip(clip: MotionClip, yaw: float, translation_xz) -> MotionClip:
    root_pos, root_rot = rigid_xz(clip.root_pos, clip.rotations[:, 0], yaw, translation_xz)
    rotations = clip.rotations.copy()
    rotations[:, 0] = root_rot
    return replace(clip, root_pos=root_pos, rotations=rotations,
                   contacts=None if clip.contacts is None else clip.contacts.copy())


def concatenate(clips, name: str = "motion") -> MotionClip:
    first = clips[0]
    contacts = None
    if all(c.contacts is not None for c in clips):
        contacts = np.concatenate([c.contacts for c in clips])
    return replace(first, root_pos=np.concatenate([c.root_pos for c in clips]),
                   rotations=np.concatenate([c.rotations for c in clips]), contacts=contacts, name=name)

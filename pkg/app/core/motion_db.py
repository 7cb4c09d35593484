"""
Motion database: flattened clip frames, per-frame matching features,
normalization statistics and per-action partitions with a KD-tree each.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from app.core import checkpoint
from app.core import rotations as rot
from app.core.errors import EmptyDatabase, EmptyPartition, FeatureUnavailable, ParseError
from app.core.motion import MotionClip, forward_kinematics, mirror
from app.core.skeleton import Skeleton
from app.models.base import ACTION_ORDER, ActionType, DatabaseConfig, FeatureWeights

logger = logging.getLogger(__name__)

LOCOMOTION = (ActionType.walk,)
STOP_SPEED = 0.005  # m/frame


# ---------------------------------------------------------------- feature layout

@dataclass(frozen=True)
class FeatureLayout:
    """Column blocks of one partition's feature vector"""
    effector_count: int
    future_count: int

    @property
    def positions(self) -> slice:
        return slice(0, 3 * self.effector_count)

    @property
    def velocities(self) -> slice:
        return slice(3 * self.effector_count, 6 * self.effector_count)

    @property
    def up(self) -> slice:
        start = 6 * self.effector_count
        return slice(start, start + 3)

    @property
    def contacts(self) -> slice:
        start = 6 * self.effector_count + 3
        return slice(start, start + 2)

    @property
    def future(self) -> slice:
        start = 6 * self.effector_count + 5
        return slice(start, start + 4 * self.future_count)

    @property
    def pose_dim(self) -> int:
        return 6 * self.effector_count + 5

    @property
    def dim(self) -> int:
        return self.pose_dim + 4 * self.future_count

    def transition_mask(self) -> np.ndarray:
        """Columns compared by the transition cost: positions, up-vector, contacts"""
        mask = np.zeros(self.dim, dtype=bool)
        mask[self.positions] = mask[self.up] = mask[self.contacts] = True
        return mask

    def velocity_mask(self) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        mask[self.velocities] = True
        return mask


def _effector_weight(name: str, weights: FeatureWeights) -> float:
    if "head" in name:
        return weights.head
    if "hand" in name:
        return weights.hands
    if "foot" in name:
        return weights.feet
    return 1.0


def feature_weights(layout: FeatureLayout, skeleton: Skeleton, weights: FeatureWeights) -> np.ndarray:
    w = np.empty(layout.dim)
    per_effector = [_effector_weight(skeleton.names[j], weights) for j in skeleton.end_effectors]
    w[layout.positions] = np.repeat(per_effector, 3)
    w[layout.velocities] = weights.velocities
    w[layout.up] = weights.up
    w[layout.contacts] = weights.contacts
    w[layout.future] = weights.future
    return w


# ---------------------------------------------------------------- feature blocks

def _rotate_points(xz: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """Rotate (..., P, 2) by -yaw given per leading index"""
    return rot.rotate_xz(xz, -np.asarray(yaw)[..., None])


def pose_features(positions_prev: np.ndarray, positions: np.ndarray, root_R: np.ndarray,
                  contacts: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """
    Person-centric end-effector positions and 1-frame velocities, up-vector and
    contacts. Accepts a leading frame axis on every argument.
    """
    ee = list(skeleton.end_effectors)
    yaw = rot.heading_of(root_R)
    root = positions[..., 0, :]
    p = positions[..., ee, :]
    p_prev = positions_prev[..., ee, :]

    local = p.copy()
    local[..., [0, 2]] = _rotate_points(p[..., [0, 2]] - root[..., None, [0, 2]], yaw)
    vel = p - p_prev
    vel[..., [0, 2]] = _rotate_points(vel[..., [0, 2]], yaw)
    up = root_R[..., :, 1].copy()
    up[..., [0, 2]] = rot.rotate_xz(up[..., [0, 2]], -yaw)
    lead = positions.shape[:-2]
    return np.concatenate([
        local.reshape(lead + (-1,)),
        vel.reshape(lead + (-1,)),
        up,
        np.asarray(contacts, dtype=np.float64).reshape(lead + (2,)),
    ], axis=-1)


def future_entry(root_pos: np.ndarray, yaw: np.ndarray, future_pos: np.ndarray, future_yaw: np.ndarray) -> np.ndarray:
    """(x, z, cos, sin) of a future root transform in the current person frame"""
    offset = rot.rotate_xz(np.asarray(future_pos)[..., [0, 2]] - np.asarray(root_pos)[..., [0, 2]], -np.asarray(yaw))
    delta = np.asarray(future_yaw) - np.asarray(yaw)
    return np.concatenate([offset, np.cos(delta)[..., None], np.sin(delta)[..., None]], axis=-1)


def completion_frame(clip: MotionClip, config: DatabaseConfig, floor_height: float = 0.0) -> int:
    """Frame at which an action clip reaches its goal pose"""
    if clip.action == ActionType.sit:
        h = clip.root_pos[:, 1] - floor_height
        span = config.sit_stable_frames
        for f in range(0, len(clip) - span + 1):
            window = h[f:f + span]
            if np.all(window < config.sit_height_threshold) and np.ptp(window) < 0.01:
                return f
        return len(clip) - 1
    if clip.action == ActionType.stop:
        step = np.linalg.norm(np.diff(clip.root_pos[:, [0, 2]], axis=0), axis=1)
        span = config.sit_stable_frames
        for f in range(0, len(step) - span + 1):
            if np.all(step[f:f + span] < STOP_SPEED):
                return f
        return len(clip) - 1
    raise ValueError("locomotion clips have no completion frame")


def future_frames(action: ActionType, frame: int, length: int, config: DatabaseConfig,
                  completion: Optional[int] = None) -> List[int]:
    """Clip frames read by the future block of `frame`; FeatureUnavailable past the clip end"""
    if action in LOCOMOTION:
        frames = [frame + o for o in config.locomotion_offsets]
    else:
        frames = [max(completion if completion is not None else length - 1, frame)]
    if frame < 1 or frame + 1 >= length or frames[-1] >= length:
        raise FeatureUnavailable(f"future of frame {frame} lies outside a {length}-frame clip")
    return frames


def clip_features(clip: MotionClip, config: DatabaseConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Raw features for every indexable frame of a clip and the frame numbers they belong to"""
    positions, orientations = forward_kinematics(clip.root_pos, clip.rotations, clip.skeleton)
    root_R = orientations[:, 0]
    yaw = rot.heading_of(root_R)
    completion = None if clip.action in LOCOMOTION else completion_frame(clip, config)

    frames, futures = [], []
    for k in range(len(clip)):
        try:
            futures.append(future_frames(clip.action, k, len(clip), config, completion))
        except FeatureUnavailable:
            continue
        frames.append(k)
    if not frames:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)

    frames = np.array(frames, dtype=np.int64)
    futures = np.array(futures, dtype=np.int64)  # (n, F)
    pose = pose_features(positions[frames - 1], positions[frames], root_R[frames], clip.contacts[frames], clip.skeleton)
    future = future_entry(
        clip.root_pos[frames][:, None, :], yaw[frames][:, None],
        clip.root_pos[futures], yaw[futures],
    ).reshape(len(frames), -1)
    return np.concatenate([pose, future], axis=1), frames


# ---------------------------------------------------------------- database

@dataclass
class Partition:
    action: ActionType
    layout: FeatureLayout
    indices: np.ndarray  # global frame ids
    features: np.ndarray  # raw (n, d)
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.indices)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    @cached_property
    def normalized(self) -> np.ndarray:
        return self.normalize(self.features)

    @cached_property
    def scaled(self) -> np.ndarray:
        """Normalized features with the weights folded in (the search space)"""
        return self.normalized * self.weights

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.scaled)


def _fit_stats(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


@dataclass
class MotionDatabase:
    skeleton: Skeleton
    clips: List[MotionClip]
    config: DatabaseConfig
    root_pos: np.ndarray  # (K, 3)
    rotations: np.ndarray  # (K, J+1, 3)
    contacts: np.ndarray  # (K, 2)
    clip_id: np.ndarray  # (K,)
    clip_frame: np.ndarray  # (K,)
    clip_start: np.ndarray  # (clips,)
    partitions: Dict[ActionType, Partition]

    @property
    def frame_count(self) -> int:
        return len(self.root_pos)

    def partition(self, action: ActionType) -> Partition:
        part = self.partitions.get(ActionType(action))
        if part is None or len(part) == 0:
            raise EmptyPartition(f"no indexable frames for action '{ActionType(action).value}'")
        return part

    def clip_end(self, index: int) -> int:
        """Global index of the last frame of the clip holding `index`"""
        c = int(self.clip_id[index])
        return int(self.clip_start[c]) + len(self.clips[c]) - 1

    def action_of(self, index: int) -> ActionType:
        return self.clips[int(self.clip_id[index])].action

    def summary(self) -> Dict[str, int]:
        return {a.value: len(p) for a, p in self.partitions.items()}


def _assemble(skeleton: Skeleton, clips: List[MotionClip], config: DatabaseConfig,
              stored: Optional[Dict[ActionType, Tuple[np.ndarray, np.ndarray]]] = None) -> MotionDatabase:
    starts = np.cumsum([0] + [len(c) for c in clips])[:-1].astype(np.int64)
    root_pos = np.concatenate([c.root_pos for c in clips])
    rotations = np.concatenate([c.rotations for c in clips])
    contacts = np.concatenate([c.contacts for c in clips])
    clip_id = np.concatenate([np.full(len(c), i, dtype=np.int64) for i, c in enumerate(clips)])
    clip_frame = np.concatenate([np.arange(len(c), dtype=np.int64) for c in clips])

    partitions: Dict[ActionType, Partition] = {}
    for action in ACTION_ORDER:
        members = [i for i, c in enumerate(clips) if c.action == action]
        if not members:
            continue
        future_count = len(config.locomotion_offsets) if action in LOCOMOTION else 1
        layout = FeatureLayout(len(skeleton.end_effectors), future_count)
        if stored is not None and action in stored:
            features, indices = stored[action]
        else:
            blocks, index_blocks = [], []
            for i in members:
                feats, frames = clip_features(clips[i], config)
                if len(frames):
                    blocks.append(feats)
                    index_blocks.append(starts[i] + frames)
            features = np.concatenate(blocks) if blocks else np.zeros((0, layout.dim))
            indices = np.concatenate(index_blocks) if index_blocks else np.zeros(0, dtype=np.int64)
        if len(indices) == 0:
            logger.warning(f"No indexable frames for action '{action.value}'; clips are shorter than the future horizon")
            mean, std = np.zeros(layout.dim), np.ones(layout.dim)
        else:
            mean, std = _fit_stats(features)
        partitions[action] = Partition(
            action=action, layout=layout, indices=indices, features=features, mean=mean, std=std,
            weights=feature_weights(layout, skeleton, config.weights),
        )
    return MotionDatabase(skeleton, clips, config, root_pos, rotations, contacts, clip_id, clip_frame, starts, partitions)


def build_database(clips: Sequence[MotionClip], config: DatabaseConfig = None) -> MotionDatabase:
    """Label contacts, add mirrored action clips, compute features and fit per-partition statistics"""
    config = config or DatabaseConfig()
    clips = [c for c in clips if len(c)]
    if not clips:
        raise EmptyDatabase("no motion clips to index")
    skeleton = clips[0].skeleton
    prepared: List[MotionClip] = []
    for clip in clips:
        if clip.contacts is None:
            clip = clip.with_contacts(config.contacts)
        prepared.append(clip)
        if clip.action in config.mirror_actions and clip.skeleton.mirror_pairs:
            prepared.append(mirror(clip))
    db = _assemble(skeleton, prepared, config)
    logger.info(f"Built motion database: {db.frame_count} frames, partitions {db.summary()}")
    return db


# ---------------------------------------------------------------- cache

def save_database(db: MotionDatabase, path: Union[str, Path]) -> Path:
    arrays: Dict[str, np.ndarray] = {}
    for i, clip in enumerate(db.clips):
        arrays[f"clip.{i}.root_pos"] = clip.root_pos
        arrays[f"clip.{i}.rotations"] = clip.rotations
        arrays[f"clip.{i}.contacts"] = clip.contacts
    for action, part in db.partitions.items():
        arrays[f"partition.{action.value}.features"] = part.features
        arrays[f"partition.{action.value}.indices"] = part.indices.astype(np.float64)
    meta = {
        "kind": "motion_database",
        "skeleton": db.skeleton.to_dict(),
        "config": db.config.model_dump(mode="json"),
        "clips": [{"name": c.name, "action": c.action.value, "frame_rate": c.frame_rate} for c in db.clips],
        "partitions": [a.value for a in db.partitions],
    }
    return checkpoint.save(path, arrays, meta)


def load_database(path: Union[str, Path]) -> MotionDatabase:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "motion_database":
        raise ParseError(f"{path} is not a motion database cache")
    skeleton = Skeleton.from_dict(meta["skeleton"])
    config = DatabaseConfig.model_validate(meta["config"])
    clips = []
    for i, info in enumerate(meta["clips"]):
        clips.append(MotionClip(
            skeleton=skeleton,
            root_pos=arrays[f"clip.{i}.root_pos"],
            rotations=arrays[f"clip.{i}.rotations"],
            contacts=arrays[f"clip.{i}.contacts"],
            frame_rate=info["frame_rate"],
            action=ActionType(info["action"]),
            name=info["name"],
        ))
    stored = {}
    for value in meta["partitions"]:
        dim_features = arrays[f"partition.{value}.features"]
        stored[ActionType(value)] = (dim_features, arrays[f"partition.{value}.indices"].astype(np.int64))
    db = _assemble(skeleton, clips, config, stored)
    logger.info(f"Loaded motion database from {path}: {db.frame_count} frames")
    return db

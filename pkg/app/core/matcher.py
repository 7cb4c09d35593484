"""
Motion synthesizer: query features, weighted nearest-neighbour search over a
database partition, posture offsets and the per-frame playback loop.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core import rotations as rot
from app.core.errors import ConfigError
from app.core.motion import Posture, forward_kinematics, rigid_xz
from app.core.motion_db import LOCOMOTION, MotionDatabase, Partition, future_entry, future_frames, \
    completion_frame, pose_features
from app.core.skeleton import Skeleton
from app.models.base import ActionType, SynthesizerConfig

logger = logging.getLogger(__name__)

TOP_K_DUMP = 5


def posture_heading(posture: Posture) -> float:
    return float(rot.heading_of(rot.axis_angle_to_matrix(posture.rotations[0])))


# ---------------------------------------------------------------- features

def extract_feature(m_prev: Posture, m_t: Posture, contacts: np.ndarray, future: np.ndarray,
                    skeleton: Skeleton, action: ActionType) -> np.ndarray:
    """
    Query feature. `future` holds (x, z, cos, sin) rows in the person frame of
    m_t; action partitions with a single future entry read the last row.
    """
    future = np.asarray(future, dtype=np.float64).reshape(-1, 4)
    if action not in LOCOMOTION:
        future = future[-1:]
    pos_prev, _ = forward_kinematics(m_prev.root_pos, m_prev.rotations, skeleton)
    pos, orient = forward_kinematics(m_t.root_pos, m_t.rotations, skeleton)
    pose = pose_features(pos_prev, pos, orient[0], contacts, skeleton)
    return np.concatenate([pose, future.reshape(-1)])


def database_feature(db: MotionDatabase, index: int) -> np.ndarray:
    """Feature of a database frame read from its clip's real future; FeatureUnavailable near the clip end"""
    clip = db.clips[int(db.clip_id[index])]
    k = int(db.clip_frame[index])
    completion = None if clip.action in LOCOMOTION else completion_frame(clip, db.config)
    frames = future_frames(clip.action, k, len(clip), db.config, completion)
    prev, cur = clip.posture(k - 1), clip.posture(k)
    yaw = posture_heading(cur)
    future = np.stack([
        future_entry(cur.root_pos, yaw, clip.root_pos[f], posture_heading(clip.posture(f))) for f in frames
    ])
    return extract_feature(prev, cur, clip.contacts[k], future, db.skeleton, clip.action)


# ---------------------------------------------------------------- search

def weighted_distances(part: Partition, x: np.ndarray, rows: Optional[np.ndarray] = None) -> np.ndarray:
    q = part.normalize(x)
    feats = part.normalized if rows is None else part.normalized[rows]
    return np.sum(((feats - q) * part.weights) ** 2, axis=1)


def search(x: np.ndarray, db: MotionDatabase, action: ActionType, backend: str = "tree") -> Tuple[int, float]:
    """
    Best-matching global frame index for a raw query feature and its weighted
    squared distance. Ties resolve to the lowest partition position, and both
    backends return the same frame.
    """
    part = db.partition(action)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (part.layout.dim,):
        raise ConfigError(f"query has {x.shape} entries, partition '{part.action.value}' expects {part.layout.dim}")
    if backend == "brute":
        d = weighted_distances(part, x)
        best = int(np.argmin(d))
        return int(part.indices[best]), float(d[best])
    if backend != "tree":
        raise ConfigError(f"unknown search backend '{backend}'")

    q = part.normalize(x) * part.weights
    nearest, _ = part.tree.query(q, k=1)
    radius = float(nearest) * (1.0 + 1e-9) + 1e-12
    rows = np.array(sorted(part.tree.query_ball_point(q, radius)), dtype=np.int64)
    if len(rows) == 0:
        rows = np.arange(len(part))
    d = weighted_distances(part, x, rows)
    best = int(np.argmin(d))
    return int(part.indices[rows[best]]), float(d[best])


def top_candidates(x: np.ndarray, db: MotionDatabase, action: ActionType, k: int = TOP_K_DUMP) -> List[Tuple[int, float]]:
    part = db.partition(action)
    d = weighted_distances(part, x)
    order = np.argsort(d, kind="stable")[:k]
    return [(int(part.indices[i]), float(d[i])) for i in order]


def transition_costs(x: np.ndarray, db: MotionDatabase, action: ActionType, index: int) -> Tuple[float, float]:
    """Weighted pose (positions, up, contacts) and velocity distances between a query and a matched frame"""
    part = db.partition(action)
    row = int(np.searchsorted(part.indices, index))
    diff = (part.normalize(x) - part.normalized[row]) * part.weights
    sq = diff ** 2
    return float(sq[part.layout.transition_mask()].sum()), float(sq[part.layout.velocity_mask()].sum())


# ---------------------------------------------------------------- offsets

def apply_offset(posture: Posture, offset: np.ndarray, joints: Sequence[int], clamp: float) -> Posture:
    """Compose clamped axis-angle deltas onto the listed joints; every other entry passes through untouched"""
    offset = np.asarray(offset, dtype=np.float64).reshape(len(joints), 3)
    out = posture.copy()
    deltas = rot.clamp_norm(offset, clamp)
    for j, delta in zip(joints, deltas):
        if np.any(delta != 0.0):
            out.rotations[j] = rot.compose_axis_angle(posture.rotations[j], delta)
    return out


# ---------------------------------------------------------------- playback

@dataclass
class SynthesizerState:
    cursor: Optional[int]  # global database frame currently shown
    frames_since_search: int
    posture: Posture  # m_t
    previous: Posture  # m_{t-1}
    raw: Posture  # searched posture before offsets
    contacts: np.ndarray
    action: ActionType = ActionType.walk
    rebase: Tuple[float, Tuple[float, float]] = (0.0, (0.0, 0.0))  # yaw, XZ translation
    frame: int = 0


@dataclass
class StepInfo:
    searched: bool = False
    distance: float = 0.0
    discarded: bool = False
    transition_cost: float = 0.0
    velocity_cost: float = 0.0
    candidates: List[Tuple[int, float]] = field(default_factory=list)


class MotionSynthesizer:
    def __init__(self, db: MotionDatabase, config: SynthesizerConfig = None):
        self.db = db
        self.config = config or SynthesizerConfig()
        self.skeleton = db.skeleton
        self.offset_joints = self.skeleton.indices(self.config.offset_joints)
        self._dump_path = Path(self.config.debug_dump_path) if self.config.debug_dump_path else None
        if self._dump_path is not None:
            self._dump_path.parent.mkdir(parents=True, exist_ok=True)

    def _db_posture(self, index: int) -> Posture:
        return Posture(self.db.root_pos[index].copy(), self.db.rotations[index].copy())

    def _rebased(self, index: int, rebase) -> Posture:
        yaw, translation = rebase
        p = self._db_posture(index)
        p.root_pos, p.rotations[0] = rigid_xz(p.root_pos, p.rotations[0], yaw, translation)
        return p

    def _rebase_onto(self, index: int, target: Posture):
        """Rigid XZ + yaw map taking database frame `index` onto the target root"""
        source = self._db_posture(index)
        yaw = posture_heading(target) - posture_heading(source)
        moved = rot.rotate_xz(source.root_pos[[0, 2]], yaw)
        translation = target.root_pos[[0, 2]] - moved
        return float(yaw), (float(translation[0]), float(translation[1]))

    def initial_state(self, position, yaw: float, action: ActionType = ActionType.walk) -> SynthesizerState:
        """Start from the first indexed frame of `action`, placed at `position` facing `yaw`; the first step searches"""
        part = self.db.partition(action)
        index = int(part.indices[0])
        source = self._db_posture(index)
        target = source.copy()
        target.root_pos[[0, 2]] = np.asarray(position, dtype=np.float64)[[0, 2]]
        target.rotations[0] = rot.matrix_to_axis_angle(
            rot.yaw_matrix(yaw - posture_heading(source)) @ rot.axis_angle_to_matrix(source.rotations[0]))
        rebase = self._rebase_onto(index, target)
        posture = self._rebased(index, rebase)
        return SynthesizerState(
            cursor=index, frames_since_search=self.config.search_period, posture=posture,
            previous=posture.copy(), raw=posture.copy(), contacts=self.db.contacts[index].copy(),
            action=action, rebase=rebase,
        )

    def _needs_search(self, state: SynthesizerState, action: ActionType) -> bool:
        return (
            state.cursor is None
            or state.frames_since_search >= self.config.search_period
            or action != state.action
            or state.cursor + 1 > self.db.clip_end(state.cursor)
        )

    def step(self, state: SynthesizerState, action: ActionType, future: np.ndarray,
             offset: Optional[np.ndarray] = None) -> Tuple[SynthesizerState, StepInfo]:
        info = StepInfo()
        action = ActionType(action)
        if self._needs_search(state, action):
            x = extract_feature(state.previous, state.posture, state.contacts, future, self.skeleton, action)
            index, distance = search(x, self.db, action, self.config.backend)
            if (action != state.action and action not in LOCOMOTION
                    and distance > self.config.transition_max_distance):
                logger.debug(f"Discarding switch to {action.value}: match distance {distance:.3f}")
                result, retry = self.step(state, state.action, future, offset)
                retry.discarded = True
                return result, retry
            info.searched, info.distance = True, distance
            info.transition_cost, info.velocity_cost = transition_costs(x, self.db, action, index)
            if self._dump_path is not None:
                info.candidates = top_candidates(x, self.db, action)
                self._dump(state, action, x, info.candidates)
            rebase = self._rebase_onto(index, state.posture)
            next_index = index + 1
            since = 1
        else:
            rebase = state.rebase
            next_index = state.cursor + 1
            since = state.frames_since_search + 1

        raw = self._rebased(next_index, rebase)
        posture = raw
        if self.config.use_offset and offset is not None:
            posture = apply_offset(raw, offset, self.offset_joints, self.config.offset_clamp)
        new_state = replace(
            state, cursor=next_index, frames_since_search=since, posture=posture, previous=state.posture,
            raw=raw, contacts=self.db.contacts[next_index].copy(), action=action, rebase=rebase,
            frame=state.frame + 1,
        )
        return new_state, info

    def _dump(self, state: SynthesizerState, action: ActionType, x: np.ndarray, candidates):
        new_file = not self._dump_path.exists()
        with self._dump_path.open("a", newline="") as handle:
            writer = csv.writer(handle)
            if new_file:
                writer.writerow(["frame", "action", "query"] + [f"top{i}_{k}" for i in range(TOP_K_DUMP) for k in ("index", "distance")])
            row = [state.frame, action.value, ";".join(f"{v:.6g}" for v in x)]
            for index, distance in candidates:
                row += [index, f"{distance:.6g}"]
            writer.writerow(row)


def step(state: SynthesizerState, action: ActionType, future: np.ndarray, synthesizer: MotionSynthesizer,
         offset: Optional[np.ndarray] = None) -> Tuple[SynthesizerState, StepInfo]:
    return synthesizer.step(state, action, future, offset)

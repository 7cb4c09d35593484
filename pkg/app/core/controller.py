"""
Scene-aware action controller: state assembly, action decoding, rewards,
termination and the episode loop that couples a policy to the motion
synthesizer.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np

from app.core import rotations as rot
from app.core.matcher import MotionSynthesizer, SynthesizerState, posture_heading
from app.core.motion import MotionClip, Posture, forward_kinematics
from app.core.motion_db import MotionDatabase
from app.core.scene import OccupancyGrid, SceneWorld, build_global_grid, node_intersections, person_window
from app.core.skeleton import Skeleton
from app.models.base import ACTION_ORDER, ActionType, GridConfig, RewardConfig, RunConfig, TerminationConfig
from app.models.cues import ActionCue, InitialState

logger = logging.getLogger(__name__)

FUTURE_ROWS = 3
INTER_DIM = 4 + 8 + len(ACTION_ORDER)


# ---------------------------------------------------------------- state

@dataclass
class ControllerState:
    body: np.ndarray
    occupancy: np.ndarray  # (n, n)
    grid_root: np.ndarray  # (2,)
    inter: np.ndarray
    outside: bool = False

    def vector(self) -> np.ndarray:
        return np.concatenate([self.body, self.occupancy.reshape(-1).astype(np.float64), self.grid_root, self.inter])


def state_dim(skeleton: Skeleton, n: int) -> int:
    j, e = skeleton.joint_count, len(skeleton.end_effectors)
    return 12 * j + 2 + 3 * e + n * n + 2 + INTER_DIM


def _person(points: np.ndarray, root_pos: np.ndarray, yaw: float) -> np.ndarray:
    out = np.array(points, dtype=np.float64)
    out[..., [0, 2]] = rot.rotate_xz(out[..., [0, 2]] - np.asarray(root_pos)[[0, 2]], -yaw)
    return out


def body_state(m_prev: Posture, m_t: Posture, skeleton: Skeleton) -> np.ndarray:
    r = rot.matrix_to_rot6d(rot.axis_angle_to_matrix(m_t.rotations[1:]))
    r_prev = rot.matrix_to_rot6d(rot.axis_angle_to_matrix(m_prev.rotations[1:]))
    positions, orientations = forward_kinematics(m_t.root_pos, m_t.rotations, skeleton)
    root_R = orientations[0]
    theta_up = math.acos(float(np.clip(root_R[1, 1], -1.0, 1.0)))
    yaw = float(rot.heading_of(root_R))
    effectors = _person(positions[list(skeleton.end_effectors)], m_t.root_pos, yaw)
    return np.concatenate([r.reshape(-1), (r - r_prev).reshape(-1), [theta_up, m_t.root_pos[1]], effectors.reshape(-1)])


def inter_state(m_t: Posture, cue: ActionCue) -> np.ndarray:
    """Cue in the person frame: root target (x, z, cos, sin), two feet (x, y, z, present), cue action one-hot"""
    yaw = posture_heading(m_t)
    target = _person(np.asarray(cue.q_root), m_t.root_pos, yaw)
    facing = cue.r_root - yaw
    parts = [target[0], target[2], math.cos(facing), math.sin(facing)]
    for foot in (cue.q_rfoot, cue.q_lfoot):
        if foot is None:
            parts += [0.0, 0.0, 0.0, 0.0]
        else:
            parts += list(_person(np.asarray(foot), m_t.root_pos, yaw)) + [1.0]
    one_hot = [1.0 if a == cue.action else 0.0 for a in ACTION_ORDER]
    return np.array(parts + one_hot)


def assemble_state(m_prev: Posture, m_t: Posture, scene: SceneWorld, grid: OccupancyGrid, cue: ActionCue,
                   skeleton: Skeleton, config: GridConfig) -> ControllerState:
    """
    Every part is measured in the person frame, so moving scene, posture and
    cue together by one floor rotation and translation leaves the state fixed.
    grid_root is the root's offset from the cue root target in cells. Off the
    global grid the window reads fully occupied.
    """
    root_xz = m_t.root_pos[[0, 2]]
    yaw = posture_heading(m_t)
    outside = not grid.inside(root_xz)
    if outside:
        occupancy = np.ones((config.n, config.n), dtype=np.uint8)
    else:
        occupancy = person_window(scene, root_xz, yaw, config.n, config.cell, (config.band_min, config.band_max))
    target = _person(np.asarray(cue.q_root), m_t.root_pos, yaw)
    return ControllerState(
        body=body_state(m_prev, m_t, skeleton),
        occupancy=occupancy,
        grid_root=-target[[0, 2]] / config.cell,
        inter=inter_state(m_t, cue),
        outside=outside,
    )


# ---------------------------------------------------------------- actions

@dataclass
class ControllerAction:
    type_probs: np.ndarray
    action_type: ActionType
    future: np.ndarray  # (3, 4) rows of (x, z, cos, sin)
    offset: np.ndarray  # (offset joints, 3)


def continuous_dim(offset_joint_count: int) -> int:
    return 3 * FUTURE_ROWS + 3 * offset_joint_count


def heuristic_future(m_t: Posture, cue: ActionCue, action: ActionType, offsets_frames, nominal_speed: float) -> np.ndarray:
    """
    Straight line toward the cue root at nominal speed, as (x, z, yaw) rows in
    the person frame. Walking faces along the line; cue actions face the cue.
    """
    yaw = posture_heading(m_t)
    goal = _person(np.asarray(cue.q_root), m_t.root_pos, yaw)[[0, 2]]
    distance = float(np.linalg.norm(goal))
    direction = goal / distance if distance > 1e-9 else np.zeros(2)
    walk_facing = math.atan2(direction[0], direction[1]) if distance > 1e-9 else 0.0
    rows = []
    for dt in offsets_frames:
        reach = min(nominal_speed * dt, distance)
        facing = walk_facing if action == ActionType.walk else rot.wrap_angle(cue.r_root - yaw)
        rows.append([direction[0] * reach, direction[1] * reach, float(facing)])
    return np.array(rows)


def decode_action(type_index: int, u: np.ndarray, m_t: Posture, cue: ActionCue, offsets_frames,
                  config: RunConfig, type_probs: Optional[np.ndarray] = None) -> ControllerAction:
    """Map a raw policy sample onto bounded future cues around the heuristic prior plus joint offsets"""
    u = np.asarray(u, dtype=np.float64)
    action = ACTION_ORDER[int(type_index)]
    prior = heuristic_future(m_t, cue, action, offsets_frames, config.synthesizer.nominal_speed)
    deltas = u[:3 * FUTURE_ROWS].reshape(FUTURE_ROWS, 3)
    xz = prior[:, :2] + config.ppo.future_scale * np.tanh(deltas[:, :2])
    facing = prior[:, 2] + config.ppo.yaw_scale * np.tanh(deltas[:, 2])
    future = np.concatenate([xz, np.cos(facing)[:, None], np.sin(facing)[:, None]], axis=1)
    offset = config.synthesizer.offset_clamp * np.tanh(u[3 * FUTURE_ROWS:].reshape(-1, 3))
    probs = type_probs if type_probs is not None else np.eye(len(ACTION_ORDER))[int(type_index)]
    return ControllerAction(type_probs=probs, action_type=action, future=future, offset=offset)


# ---------------------------------------------------------------- rewards

def r_collision(rho: np.ndarray, weights: np.ndarray, sigma: float) -> float:
    return math.exp(-float(np.dot(weights, rho)) / sigma ** 2)


def r_position(root_xz, target_xz, sigma: float) -> float:
    d = np.asarray(root_xz, dtype=np.float64) - np.asarray(target_xz, dtype=np.float64)
    return math.exp(-float(d @ d) / sigma ** 2)


def r_velocity(speed: float, sigma_th: float, sigma_vel: float) -> float:
    return 1.0 if speed >= sigma_th else sigma_vel * speed ** 2


def r_interaction(points: np.ndarray, targets: np.ndarray, sigma: float) -> float:
    d = np.asarray(points, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return math.exp(-float(np.sum(d * d)) / sigma ** 2)


def limb_weights(skeleton: Skeleton, config: RewardConfig) -> np.ndarray:
    return np.array([config.limb_weights.get(node.name, 1.0) for node in skeleton.box_nodes])


def reward_trajectory(rho: np.ndarray, root_xz, speed: float, cue: ActionCue, skeleton: Skeleton,
                      config: RewardConfig) -> Dict[str, float]:
    coli = r_collision(rho, limb_weights(skeleton, config), config.sigma_coli) if config.use_collision else 1.0
    pos = r_position(root_xz, (cue.q_root[0], cue.q_root[2]), config.sigma_root)
    vel = r_velocity(speed, config.sigma_th, config.sigma_vel)
    return {"r_coli": coli, "r_pos": pos, "r_vel": vel, "R_tr": coli * pos * vel}


def interaction_points(positions: np.ndarray, cue: ActionCue, skeleton: Skeleton) -> Tuple[np.ndarray, np.ndarray]:
    """Joint positions and their cue targets: the root plus whichever feet the cue provides"""
    points, targets = [positions[0]], [np.asarray(cue.q_root)]
    left, right = skeleton.feet
    for joint, target in ((right, cue.q_rfoot), (left, cue.q_lfoot)):
        if target is not None:
            points.append(positions[joint])
            targets.append(np.asarray(target))
    return np.array(points), np.array(targets)


def reward_action(positions: np.ndarray, action: ActionType, cue: ActionCue, skeleton: Skeleton,
                  transition_cost: float, velocity_cost: float, config: RewardConfig) -> Dict[str, float]:
    if action == ActionType.walk:
        return {"r_inter": 0.0, "r_dt": 0.0, "r_dv": 0.0, "R_act": 0.0}
    points, targets = interaction_points(positions, cue, skeleton)
    inter = r_interaction(points, targets, config.sigma_inter)
    if config.use_transition:
        dt = math.exp(-config.sigma_dt ** 2 * transition_cost)
        dv = math.exp(-config.sigma_dv ** 2 * velocity_cost)
    else:
        dt = dv = 1.0
    return {"r_inter": inter, "r_dt": dt, "r_dv": dv, "R_act": inter * dt * dv}


def posture_distance_sq(a: Posture, b: Posture) -> float:
    """Squared root displacement (m) plus squared geodesic angles (rad) over every joint"""
    d_root = a.root_pos - b.root_pos
    angles = rot.geodesic_angle(rot.axis_angle_to_matrix(a.rotations), rot.axis_angle_to_matrix(b.rotations))
    return float(d_root @ d_root + np.sum(angles ** 2))


def reward_regularization(m_raw: Posture, m_t: Posture, m_prev: Posture, sigma: float) -> float:
    return math.exp(-(posture_distance_sq(m_raw, m_t) + posture_distance_sq(m_t, m_prev)) / sigma ** 2)


def total_reward(r_tr: float, r_act: float, r_reg: float, config: RewardConfig) -> float:
    return config.w_tr * r_tr + config.w_act * r_act + config.w_reg * r_reg


# ---------------------------------------------------------------- environment

@dataclass
class Decision:
    type_index: int
    u: np.ndarray
    logp: float = 0.0
    value: float = 0.0
    type_probs: Optional[np.ndarray] = None


class Policy(Protocol):
    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> Decision: ...


class EpisodeSampler(Protocol):
    def sample(self, rng: np.random.Generator) -> Tuple[InitialState, ActionCue]: ...


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    terms: Dict[str, float]
    reason: Optional[str] = None
    success: bool = False


class Environment:
    """One character in one scene pursuing one action cue"""

    def __init__(self, db: MotionDatabase, scene: SceneWorld, config: RunConfig,
                 initial: Optional[InitialState] = None, cue: Optional[ActionCue] = None,
                 sampler: Optional[EpisodeSampler] = None, grid: Optional[OccupancyGrid] = None):
        self.db = db
        self.scene = scene
        self.config = config
        self.skeleton = db.skeleton
        self.grid = grid if grid is not None else build_global_grid(scene, config.scene.grid)
        self.synthesizer = MotionSynthesizer(db, config.synthesizer)
        self.initial = initial
        self.cue = cue
        self.sampler = sampler
        self.n = config.scene.grid.n
        self.offsets_frames = list(config.database.locomotion_offsets)
        self.state: Optional[SynthesizerState] = None
        self.frames: List[Posture] = []
        self.contacts: List[np.ndarray] = []
        self._speeds: List[float] = []
        self._success_run = 0

    @property
    def observation_dim(self) -> int:
        return state_dim(self.skeleton, self.n)

    @property
    def continuous_dim(self) -> int:
        return continuous_dim(len(self.synthesizer.offset_joints))

    @property
    def type_count(self) -> int:
        return len(ACTION_ORDER)

    def observe(self) -> np.ndarray:
        return assemble_state(self.state.previous, self.state.posture, self.scene, self.grid, self.cue, self.skeleton,
                              self.config.scene.grid).vector()

    def reset(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if self.sampler is not None:
            self.initial, self.cue = self.sampler.sample(rng if rng is not None else np.random.default_rng())
        if self.initial is None or self.cue is None:
            raise ValueError("environment needs an initial state and an action cue")
        self.state = self.synthesizer.initial_state(self.initial.position, self.initial.yaw)
        self.frames = [self.state.posture.copy()]
        self.contacts = [self.state.contacts.copy()]
        self._speeds = []
        self._success_run = 0
        return self.observe()

    def step(self, type_index: int, u: np.ndarray, type_probs: Optional[np.ndarray] = None) -> StepResult:
        action = decode_action(type_index, u, self.state.posture, self.cue, self.offsets_frames, self.config, type_probs)
        self.state, info = self.synthesizer.step(self.state, action.action_type, action.future, action.offset)
        m_t, m_prev = self.state.posture, self.state.previous
        self.frames.append(m_t.copy())
        self.contacts.append(self.state.contacts.copy())

        positions, orientations = forward_kinematics(m_t.root_pos, m_t.rotations, self.skeleton)
        rho = node_intersections(positions, orientations, self.skeleton, self.scene, self.config.scene.point_tolerance)
        speed = float(np.linalg.norm(m_t.root_pos[[0, 2]] - m_prev.root_pos[[0, 2]])) * self.db.config.frame_rate
        self._speeds.append(speed)

        rc = self.config.reward
        terms = reward_trajectory(rho, m_t.root_pos[[0, 2]], speed, self.cue, self.skeleton, rc)
        costs = (info.transition_cost, info.velocity_cost) if info.searched else (0.0, 0.0)
        terms.update(reward_action(positions, self.state.action, self.cue, self.skeleton, costs[0], costs[1], rc))
        terms["R_reg"] = reward_regularization(self.state.raw, m_t, m_prev, rc.sigma_reg)
        terms["discarded"] = float(info.discarded)
        reward = total_reward(terms["R_tr"], terms["R_act"], terms["R_reg"], rc)

        terminated, reason, success = self._termination(terms)
        truncated = not terminated and self.state.frame >= self.config.termination.max_frames
        return StepResult(self.observe(), reward, terminated, truncated, terms, reason, success)

    def _termination(self, terms: Dict[str, float]) -> Tuple[bool, Optional[str], bool]:
        tc: TerminationConfig = self.config.termination
        root_xz = self.state.posture.root_pos[[0, 2]]
        if not self.scene.contains_xz(root_xz) or not self.grid.inside(root_xz):
            return True, "exit", False
        if self.config.reward.use_collision and terms["r_coli"] < tc.collision_threshold:
            return True, "collision", False
        if self.state.action == self.cue.action and terms["r_inter"] >= tc.success_inter:
            self._success_run += 1
            if self._success_run >= tc.success_frames:
                return True, "success", True
        else:
            self._success_run = 0
        if len(self._speeds) >= tc.stall_window and float(np.mean(self._speeds[-tc.stall_window:])) < tc.stall_speed:
            return True, "stall", False
        return False, None, False

    def motion(self, name: str = "motion") -> MotionClip:
        return MotionClip(
            skeleton=self.skeleton,
            root_pos=np.array([p.root_pos for p in self.frames]),
            rotations=np.array([p.rotations for p in self.frames]),
            frame_rate=self.db.config.frame_rate,
            action=self.cue.action if self.cue is not None else ActionType.walk,
            contacts=np.array(self.contacts),
            name=name,
        )


# ---------------------------------------------------------------- episodes

@dataclass
class Trajectory:
    obs: List[np.ndarray] = field(default_factory=list)
    types: List[int] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    logps: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    terms: List[Dict[str, float]] = field(default_factory=list)
    terminated: bool = False
    truncated: bool = False
    success: bool = False
    reason: Optional[str] = None
    bootstrap: float = 0.0  # V(s_T) for truncated episodes
    motion: Optional[MotionClip] = None

    def __len__(self):
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


def run_episode(policy: Policy, env, rng: np.random.Generator, max_frames: Optional[int] = None,
                greedy: bool = False, keep_motion: bool = False,
                value_fn: Optional[Callable[[np.ndarray], float]] = None) -> Trajectory:
    """Roll one episode until termination, truncation or max_frames"""
    obs = env.reset(rng)
    limit = max_frames if max_frames is not None else getattr(env, "max_frames", None) or 10 ** 9
    traj = Trajectory()
    for _ in range(limit):
        decision = policy.act(obs, rng, greedy)
        result = env.step(decision.type_index, decision.u, decision.type_probs)
        traj.obs.append(obs)
        traj.types.append(decision.type_index)
        traj.actions.append(np.asarray(decision.u, dtype=np.float64))
        traj.logps.append(decision.logp)
        traj.values.append(decision.value)
        traj.rewards.append(result.reward)
        traj.terms.append(result.terms)
        obs = result.obs
        if result.terminated:
            traj.terminated, traj.reason, traj.success = True, result.reason, result.success
            break
        if result.truncated:
            traj.truncated, traj.reason = True, "truncated"
            break
    else:
        traj.truncated, traj.reason = True, "truncated"
    if traj.truncated and value_fn is not None:
        traj.bootstrap = float(value_fn(obs))
    if keep_motion and hasattr(env, "motion"):
        traj.motion = env.motion()
    return traj


# ---------------------------------------------------------------- scripted policies

class ScriptedPolicy:
    """Walks the heuristic straight line, switching to the cue action inside switch_radius of the target"""

    def __init__(self, env: Environment, switch_radius: float = 0.15):
        self.env = env
        self.switch_radius = switch_radius

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> Decision:
        m_t = self.env.state.posture
        cue = self.env.cue
        distance = math.hypot(m_t.root_pos[0] - cue.q_root[0], m_t.root_pos[2] - cue.q_root[2])
        action = cue.action if distance <= self.switch_radius or self.env.state.action == cue.action else ActionType.walk
        return Decision(ACTION_ORDER.index(action), np.zeros(self.env.continuous_dim))


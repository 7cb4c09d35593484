import math
from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class ActionType(str, Enum):
    walk = "walk"
    sit = "sit"
    stop = "stop"


ACTION_ORDER = [ActionType.walk, ActionType.sit, ActionType.stop]


# Motion data
class ContactConfig(BaseModel):
    vel_thresh: float = Field(0.02, gt=0, description="foot speed below which a foot may be planted (m/frame)")
    contact_height: float = Field(0.05, gt=0, description="foot height for contact (m)")
    near_height: float = Field(0.10, gt=0, description="foot height for near-floor label (m)")

    @model_validator(mode="after")
    def check_heights(self):
        if self.near_height < self.contact_height:
            raise ValueError("near_height must be >= contact_height")
        return self


class FeatureWeights(BaseModel):
    feet: float = Field(1.0, ge=0)
    hands: float = Field(0.75, ge=0)
    head: float = Field(0.5, ge=0)
    velocities: float = Field(0.75, ge=0)
    up: float = Field(1.0, ge=0)
    contacts: float = Field(1.0, ge=0)
    future: float = Field(1.0, ge=0)


class DatabaseConfig(BaseModel):
    frame_rate: float = Field(30.0, gt=0)
    bvh_unit_scale: float = Field(0.01, gt=0, description="BVH length unit to meters")
    locomotion_offsets: List[int] = Field(default_factory=lambda: [10, 20, 30])
    mirror_actions: List[ActionType] = Field(default_factory=lambda: [ActionType.sit, ActionType.stop])
    sit_height_threshold: float = Field(0.6, gt=0)
    sit_stable_frames: int = Field(10, ge=1)
    weights: FeatureWeights = Field(default_factory=FeatureWeights)
    contacts: ContactConfig = Field(default_factory=ContactConfig)

    @field_validator("locomotion_offsets")
    @classmethod
    def validate_offsets(cls, v):
        if not v or any(o <= 0 for o in v) or sorted(v) != v:
            raise ValueError("locomotion_offsets must be positive and increasing")
        return v


# Scene
class GridConfig(BaseModel):
    n: int = Field(32, ge=1, description="window cells per side")
    cell: float = Field(0.10, gt=0, description="cell size (m)")
    band_min: float = Field(0.10, description="occupancy height band lower bound (m)")
    band_max: float = Field(1.80, description="occupancy height band upper bound (m)")
    margin: float = Field(2.0, ge=0, description="global grid padding around the scene (m)")
    empty_extent: float = Field(20.0, gt=0, description="global grid size for an empty scene (m)")

    @model_validator(mode="after")
    def check_band(self):
        if self.band_max <= self.band_min:
            raise ValueError("band_max must exceed band_min")
        return self


class SceneConfig(BaseModel):
    floor_height: float = 0.0
    unit_scale: float = Field(1.0, gt=0)
    hash_cell: float = Field(0.25, gt=0, description="spatial hash cell size (m)")
    point_tolerance: float = Field(1e-7, gt=0, description="intersection points closer than this are one point (m)")
    leg_threshold: int = Field(10, ge=0, description="penetration: leg intersection points per frame")
    arm_threshold: int = Field(7, ge=0, description="penetration: arm intersection points per frame")
    grid: GridConfig = Field(default_factory=GridConfig)


# Motion matching
class SynthesizerConfig(BaseModel):
    search_period: int = Field(10, ge=1)
    offset_joints: List[str] = Field(default_factory=lambda: [
        "spine", "spine1", "spine2",
        "l_upper_arm", "r_upper_arm",
        "l_forearm", "r_forearm",
        "l_upper_leg", "r_upper_leg",
    ])
    offset_clamp: float = Field(0.3, gt=0, description="max per-joint offset angle (rad)")
    use_offset: bool = True
    backend: Literal["tree", "brute"] = "tree"
    nominal_speed: float = Field(0.04, gt=0, description="heuristic future cue speed (m/frame)")
    transition_max_distance: float = Field(500.0, gt=0, description="max matching distance accepted for a switch into an action")
    debug_dump_path: Optional[str] = None


# Controller
class RewardConfig(BaseModel):
    w_tr: float = Field(1.0, ge=0)
    w_act: float = Field(1.0, ge=0)
    w_reg: float = Field(0.5, ge=0)
    sigma_coli: float = Field(2.0, gt=0)
    sigma_root: float = Field(1.5, gt=0)
    sigma_vel: float = Field(25.0, gt=0)
    sigma_th: float = Field(0.2, gt=0, description="root speed threshold (m/s)")
    sigma_inter: float = Field(0.1, gt=0)
    sigma_dt: float = Field(1.0, gt=0)
    sigma_dv: float = Field(1.0, gt=0)
    sigma_reg: float = Field(1.0, gt=0)
    limb_weights: Dict[str, float] = Field(default_factory=dict, description="w_b per box node name, default 1.0")
    use_collision: bool = True
    use_transition: bool = True

    @field_validator("limb_weights")
    @classmethod
    def validate_limb_weights(cls, v):
        if any(w < 0 for w in v.values()):
            raise ValueError("limb weights must be >= 0")
        return v


class TerminationConfig(BaseModel):
    collision_threshold: float = Field(math.exp(-2.0), gt=0, le=1)
    stall_window: int = Field(50, ge=1)
    stall_speed: float = Field(0.05, ge=0, description="mean root speed (m/s)")
    success_inter: float = Field(0.9, gt=0, le=1)
    success_frames: int = Field(15, ge=1)
    max_frames: int = Field(900, ge=1)


class PPOConfig(BaseModel):
    gamma: float = Field(0.95, gt=0, le=1)
    lam: float = Field(0.95, ge=0, le=1)
    clip: float = Field(0.2, gt=0)
    tuples_per_update: int = Field(30000, ge=1)
    minibatch: int = Field(512, ge=1)
    policy_lr: float = Field(2e-4, gt=0)
    value_lr: float = Field(1e-3, gt=0)
    epochs_per_update: int = Field(3, ge=1)
    iterations: int = Field(300, ge=1)
    entropy_coef: float = Field(0.0, ge=0)
    obs_clip: float = Field(10.0, gt=0)
    policy_hidden: List[int] = Field(default_factory=lambda: [256, 256, 256, 256])
    value_hidden: List[int] = Field(default_factory=lambda: [256, 256])
    log_std_init: float = -1.0
    future_scale: float = Field(0.5, gt=0, description="tanh bound of future XZ deltas (m)")
    yaw_scale: float = Field(0.5, gt=0, description="tanh bound of future facing deltas (rad)")
    max_resample: int = Field(100, ge=1)


# Editor
class EditorConfig(BaseModel):
    window: int = Field(120, ge=8)
    channels: int = Field(256, ge=1)
    kernel: int = Field(25, ge=1)
    stride: int = Field(2, ge=1)
    layers: int = Field(3, ge=1)
    ae_lr: float = Field(1e-4, gt=0)
    ae_epochs: int = Field(500, ge=1)
    batch_size: int = Field(16, ge=1)
    noise_scale: float = Field(0.01, ge=0)
    warmup_fraction: float = Field(0.2, ge=0, le=1)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    w_c: float = Field(1.0, ge=0)
    w_r: float = Field(1.0, ge=0)
    w_q: float = Field(1.0, ge=0)
    w_p: float = Field(2.0, ge=0)
    edit_lr: float = Field(5e-3, gt=0)
    edit_epochs: int = Field(500, ge=1)
    edit_w_p: float = Field(5.0, ge=0)
    edit_w_f: float = Field(2.0, ge=0)
    edit_w_r: float = Field(1.0, ge=0)
    edit_w_dr: float = Field(1.0, ge=0)
    crossfade: int = Field(5, ge=0)


class MetricsConfig(BaseModel):
    trials: int = Field(5, ge=1)
    min_success: int = Field(2, ge=1)
    sweep_cell: float = Field(0.5, gt=0, description="floor sampling step for initial positions (m)")
    ablation_seeds: int = Field(5, ge=1)

    @model_validator(mode="after")
    def check_counts(self):
        if self.min_success > self.trials:
            raise ValueError("min_success cannot exceed trials")
        return self


class PathsConfig(BaseModel):
    clips_dir: Optional[str] = None
    scene_mesh: Optional[str] = None
    scene_config: Optional[str] = None
    skeleton_file: Optional[str] = None
    cue_file: Optional[str] = None
    output_dir: str = "runs"
    database: Optional[str] = None
    policy: Optional[str] = None
    autoencoder: Optional[str] = None
    motion: Optional[str] = None


class RunConfig(BaseModel):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    database: DatabaseConfig = Field(default_factory=DatabaseConfig)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    synthesizer: SynthesizerConfig = Field(default_factory=SynthesizerConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    termination: TerminationConfig = Field(default_factory=TerminationConfig)
    ppo: PPOConfig = Field(default_factory=PPOConfig)
    editor: EditorConfig = Field(default_factory=EditorConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    seed: int = 0
    workers: Optional[int] = Field(None, ge=1)
    generalize: bool = False
    plot: bool = False

from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator

from app.models.base import ActionType

Vec3 = Tuple[float, float, float]


class ActionCue(BaseModel):
    """Root (and optionally feet) target of an interaction, e.g. where to sit"""
    action: ActionType = ActionType.sit
    q_root: Vec3
    r_root: float = Field(0.0, description="target facing yaw (rad)")
    q_rfoot: Optional[Vec3] = None
    q_lfoot: Optional[Vec3] = None

    @field_validator("action")
    @classmethod
    def validate_action(cls, v):
        if v == ActionType.walk:
            raise ValueError("an action cue targets sit or stop, not walk")
        return v


class InitialState(BaseModel):
    position: Vec3
    yaw: float = 0.0


class Waypoint(BaseModel):
    time: int = Field(..., ge=0, description="frame index in the motion")
    joint: Union[str, int]
    xyz: Vec3


class ManipulationCue(BaseModel):
    waypoints: List[Waypoint] = Field(default_factory=list)

    @field_validator("waypoints")
    @classmethod
    def validate_times(cls, v):
        last = {}
        for wp in v:
            if wp.joint in last and wp.time <= last[wp.joint]:
                raise ValueError(f"waypoint times for joint {wp.joint} must be strictly increasing")
            last[wp.joint] = wp.time
        return v


class ArticulationSpec(BaseModel):
    type: Literal["revolute", "prismatic"]
    axis_origin: Vec3 = (0.0, 0.0, 0.0)
    axis_direction: Vec3
    rotation: Vec3 = Field((0.0, 0.0, 0.0), description="object global orientation, axis-angle")
    translation: Vec3 = (0.0, 0.0, 0.0)
    contact_vertex: Vec3
    theta: List[float] = Field(..., min_length=1, description="articulation parameter per frame (rad or m)")
    joint: Union[str, int] = "r_hand"
    start_frame: int = Field(0, ge=0)

    @field_validator("theta")
    @classmethod
    def validate_monotone(cls, v):
        steps = [b - a for a, b in zip(v, v[1:])]
        if steps and not (all(s >= 0 for s in steps) or all(s <= 0 for s in steps)):
            raise ValueError("theta schedule must be monotone")
        return v


class CueFile(BaseModel):
    action: Optional[ActionCue] = None
    targets: List[ActionCue] = Field(default_factory=list, description="candidate action cues for sampling and sweeps")
    initial: Optional[InitialState] = None
    manipulation: Optional[ManipulationCue] = None
    articulation: Optional[ArticulationSpec] = None
    segment: Optional[Tuple[int, int]] = None

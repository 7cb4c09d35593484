from pydantic import BaseModel, Field
from typing import List, Dict, Optional, Tuple

from app.models.base import RunConfig
from app.models.cues import ActionCue, CueFile, InitialState, ManipulationCue

# Evaluation reports

class ContactResult(BaseModel):
    contact_cm: float = Field(..., ge=0, description="mean XZ foot displacement over contact frames (cm)")
    all_frames_cm: float = Field(..., ge=0, description="contact displacement averaged over every frame (cm)")
    contact_frames: int
    no_contact: bool = False

class EvalReport(BaseModel):
    motion: str
    frames: int
    contact_cm: float = Field(..., ge=0)
    contact_all_frames_cm: float = Field(..., ge=0)
    contact_warning: bool = False
    penetration_percent: float = Field(..., ge=0, le=100)
    successes: List[bool] = Field(default_factory=list)
    episode_lengths: List[int] = Field(default_factory=list)
    termination_reasons: List[Optional[str]] = Field(default_factory=list)
    reward_terms: Dict[str, float] = Field(default_factory=dict, description="mean of each reward term")

class SweepCell(BaseModel):
    target: int
    cell: Tuple[int, int]
    position: Tuple[float, float]
    successes: int
    trials: int
    success: bool

class SweepTarget(BaseModel):
    target: int
    cue: ActionCue
    cells: int
    successful_cells: int
    ratio: float = Field(..., ge=0, le=1)

class SweepReport(BaseModel):
    cells: List[SweepCell] = Field(default_factory=list)
    targets: List[SweepTarget] = Field(default_factory=list)
    ratio: float = Field(0.0, ge=0, le=1)
    trials: int
    min_success: int
    contact_cm: Optional[float] = None
    penetration_percent: Optional[float] = None
    seconds_per_trial: Optional[float] = None

class AblationRun(BaseModel):
    seed: int
    with_collision: float = Field(..., ge=0, le=100)
    without_collision: float = Field(..., ge=0, le=100)

class AblationReport(BaseModel):
    runs: List[AblationRun] = Field(default_factory=list)
    mean_with_collision: float
    mean_without_collision: float
    ratio: Optional[float] = None

# API bodies

class DatabaseBuildRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)

class DatabaseSummary(BaseModel):
    path: str
    frames: int
    clips: int
    partitions: Dict[str, int]

class OptimizeRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    cue: Optional[CueFile] = None
    iterations: Optional[int] = Field(None, ge=1)
    init_policy: Optional[str] = None

class OptimizeResponse(BaseModel):
    policy: str
    training_log: str
    best_average_return: float
    iterations: int

class SynthesizeRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    initial: InitialState
    cue: ActionCue
    greedy: bool = True

class SynthesizeResponse(BaseModel):
    motion: str
    bvh: str
    frames: int
    success: bool
    reason: Optional[str] = None
    seconds: float

class EditRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    motion: str = Field(..., description="motion JSON path inside the workspace")
    cue: Optional[ManipulationCue] = None
    cue_file: Optional[CueFile] = None
    segment: Tuple[int, int]
    method: str = Field("manifold", pattern="^(manifold|ik)$")
    splice: int = Field(0, ge=0, description="frames to hold at the segment start before editing")

class EditResponse(BaseModel):
    motion: str
    initial_error: float
    final_error: float
    frames: int

class EvalRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    motion: str

class SweepRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    targets: List[ActionCue] = Field(..., min_length=1)

class ExportRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    motion: str
    destination: Optional[str] = None
    frame_rate: float = Field(30.0, gt=0)

class ExportResponse(BaseModel):
    path: str
    frames: int

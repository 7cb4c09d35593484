from fastapi import APIRouter, HTTPException, status
from app.models.cues import CueFile
from app.models.reports import (
    SynthesizeRequest, SynthesizeResponse,
    EditRequest, EditResponse,
    ExportRequest, ExportResponse
)
from app.api.dependencies import workspace_config, workspace_path
from app.core import pipeline
from app.core.errors import EngineError
import logging

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/motion", tags=["Motion"])

@router.post("/synthesize", response_model=SynthesizeResponse)
def synthesize_motion(request: SynthesizeRequest):
    """Roll out the stored policy from an initial state toward an action cue"""
    try:
        config = workspace_config(request.config)
        result = pipeline.synthesize(config, request.initial, request.cue, request.greedy)
        return SynthesizeResponse(
            motion=str(result.json_path),
            bvh=str(result.bvh_path),
            frames=len(result.motion),
            success=result.trajectory.success,
            reason=result.trajectory.reason,
            seconds=result.seconds,
        )
    except EngineError:
        raise
    except Exception as e:
        logger.error(f"Error synthesizing motion: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Error synthesizing motion"
        )

@router.post("/edit", response_model=EditResponse)
def edit_motion(request: EditRequest):
    """Edit a motion segment toward manipulation waypoints"""
    try:
        config = workspace_config(request.config)
        cues = request.cue_file if request.cue_file is not None else CueFile()
        result, path = pipeline.edit_motion(
            config, workspace_path(request.motion), request.cue, request.segment,
            request.method, request.splice, cues
        )
        return EditResponse(
            motion=str(path),
            initial_error=result.initial_error,
            final_error=result.final_error,
            frames=len(result.motion),
        )
    except EngineError:
        raise
    except Exception as e:
        logger.error(f"Error editing motion: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Error editing motion"
        )

@router.post("/export", response_model=ExportResponse)
def export_motion(request: ExportRequest):
    """Write a motion as BVH"""
    try:
        config = workspace_config(request.config)
        destination = workspace_path(request.destination) if request.destination else None
        path, frames = pipeline.export(config, workspace_path(request.motion), destination, request.frame_rate)
        return ExportResponse(path=str(path), frames=frames)
    except EngineError:
        raise
    except Exception as e:
        logger.error(f"Error exporting motion: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Error exporting motion"
        )

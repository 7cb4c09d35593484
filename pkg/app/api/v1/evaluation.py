from fastapi import APIRouter, HTTPException, status
from app.models.reports import EvalRequest, EvalReport, SweepRequest, SweepReport
from app.api.dependencies import workspace_config, workspace_path
from app.core import pipeline
from app.core.errors import EngineError
import logging

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/evaluation", tags=["Evaluation"])

@router.post("/eval", response_model=EvalReport)
def evaluate_motion(request: EvalRequest):
    """Foot-contact and penetration metrics of one motion"""
    try:
        config = workspace_config(request.config)
        return pipeline.evaluate(config, workspace_path(request.motion))
    except EngineError:
        raise
    except Exception as e:
        logger.error(f"Error evaluating motion: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Error evaluating motion"
        )

@router.post("/sweep", response_model=SweepReport)
def robustness_sweep(request: SweepRequest):
    """Success ratio of the stored policy over a floor grid of start positions"""
    try:
        config = workspace_config(request.config)
        return pipeline.sweep(config, request.targets)
    except EngineError:
        raise
    except Exception as e:
        logger.error(f"Error running robustness sweep: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Error running robustness sweep"
        )

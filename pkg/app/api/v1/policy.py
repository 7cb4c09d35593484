from fastapi import APIRouter, HTTPException, status
from app.models.reports import OptimizeRequest, OptimizeResponse
from app.api.dependencies import workspace_config, workspace_path
from app.core import pipeline
from app.core.errors import EngineError
import logging

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/policy", tags=["Policy"])

@router.post("/optimize", response_model=OptimizeResponse)
def optimize_policy(request: OptimizeRequest):
    """Optimize (or fine-tune) the action controller and store the best checkpoint"""
    try:
        config = workspace_config(request.config)
        init_policy = workspace_path(request.init_policy) if request.init_policy else None
        result = pipeline.optimize(config, request.cue, request.iterations, init_policy)
        return OptimizeResponse(
            policy=str(result.policy_path),
            training_log=str(result.log_path),
            best_average_return=result.best_average_return,
            iterations=len(result.rows),
        )
    except EngineError:
        raise
    except Exception as e:
        logger.error(f"Error optimizing policy: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Error optimizing policy"
        )

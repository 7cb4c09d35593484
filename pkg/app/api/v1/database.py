from fastapi import APIRouter, HTTPException, status, Depends
from app.models.reports import DatabaseBuildRequest, DatabaseSummary
from app.api.dependencies import get_artifact_store, workspace_config
from app.core import pipeline
from app.core.errors import EngineError
from app.database.store import ArtifactStore
import logging

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/database", tags=["Motion Database"])

@router.post("/build", response_model=DatabaseSummary)
def build_database(request: DatabaseBuildRequest):
    """Parse the clip directory, index it and write the database cache"""
    try:
        config = workspace_config(request.config)
        db, path = pipeline.build_database_cmd(config)
        return pipeline.database_summary(db, path)
    except EngineError:
        raise
    except Exception as e:
        logger.error(f"Error building motion database: {e}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Error building motion database"
        )

@router.post("/summary", response_model=DatabaseSummary)
def database_summary(
    request: DatabaseBuildRequest,
    store: ArtifactStore = Depends(get_artifact_store)
):
    """Frame and partition counts of a cached database"""
    config = workspace_config(request.config)
    path = pipeline.artifact_path(config, "database", pipeline.DATABASE_FILE)
    return pipeline.database_summary(store.database(path), path)

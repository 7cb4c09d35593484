from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from contextlib import asynccontextmanager
from app.config import settings
from app.api.v1 import database, policy, motion, evaluation
from app.core.errors import EngineError
from app.database.store import get_store
import logging

# Configure logging
logging.basicConfig(level=settings.log_level.upper())
logger = logging.getLogger(__name__)

@asynccontextmanager
async def lifespan(app: FastAPI):
    """Open the artifact store on startup and release it on shutdown"""
    # Startup
    logger.info(f"Starting up {settings.app_name}")
    store = get_store()  # Initialize singleton
    logger.info(f"Artifact store ready, workspace {settings.workspace_dir}")

    yield

    # Shutdown
    logger.info(f"Shutting down {settings.app_name}")
    store.close()

app = FastAPI(title=settings.app_name, version="1.0.0", lifespan=lifespan)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(database.router, prefix="/api/v1")
app.include_router(policy.router, prefix="/api/v1")
app.include_router(motion.router, prefix="/api/v1")
app.include_router(evaluation.router, prefix="/api/v1")

@app.get("/")
async def root():
    return {"message": settings.app_name}

@app.get("/health")
async def health_check():
    return {"status": "healthy", "cached_artifacts": len(get_store())}

@app.exception_handler(EngineError)
async def engine_exception_handler(request, exc: EngineError):
    logger.error(f"{type(exc).__name__}: {exc.message}")
    return JSONResponse(
        status_code=exc.status_code,
        content={"detail": exc.message, "error": type(exc).__name__}
    )

@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    logger.error(f"Global exception: {exc}")
    return JSONResponse(
        status_code=500,
        content={"detail": "Internal server error"}
    )

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=8000,
        reload=settings.debug
    )

"""
Health & Info Routes
"""
from fastapi import APIRouter, Depends

from app.config import Settings, get_settings
from app.models import Algorithm, EnvName, FitnessShaping, HealthResponse
from app.modules.worker_protocol import PROTOCOL_VERSION

router = APIRouter(prefix="/api/v1", tags=["Health"])


@router.get(
    "/health",
    response_model=HealthResponse,
    summary="Health Check",
    description="Returns service status, worker protocol version and supported environments/algorithms.",
)
async def health(settings: Settings = Depends(get_settings)):
    return HealthResponse(
        status="healthy",
        version=settings.app_version,
        protocol_version=PROTOCOL_VERSION,
        envs_supported=[e.value for e in EnvName],
        algorithms_supported=[a.value for a in Algorithm],
        fitness_shaping_modes=[m.value for m in FitnessShaping],
    )

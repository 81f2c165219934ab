"""Health check and statistics endpoints"""
from datetime import datetime
from pathlib import Path

from fastapi import APIRouter

from app import __version__
from app.core.config import settings
from app.models.schemas import HealthCheckResponse, StatsResponse
from app.services.report_writer import REPORTS_SUBDIR
from app.services.stats_service import stats_service


router = APIRouter()


@router.get(
    "/health",
    response_model=HealthCheckResponse,
    summary="Health check",
    description="Check if the service is up and the report directory exists"
)
async def health_check():
    """
    Health check endpoint

    Returns service status and report directory availability
    """
    report_dir = Path(settings.output_dir) / REPORTS_SUBDIR
    return {
        "status": "healthy",
        "reports_available": report_dir.is_dir(),
        "report_dir": str(report_dir),
        "version": __version__,
        "timestamp": datetime.utcnow().isoformat() + "Z"
    }


@router.get(
    "/stats",
    response_model=StatsResponse,
    summary="Get statistics",
    description="Verdict tally of the served report directory"
)
async def get_statistics():
    return stats_service.get_stats()

"""Verdict report endpoints"""
from pathlib import Path

from fastapi import APIRouter, HTTPException, status

from app.core.config import settings
from app.core.logging import get_logger
from app.models.schemas import ErrorResponse, ReportListResponse, ReportSummary, Verdict
from app.services.report_writer import REPORTS_SUBDIR, find_verdict, load_verdicts


logger = get_logger(__name__)
router = APIRouter()


def _report_dir() -> Path:
    return Path(settings.output_dir) / REPORTS_SUBDIR


@router.get(
    "",
    response_model=ReportListResponse,
    summary="List verdict reports",
    description="Every verdict found in the report directory, sorted by tag"
)
async def list_reports():
    verdicts = load_verdicts(_report_dir())
    summaries = [
        ReportSummary(tag=v.tag, suite=v.suite, status=v.status,
                      config_hash=v.config_hash, timestamp=v.timestamp)
        for v in verdicts
    ]
    return ReportListResponse(reports=summaries, count=len(summaries))


@router.get(
    "/{tag}",
    response_model=Verdict,
    responses={404: {"model": ErrorResponse}},
    summary="Get one verdict report"
)
async def get_report(tag: str):
    """
    Get a verdict by tag

    Args:
        tag: Verdict tag, e.g. linear_expansion_order
    """
    if "/" in tag or "\\" in tag or tag.startswith("."):
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=f"Invalid tag: {tag}")
    verdict = find_verdict(_report_dir(), tag)
    if verdict is None:
        logger.info(f"Report not found: {tag}")
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"No report for tag '{tag}'")
    return verdict

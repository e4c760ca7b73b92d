"""
Comparison Report Route: GET /api/v1/report
"""
from __future__ import annotations

import logging
from pathlib import Path

from fastapi import APIRouter, Depends, HTTPException, Query

from app.config import Settings, get_settings
from app.models import ComparisonReport
from app.modules.harness import DEFAULT_SMOOTHING_WINDOW, X_AXES, ReportError, build_report, load_run_curves

logger = logging.getLogger(__name__)
router = APIRouter(prefix="/api/v1", tags=["Reports"])


@router.get(
    "/report",
    response_model=ComparisonReport,
    summary="Comparison Report",
    description=(
        "Smoothed final/best rewards and time-to-threshold (25/50/100% of the best run) "
        "for every run under a directory inside the configured output directory."
    ),
)
async def report(
    run_dir: str = Query("", description="Directory relative to the output directory"),
    window: int = Query(DEFAULT_SMOOTHING_WINDOW, ge=1, description="Smoothing window (evaluations)"),
    x_axis: str = Query("wall_clock_s", description=f"One of {', '.join(X_AXES)}"),
    settings: Settings = Depends(get_settings),
):
    root = Path(settings.output_dir).resolve()
    target = (root / run_dir).resolve()
    if target != root and root not in target.parents:
        raise HTTPException(status_code=422, detail="run_dir must stay inside the output directory.")
    if not target.is_dir():
        raise HTTPException(status_code=404, detail=f"Run directory '{run_dir}' not found.")

    curves = load_run_curves(target)
    if not curves:
        raise HTTPException(status_code=404, detail=f"No runs found under '{run_dir}'.")
    try:
        return build_report(curves, window, x_axis)
    except ReportError as e:
        raise HTTPException(status_code=422, detail=str(e))

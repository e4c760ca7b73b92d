"""
Checkpoint Evaluation Route: POST /api/v1/evaluate
"""
from __future__ import annotations

import logging

from fastapi import APIRouter, Depends, File, Form, HTTPException, UploadFile

from app.config import Settings, get_settings
from app.models import EnvConfig, EnvName, EvaluationResponse
from app.modules.harness import evaluate_checkpoint
from app.modules.nn_core import CheckpointFormatError, ShapeMismatchError, decode_checkpoint

logger = logging.getLogger(__name__)
router = APIRouter(prefix="/api/v1", tags=["Evaluation"])


@router.post(
    "/evaluate",
    response_model=EvaluationResponse,
    summary="Greedy Checkpoint Evaluation",
    description=(
        "Upload an EVSD checkpoint and pick a built-in environment. "
        "Runs greedy episodes on held-out seeds and returns per-episode rewards."
    ),
)
async def evaluate(
    checkpoint: UploadFile = File(..., description="EVSD policy checkpoint"),
    env: EnvName = Form(EnvName.FLAPPY, description="Environment to evaluate on (default physics)"),
    episodes: int = Form(10, ge=1, le=1000, description="Number of evaluation episodes"),
    seed: int = Form(0, ge=0, description="Run seed selecting the held-out episode seeds"),
    settings: Settings = Depends(get_settings),
):
    # ── 1. Validate upload size ───────────────────────────────────────────
    content = await checkpoint.read()
    if len(content) > settings.max_checkpoint_size_bytes:
        raise HTTPException(
            status_code=413,
            detail=f"Checkpoint exceeds maximum size of {settings.max_checkpoint_size_mb} MB.",
        )

    # ── 2. Decode ─────────────────────────────────────────────────────────
    try:
        policy = decode_checkpoint(content)
    except CheckpointFormatError as e:
        raise HTTPException(status_code=422, detail=f"Checkpoint Error: {e}")

    # ── 3. Evaluate ───────────────────────────────────────────────────────
    try:
        result = evaluate_checkpoint(policy, EnvConfig(name=env), episodes, seed)
    except ShapeMismatchError as e:
        raise HTTPException(status_code=422, detail=str(e))

    logger.info(
        "Evaluated %s (d=%d) on %s: mean %.4f over %d episodes",
        checkpoint.filename, policy.spec.param_count, env.value, result.mean_reward, episodes,
    )
    return result

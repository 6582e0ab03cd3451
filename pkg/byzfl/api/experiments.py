from typing import Any, Dict, List

from fastapi import APIRouter, Body, Query

from byzfl.harness import expand_grid, parse_experiment, run_experiment
from byzfl.schemas import ManifestEntry, TrialSummary

router = APIRouter()


@router.post("/experiments/expand", response_model=List[TrialSummary])
async def expand_experiment(config: Dict[str, Any] = Body(...)):
    """Resolve every grid_search without running anything"""
    trials = expand_grid(parse_experiment(config))
    return [TrialSummary(trial_id=t.trial_id, repetition=t.repetition, config=t.resolved) for t in trials]


@router.post("/experiments/run", response_model=List[ManifestEntry])
def run(
    config: Dict[str, Any] = Body(...),
    parallelism: int = Query(1, ge=1),
):
    """Run all trials synchronously into the configured output directory"""
    return run_experiment(parse_experiment(config), parallelism=parallelism)

from typing import Any, List, Optional

from fastapi import APIRouter, Depends, HTTPException, Path, Query
from sqlalchemy.orm import Session

from app import crud, schemas
from app.api import deps
from app.models.run import Run

router = APIRouter()


@router.get("/", response_model=schemas.RunListResponse)
def read_runs(
    db: Session = Depends(deps.get_db),
    skip: int = Query(0, ge=0, description="Skip the first N items"),
    limit: int = Query(100, ge=1, le=100, description="Limit the number of items"),
    strategy: Optional[schemas.MergeStrategy] = Query(None, description="Filter by merge strategy"),
) -> Any:
    """
    Retrieve stored runs, newest first.
    """
    return crud.run.get_multi_paginated(
        db, skip=skip, limit=limit, strategy=strategy.value if strategy else None
    )


@router.get("/by-run-id/{run_id}", response_model=schemas.RunDetailResponse)
def read_run_by_run_id(
    *,
    db: Session = Depends(deps.get_db),
    run_id: str = Path(..., title="Config hash of the run", min_length=1),
) -> Any:
    """
    Get the latest stored run with the given run id.
    """
    run = crud.run.get_by_run_id(db, run_id=run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run


@router.get("/{id}", response_model=schemas.RunDetailResponse)
def read_run(run: Run = Depends(deps.get_run_or_404)) -> Any:
    """
    Get a run with its global updates.
    """
    return run


@router.get("/{id}/updates", response_model=List[schemas.GlobalUpdateResponse])
def read_run_updates(
    *,
    db: Session = Depends(deps.get_db),
    run: Run = Depends(deps.get_run_or_404),
) -> Any:
    """
    Merge history of a run: one row per global update.
    """
    return crud.global_update.get_multi_by_run(db, run_pk=run.id)


@router.get("/{id}/updates/{global_index}/episodes", response_model=List[schemas.EpisodeRecordResponse])
def read_update_episodes(
    *,
    db: Session = Depends(deps.get_db),
    run: Run = Depends(deps.get_run_or_404),
    global_index: int = Path(..., title="Global update index", ge=1),
) -> Any:
    """
    Episode records of one global update.
    """
    update = next((u for u in run.updates if u.global_index == global_index), None)
    if update is None:
        raise HTTPException(status_code=404, detail="Global update not found")
    return crud.episode_record.get_multi_by_update(db, update_pk=update.id)

from typing import Generator

from fastapi import Depends, HTTPException, Path
from sqlalchemy.orm import Session

from app import crud
from app.db.session import SessionLocal
from app.models.run import Run


def get_db() -> Generator:
    try:
        db = SessionLocal()
        yield db
    finally:
        db.close()


def get_run_or_404(
    db: Session = Depends(get_db),
    id: int = Path(..., title="The ID of the stored run", ge=1),
) -> Run:
    run = crud.run.get(db=db, id=id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run

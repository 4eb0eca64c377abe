from typing import Any, Dict, List, Optional

from sqlalchemy.orm import Session

from app.crud.base import CRUDBase
from app.models.run import EpisodeRecord, GlobalUpdate, Run
from app.schemas.run import RunManifest


class CRUDRun(CRUDBase[Run]):
    def create_from_manifest(
        self, db: Session, *, manifest: RunManifest, out_dir: Optional[str] = None
    ) -> Run:
        """Store a finished run with its global updates and episode records"""
        target = manifest.target
        k_values = {t.metrics.k_used for t in target.per_domain} if target else set()
        db_obj = Run(
            run_id=manifest.run_id,
            command=manifest.command,
            seed=manifest.seed,
            strategy=manifest.strategy,
            status=manifest.status.value,
            out_dir=out_dir,
            config=manifest.config,
            target_all=target.mean_all if target else None,
            target_old=target.mean_old if target else None,
            target_new=target.mean_new if target else None,
            # only a single K is meaningful across several target domains
            k_used=k_values.pop() if len(k_values) == 1 else None,
            wall_clock_seconds=manifest.wall_clock_seconds,
        )
        for row in manifest.history:
            update = GlobalUpdate(
                global_index=row.global_index,
                strategy=row.strategy,
                weight_diff_l1=row.weight_diff_l1,
                sign_conflict=row.sign_conflict,
                weights=row.weights,
            )
            for episode in row.episodes:
                valid = episode.valid
                update.episodes.append(EpisodeRecord(
                    episode_index=episode.episode_index,
                    domain_id=episode.domain_id,
                    known_classes=episode.known_classes,
                    valid_all=valid.all if valid else None,
                    valid_old=valid.old if valid else None,
                    valid_new=valid.new if valid else None,
                    weight=episode.weight,
                    aborted=episode.aborted,
                ))
            db_obj.updates.append(update)
        db.add(db_obj)
        db.commit()
        db.refresh(db_obj)
        return db_obj

    def get_by_run_id(self, db: Session, *, run_id: str) -> Optional[Run]:
        """Latest stored run with this run id"""
        return (
            db.query(self.model)
            .filter(Run.run_id == run_id)
            .order_by(Run.id.desc())
            .first()
        )

    def get_multi_paginated(
        self,
        db: Session,
        *,
        skip: int = 0,
        limit: int = 100,
        strategy: Optional[str] = None,
    ) -> Dict[str, Any]:
        """Get runs with pagination, optionally filtered by merge strategy"""
        query = db.query(self.model)
        if strategy:
            query = query.filter(Run.strategy == strategy)
        total = query.count()
        items = query.order_by(Run.id.desc()).offset(skip).limit(limit).all()
        return {"total": total, "items": items}


class CRUDGlobalUpdate(CRUDBase[GlobalUpdate]):
    def get_multi_by_run(self, db: Session, *, run_pk: int) -> List[GlobalUpdate]:
        return (
            db.query(self.model)
            .filter(GlobalUpdate.run_id == run_pk)
            .order_by(GlobalUpdate.global_index)
            .all()
        )


class CRUDEpisodeRecord(CRUDBase[EpisodeRecord]):
    def get_multi_by_update(self, db: Session, *, update_pk: int) -> List[EpisodeRecord]:
        return (
            db.query(self.model)
            .filter(EpisodeRecord.update_id == update_pk)
            .order_by(EpisodeRecord.episode_index)
            .all()
        )


run = CRUDRun(Run)
global_update = CRUDGlobalUpdate(GlobalUpdate)
episode_record = CRUDEpisodeRecord(EpisodeRecord)

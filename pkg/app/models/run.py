import enum

from sqlalchemy import JSON, CheckConstraint, Column, Float, ForeignKey, Integer, String, Boolean, Text
from sqlalchemy.orm import relationship

from app.db.base import BaseModel


class RunStatus(str, enum.Enum):
    COMPLETED = "completed"
    FAILED = "failed"


class Run(BaseModel):
    __tablename__ = "runs"

    run_id = Column(String(32), nullable=False, index=True)
    command = Column(String(50), nullable=False)
    seed = Column(Integer, nullable=False)
    strategy = Column(String(20), nullable=False)
    status = Column(String, nullable=False, default=RunStatus.COMPLETED.value)
    out_dir = Column(Text, nullable=True)
    config = Column(JSON, nullable=False)
    # Mean target metrics of the final model
    target_all = Column(Float, nullable=True)
    target_old = Column(Float, nullable=True)
    target_new = Column(Float, nullable=True)
    k_used = Column(Integer, nullable=True)
    wall_clock_seconds = Column(Float, nullable=False, default=0.0)

    __table_args__ = (
        CheckConstraint(
            status.in_([s.value for s in RunStatus]),
            name="check_valid_run_status"
        ),
    )

    updates = relationship(
        "GlobalUpdate", back_populates="run", cascade="all, delete-orphan",
        order_by="GlobalUpdate.global_index"
    )

    def __repr__(self):
        return f"<Run(id={self.id}, run_id={self.run_id}, strategy={self.strategy})>"


class GlobalUpdate(BaseModel):
    __tablename__ = "global_updates"

    run_id = Column(ForeignKey("runs.id"), nullable=False)
    global_index = Column(Integer, nullable=False)
    strategy = Column(String(20), nullable=False)
    weight_diff_l1 = Column(Float, nullable=False)
    sign_conflict = Column(Float, nullable=True)
    weights = Column(JSON, nullable=False)

    run = relationship("Run", back_populates="updates")
    episodes = relationship(
        "EpisodeRecord", back_populates="update", cascade="all, delete-orphan",
        order_by="EpisodeRecord.episode_index"
    )

    def __repr__(self):
        return f"<GlobalUpdate(id={self.id}, global_index={self.global_index})>"


class EpisodeRecord(BaseModel):
    __tablename__ = "episode_records"

    update_id = Column(ForeignKey("global_updates.id"), nullable=False)
    episode_index = Column(Integer, nullable=False)
    domain_id = Column(String(50), nullable=True)
    known_classes = Column(JSON, nullable=False)
    valid_all = Column(Float, nullable=True)
    valid_old = Column(Float, nullable=True)
    valid_new = Column(Float, nullable=True)
    weight = Column(Float, nullable=False, default=0.0)
    aborted = Column(Boolean, nullable=False, default=False)

    update = relationship("GlobalUpdate", back_populates="episodes")

    def __repr__(self):
        return f"<EpisodeRecord(id={self.id}, episode_index={self.episode_index})>"

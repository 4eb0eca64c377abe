from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict

from app.schemas.metrics import GlobalUpdateSummary, TargetReport


class RunStatusEnum(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"


# Manifest written next to the run artifacts
class RunManifest(BaseModel):
    run_id: str
    command: str
    seed: int
    strategy: str
    status: RunStatusEnum = RunStatusEnum.COMPLETED
    config: Dict[str, Any]
    versions: Dict[str, str]
    started_at: datetime
    wall_clock_seconds: float
    history: List[GlobalUpdateSummary]
    target: Optional[TargetReport] = None
    checkpoints: List[str] = []
    error: Optional[str] = None


# Response schemas for the read-only API
class EpisodeRecordResponse(BaseModel):
    id: int
    episode_index: int
    domain_id: Optional[str] = None
    known_classes: List[int]
    valid_all: Optional[float] = None
    valid_old: Optional[float] = None
    valid_new: Optional[float] = None
    weight: float
    aborted: bool

    model_config = ConfigDict(from_attributes=True)


class GlobalUpdateResponse(BaseModel):
    id: int
    global_index: int
    strategy: str
    weight_diff_l1: float
    sign_conflict: Optional[float] = None
    weights: List[float]

    model_config = ConfigDict(from_attributes=True)


class RunResponse(BaseModel):
    id: int
    run_id: str
    command: str
    seed: int
    strategy: str
    status: RunStatusEnum
    out_dir: Optional[str] = None
    target_all: Optional[float] = None
    target_old: Optional[float] = None
    target_new: Optional[float] = None
    k_used: Optional[int] = None
    wall_clock_seconds: float
    created_at: datetime

    model_config = ConfigDict(from_attributes=True)


class RunDetailResponse(RunResponse):
    config: Dict[str, Any]
    updates: List[GlobalUpdateResponse] = []


# Response for paginated runs
class RunListResponse(BaseModel):
    total: int
    items: List[RunResponse]

from app.schemas.config import (
    AblationFlags, DataConfig, EncoderConfig, EvaluationConfig, LossConfig, MergeConfig, MergeStrategy,
    RunConfig, ScoreScale, TrainingConfig,
)
from app.schemas.metrics import (
    EpisodeSummary, GcdMetrics, GlobalUpdateSummary, KEstimate, SweepRow, TargetMetrics, TargetReport,
)
from app.schemas.run import (
    EpisodeRecordResponse, GlobalUpdateResponse, RunDetailResponse, RunListResponse, RunManifest, RunResponse,
    RunStatusEnum,
)

__all__ = [
    "AblationFlags", "DataConfig", "EncoderConfig", "EvaluationConfig", "LossConfig", "MergeConfig",
    "MergeStrategy", "RunConfig", "ScoreScale", "TrainingConfig",
    "EpisodeSummary", "GcdMetrics", "GlobalUpdateSummary", "KEstimate", "SweepRow", "TargetMetrics",
    "TargetReport",
    "EpisodeRecordResponse", "GlobalUpdateResponse", "RunDetailResponse", "RunListResponse", "RunManifest",
    "RunResponse", "RunStatusEnum",
]

from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field


class GcdMetrics(BaseModel):
    """Hungarian-matched clustering accuracy on a full set and its old/new subsets"""
    all: float = Field(ge=0, le=1)
    old: float = Field(ge=0, le=1)
    new: float = Field(ge=0, le=1)
    # cluster index -> class id
    matched_permutation: Dict[int, int]
    n_old: int
    n_new: int
    correct_old: int
    correct_new: int
    k_used: Optional[int] = None


class KEstimate(BaseModel):
    """Estimated number of clusters and every (k, score) the search evaluated"""
    k_hat: int
    search_bounds: Tuple[int, int]
    objective_trace: List[Tuple[int, float]]


class EpisodeSummary(BaseModel):
    episode_index: int
    domain_id: Optional[str] = None
    known_classes: List[int]
    valid: Optional[GcdMetrics] = None
    weight: float = 0.0
    aborted: bool = False
    abort_reason: Optional[str] = None


class GlobalUpdateSummary(BaseModel):
    """One history row per global update"""
    global_index: int
    strategy: str
    weight_diff_l1: float
    # None when fewer than two episodes survived
    sign_conflict: Optional[float] = None
    weights: List[float]
    episodes: List[EpisodeSummary]


class TargetMetrics(BaseModel):
    domain_id: str
    metrics: GcdMetrics
    k_estimate: Optional[KEstimate] = None


class TargetReport(BaseModel):
    """Final-model metrics per target domain and their mean"""
    per_domain: List[TargetMetrics]
    mean_all: float
    mean_old: float
    mean_new: float

    @classmethod
    def from_domains(cls, per_domain: List[TargetMetrics]) -> "TargetReport":
        n = len(per_domain)
        return cls(
            per_domain=per_domain,
            mean_all=sum(t.metrics.all for t in per_domain) / n,
            mean_old=sum(t.metrics.old for t in per_domain) / n,
            mean_new=sum(t.metrics.new for t in per_domain) / n,
        )


class SweepRow(BaseModel):
    """One line of a sweep or comparison table"""
    label: str
    value: str
    seed: int
    target: TargetReport
    mean_sign_conflict: Optional[float] = None
    mean_weight_diff_l1: Optional[float] = None

"""
Task vectors and the strategies that fold them into the global model.

Sign convention: a task vector is ``global - local``, so every merge
subtracts its combined update from the global parameters.
"""
import enum
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np

from app.core.errors import ArgumentError
from app.core.numeric import ParamVector, snap_to_grid, softmax
from app.schemas.config import MergeConfig, MergeStrategy, ScoreScale

logger = logging.getLogger(__name__)


class WeightScheme(str, enum.Enum):
    SOFTMAX = "softmax"
    MINMAX = "minmax"
    FIXED = "fixed"


@dataclass(frozen=True)
class TaskVector:
    delta: ParamVector
    episode_index: int
    global_index: int


@dataclass(frozen=True)
class MergeWeights:
    weights: tuple
    scheme: WeightScheme

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        if not weights:
            raise ArgumentError("merge weights must not be empty")
        if self.scheme != WeightScheme.FIXED and any(w < 0 for w in weights):
            raise ArgumentError(f"{self.scheme.value} weights must be non-negative, got {weights}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "scheme", WeightScheme(self.scheme))

    def __len__(self) -> int:
        return len(self.weights)


class MergeOutcome(NamedTuple):
    params: ParamVector
    # global - params, exactly
    update: ParamVector
    weights: Optional[MergeWeights]


Deltas = Sequence[Union[TaskVector, ParamVector]]


def _deltas(task_vectors: Deltas) -> List[ParamVector]:
    if not task_vectors:
        raise ArgumentError("at least one task vector is required")
    out = [tv.delta if isinstance(tv, TaskVector) else tv for tv in task_vectors]
    for d in out[1:]:
        out[0]._check_layout(d)
    return out


def task_vector(global_params: ParamVector, local_params: ParamVector, e: int, g: int) -> TaskVector:
    return TaskVector(global_params - local_params, e, g)


def _check_scores(scores: Sequence[float]) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ArgumentError("at least one score is required")
    if not np.all(np.isfinite(scores)):
        raise ArgumentError(f"scores must be finite, got {scores.tolist()}")
    return scores


def softmax_weights(all_scores: Sequence[float], score_scale: ScoreScale = ScoreScale.FRACTION) -> MergeWeights:
    scores = _check_scores(all_scores)
    if score_scale == ScoreScale.PERCENT:
        scores = scores * 100.0
    return MergeWeights(tuple(softmax(scores)), WeightScheme.SOFTMAX)


def minmax_weights(all_scores: Sequence[float]) -> MergeWeights:
    scores = _check_scores(all_scores)
    low, high = float(scores.min()), float(scores.max())
    if high == low:
        return MergeWeights(tuple(np.full(scores.size, 1.0 / scores.size)), WeightScheme.MINMAX)
    raw = (scores - low) / (high - low)
    return MergeWeights(tuple(raw / raw.sum()), WeightScheme.MINMAX)


def _finish(global_params: ParamVector, combined: np.ndarray, weights: Optional[MergeWeights]) -> MergeOutcome:
    update = ParamVector(snap_to_grid(combined), global_params.layout_id)
    return MergeOutcome(global_params - update, update, weights)


def apply_update(global_params: ParamVector, task_vectors: Deltas, weights: MergeWeights) -> MergeOutcome:
    """theta - sum_e w_e * delta_e"""
    deltas = _deltas(task_vectors)
    global_params._check_layout(deltas[0])
    if len(weights) != len(deltas):
        raise ArgumentError(f"{len(weights)} weights for {len(deltas)} task vectors")
    combined = np.zeros(len(global_params))
    for w, d in zip(weights.weights, deltas):
        combined += w * d.values
    return _finish(global_params, combined, weights)


def fixed_ta_merge(global_params: ParamVector, task_vectors: Deltas, scale: float) -> MergeOutcome:
    if scale < 0:
        raise ArgumentError(f"scale must be non-negative, got {scale}")
    deltas = _deltas(task_vectors)
    return apply_update(global_params, deltas, MergeWeights(tuple([scale] * len(deltas)), WeightScheme.FIXED))


def trim_top_magnitude(values: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Keep the top ``ceil(trim_fraction * n)`` coordinates by magnitude, zero the rest."""
    keep = max(1, math.ceil(trim_fraction * values.size))
    order = np.argsort(-np.abs(values), kind="stable")
    trimmed = np.zeros_like(values)
    trimmed[order[:keep]] = values[order[:keep]]
    return trimmed


def ties_merge(global_params: ParamVector, task_vectors: Deltas, trim_fraction: float) -> MergeOutcome:
    """
    Trim each task vector to its largest entries, elect a sign per
    coordinate from the summed trimmed values, then average the entries
    that agree with it. A coordinate whose trimmed values sum to zero
    is dropped.
    """
    if not 0 < trim_fraction < 1:
        raise ArgumentError(f"trim_fraction must lie in (0, 1), got {trim_fraction}")
    deltas = _deltas(task_vectors)
    global_params._check_layout(deltas[0])
    trimmed = np.vstack([trim_top_magnitude(d.values, trim_fraction) for d in deltas])
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    counts = agree.sum(axis=0)
    sums = np.where(agree, trimmed, 0.0).sum(axis=0)
    merged = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return _finish(global_params, merged, None)


def fisher_merge(
    global_params: ParamVector,
    local_params: Sequence[ParamVector],
    fisher_diagonals: Sequence[ParamVector],
) -> MergeOutcome:
    """Per-coordinate Fisher-weighted mean of the locals; plain mean where total Fisher is zero."""
    if not local_params:
        raise ArgumentError("at least one local model is required")
    if len(local_params) != len(fisher_diagonals):
        raise ArgumentError(f"{len(local_params)} local models for {len(fisher_diagonals)} Fisher diagonals")
    for v in list(local_params) + list(fisher_diagonals):
        global_params._check_layout(v)
    thetas = np.vstack([p.values for p in local_params])
    fishers = np.vstack([f.values for f in fisher_diagonals])
    if np.any(fishers < 0):
        raise ArgumentError("Fisher diagonals must be non-negative")
    total = fishers.sum(axis=0)
    weighted = (fishers * thetas).sum(axis=0)
    merged = np.where(
        total > 0,
        np.divide(weighted, total, out=np.zeros_like(total), where=total > 0),
        thetas.mean(axis=0),
    )
    fallback = int((total == 0).sum())
    if fallback:
        logger.debug(f"Fisher merge fell back to the plain mean on {fallback} coordinates")
    merged_params = ParamVector(snap_to_grid(merged), global_params.layout_id)
    return MergeOutcome(merged_params, global_params - merged_params, None)


def sign_conflict_fraction(task_vectors: Deltas) -> float:
    """Share of touched coordinates where two task vectors carry opposite nonzero signs."""
    deltas = _deltas(task_vectors)
    if len(deltas) < 2:
        raise ArgumentError("sign conflicts need at least 2 task vectors")
    stacked = np.vstack([d.values for d in deltas])
    positive = (stacked > 0).any(axis=0)
    negative = (stacked < 0).any(axis=0)
    touched = int((stacked != 0).any(axis=0).sum())
    if touched == 0:
        return 0.0
    return float((positive & negative).sum()) / touched


def merge(
    global_params: ParamVector,
    task_vectors: Sequence[TaskVector],
    scores: Sequence[float],
    cfg: MergeConfig,
    strategy: Optional[MergeStrategy] = None,
    local_params: Optional[Sequence[ParamVector]] = None,
    fisher_diagonals: Optional[Sequence[ParamVector]] = None,
) -> MergeOutcome:
    strategy = MergeStrategy(strategy or cfg.strategy)
    if len(scores) != len(task_vectors):
        raise ArgumentError(f"{len(scores)} scores for {len(task_vectors)} task vectors")
    if strategy == MergeStrategy.WEIGHTED_TA:
        return apply_update(global_params, task_vectors, softmax_weights(scores, cfg.score_scale))
    if strategy == MergeStrategy.MINMAX_TA:
        return apply_update(global_params, task_vectors, minmax_weights(scores))
    if strategy == MergeStrategy.FIXED_TA:
        scale = cfg.fixed_scale if cfg.fixed_scale is not None else 1.0 / len(task_vectors)
        return fixed_ta_merge(global_params, task_vectors, scale)
    if strategy == MergeStrategy.TIES:
        return ties_merge(global_params, task_vectors, cfg.trim_fraction)
    if strategy == MergeStrategy.FISHER:
        if local_params is None or fisher_diagonals is None:
            raise ArgumentError("fisher merging needs the local models and their Fisher diagonals")
        return fisher_merge(global_params, local_params, fisher_diagonals)
    raise ArgumentError(f"unknown merge strategy {strategy}")

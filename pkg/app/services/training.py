"""
Episode fine-tuning: SGD with a per-episode cosine learning-rate schedule
on the episode objective, plus the diagonal Fisher estimate used by
Fisher merging.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from app.core.errors import DivergenceError
from app.core.numeric import ParamVector, SeededRng
from app.schemas.config import LossConfig, TrainingConfig
from app.services.domains import EpisodeData, augment_batch
from app.services.encoder import ClassifierParams, EncoderParams, init_from_global
from app.services.losses import EpisodeBatch, PrototypeBank, episode_objective

logger = logging.getLogger(__name__)


class StepTrace(NamedTuple):
    epoch: int
    step: int
    lr: float
    total: float
    sup: float
    unsup: float
    ce: float
    adv: float
    margin: float


@dataclass
class FineTuneResult:
    local_params: ParamVector
    classifier: ClassifierParams = field(repr=False)
    trace: List[StepTrace] = field(default_factory=list, repr=False)
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None


def cosine_lr(step: int, total_steps: int, lr: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def steps_per_epoch(episode: EpisodeData, batch_size: int) -> int:
    n_target = 0 if episode.unlabeled_pseudo_target is None else len(episode.unlabeled_pseudo_target)
    return max(1, math.ceil(max(len(episode.labeled_source), n_target) / batch_size))


def make_batch(
    episode: EpisodeData,
    source_idx: np.ndarray,
    target_idx: Optional[np.ndarray],
    rng: SeededRng,
    jitter_sigma: float,
    max_rotation: float,
) -> EpisodeBatch:
    source = episode.labeled_source
    source_x = source.features[source_idx]
    target_x = target_views = None
    if target_idx is not None:
        target_x = episode.unlabeled_pseudo_target.features[target_idx]
        target_views = augment_batch(target_x, rng, jitter_sigma, max_rotation)
    return EpisodeBatch(
        source_x=source_x,
        source_labels=source.labels[source_idx],
        source_views=augment_batch(source_x, rng, jitter_sigma, max_rotation),
        known_classes=episode.known_classes,
        target_x=target_x,
        target_views=target_views,
    )


def _epoch_order(n: int, steps: int, batch_size: int, rng: SeededRng) -> np.ndarray:
    # the shorter set cycles so every step draws a full batch from both sets
    return np.resize(rng.permutation(n), steps * batch_size)


def _full_batch_loss(
    encoder: EncoderParams,
    classifier: ClassifierParams,
    episode: EpisodeData,
    cfg: TrainingConfig,
    rng: SeededRng,
) -> float:
    target_idx = None
    if episode.unlabeled_pseudo_target is not None:
        target_idx = np.arange(len(episode.unlabeled_pseudo_target))
    batch = make_batch(
        episode, np.arange(len(episode.labeled_source)), target_idx, rng, cfg.jitter_sigma, cfg.max_rotation
    )
    return episode_objective(encoder, classifier, batch, cfg.loss).total


def fine_tune(
    global_params: ParamVector,
    episode: EpisodeData,
    cfg: TrainingConfig,
    rng: SeededRng,
    record_loss: bool = False,
) -> FineTuneResult:
    """
    Fine-tune a copy of the global encoder with a fresh classifier head.

    The learning rate anneals from ``cfg.lr`` to ``cfg.lr_min`` over the
    episode's steps. The returned local parameters are snapped to the
    merge grid.
    """
    encoder = init_from_global(global_params)
    classifier = ClassifierParams.zeros(len(episode.known_classes), encoder.dims.embed_dim)
    bank = PrototypeBank()
    result = FineTuneResult(local_params=global_params, classifier=classifier)
    if record_loss:
        result.initial_loss = _full_batch_loss(encoder, classifier, episode, cfg, rng.derive("full-batch"))

    n_source = len(episode.labeled_source)
    has_target = episode.unlabeled_pseudo_target is not None
    per_epoch = steps_per_epoch(episode, cfg.batch_size)
    total_steps = cfg.epochs_per_episode * per_epoch
    step = 0
    for epoch in range(cfg.epochs_per_episode):
        epoch_rng = rng.derive("epoch", epoch)
        source_order = _epoch_order(n_source, per_epoch, cfg.batch_size, epoch_rng)
        target_order = None
        if has_target:
            target_order = _epoch_order(len(episode.unlabeled_pseudo_target), per_epoch, cfg.batch_size, epoch_rng)
        for i in range(per_epoch):
            window = slice(i * cfg.batch_size, (i + 1) * cfg.batch_size)
            batch = make_batch(
                episode,
                source_order[window],
                None if target_order is None else target_order[window],
                epoch_rng,
                cfg.jitter_sigma,
                cfg.max_rotation,
            )
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
            objective = episode_objective(encoder, classifier, batch, cfg.loss, bank=bank)
            if not np.isfinite(objective.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {i}")
            encoder.sgd_step(objective.gradients.encoder, lr)
            classifier.sgd_step(objective.gradients.classifier, lr)
            if not (encoder.is_finite() and classifier.is_finite()):
                raise DivergenceError(f"non-finite parameters after epoch {epoch} step {i}")
            terms = objective.terms
            result.trace.append(
                StepTrace(epoch, step, lr, objective.total, terms["sup"], terms["unsup"],
                          terms["ce"], terms["adv"], terms["margin"])
            )
            step += 1

    result.local_params = encoder.to_param_vector().snapped()
    result.classifier = classifier
    if record_loss:
        result.final_loss = _full_batch_loss(encoder, classifier, episode, cfg, rng.derive("full-batch"))
    logger.debug(f"Episode {episode.episode_index}: {step} steps, known classes {episode.known_classes}")
    return result


def estimate_fisher(
    local_params: ParamVector,
    classifier: ClassifierParams,
    episode: EpisodeData,
    loss_cfg: LossConfig,
    n_samples: int,
    rng: SeededRng,
    jitter_sigma: float = 0.05,
    max_rotation: float = 0.15,
) -> ParamVector:
    """
    Diagonal Fisher of the encoder as the mean squared gradient of the episode
    objective over ``n_samples`` two-sample batches: one source sample and one
    pseudo-target sample, or two source samples without a pseudo-target.
    """
    encoder = init_from_global(local_params)
    n_source = len(episode.labeled_source)
    has_target = episode.unlabeled_pseudo_target is not None
    squares = np.zeros(len(local_params))
    for i in range(n_samples):
        if has_target:
            source_idx = rng.integers(0, n_source, size=1)
            target_idx = rng.integers(0, len(episode.unlabeled_pseudo_target), size=1)
        else:
            source_idx = rng.choice(n_source, size=2, replace=n_source < 2)
            target_idx = None
        batch = make_batch(episode, source_idx, target_idx, rng, jitter_sigma, max_rotation)
        objective = episode_objective(encoder, classifier, batch, loss_cfg)
        squares += objective.gradients.encoder.to_param_vector().values ** 2
    return ParamVector(squares / n_samples, local_params.layout_id)

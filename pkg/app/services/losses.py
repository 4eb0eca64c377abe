"""
Episode objective terms with analytic gradients.

Every loss is a batch mean. Embedding inputs are unit vectors, so cosine
similarity is the dot product. Probability inputs are ``n x (C + 1)``
matrices (one row per sample, open-set slot last) or ClassProbabilities.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from app.core.errors import ArgumentError, DegenerateInputError
from app.core.numeric import l2_normalize
from app.schemas.config import LossConfig
from app.services.encoder import ClassifierParams, ClassProbabilities, EncoderParams, EpisodeNetwork, NetworkGradients

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

Probs = Union[np.ndarray, ClassProbabilities, Sequence[ClassProbabilities]]


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


def _prob_matrix(probs: Probs) -> np.ndarray:
    if isinstance(probs, ClassProbabilities):
        return probs.as_vector()[None, :]
    if isinstance(probs, (list, tuple)) and probs and isinstance(probs[0], ClassProbabilities):
        return np.vstack([p.as_vector() for p in probs])
    matrix = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if matrix.shape[1] < 2:
        raise ArgumentError("probabilities need at least one known slot and the open-set slot")
    return matrix


@dataclass(frozen=True)
class PrototypeSet:
    class_ids: Tuple[int, ...]
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if len(self.class_ids) != vectors.shape[0]:
            raise ArgumentError(f"{len(self.class_ids)} class ids for {vectors.shape[0]} prototypes")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ArgumentError(f"duplicate prototype classes in {self.class_ids}")
        vectors = np.vstack([l2_normalize(v) for v in vectors])
        vectors.setflags(write=False)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        object.__setattr__(self, "vectors", vectors)

    def index_of(self, labels: np.ndarray) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        missing = sorted({int(y) for y in labels} - set(lookup))
        if missing:
            raise ArgumentError(f"no prototype for classes {missing}")
        return np.array([lookup[int(y)] for y in labels], dtype=np.int64)


class PrototypeBank:
    """Running cumulative mean of class embeddings, used for classes absent from a batch."""

    def __init__(self):
        self._sums: Dict[int, np.ndarray] = {}
        self._counts: Dict[int, int] = {}

    def update(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        for class_id in np.unique(labels):
            rows = embeddings[labels == class_id]
            key = int(class_id)
            self._sums[key] = self._sums.get(key, 0.0) + rows.sum(axis=0)
            self._counts[key] = self._counts.get(key, 0) + rows.shape[0]

    def mean(self, class_id: int) -> Optional[np.ndarray]:
        if class_id not in self._counts:
            return None
        return self._sums[class_id] / self._counts[class_id]


def compute_prototypes(
    embeddings: np.ndarray,
    labels: np.ndarray,
    class_ids: Sequence[int],
    bank: Optional[PrototypeBank] = None,
) -> PrototypeSet:
    """
    Normalized class means of the batch embeddings. A class absent from the
    batch takes its running mean from ``bank``; with no history it is left out.
    """
    embeddings = np.atleast_2d(embeddings)
    labels = np.asarray(labels)
    if bank is not None:
        bank.update(embeddings, labels)
    kept, vectors = [], []
    for class_id in class_ids:
        rows = embeddings[labels == class_id]
        mean = rows.mean(axis=0) if rows.shape[0] else (bank.mean(int(class_id)) if bank else None)
        if mean is None:
            continue
        if not np.any(mean):
            raise DegenerateInputError(f"class {class_id} has a zero mean embedding")
        kept.append(int(class_id))
        vectors.append(mean)
    if not kept:
        raise ArgumentError("no class has embeddings to build a prototype from")
    return PrototypeSet(tuple(kept), np.vstack(vectors))


def sup_contrastive(embeddings: np.ndarray, labels: Sequence[int], prototypes: PrototypeSet, tau: float) -> LossValue:
    """Pull each labeled embedding toward its class prototype; prototypes are constants."""
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    if z.shape[0] == 0:
        raise ArgumentError("sup_contrastive needs a non-empty batch")
    if z.shape[0] != labels.size:
        raise ArgumentError(f"{z.shape[0]} embeddings for {labels.size} labels")
    if tau <= 0:
        raise ArgumentError(f"tau must be positive, got {tau}")
    targets = prototypes.index_of(labels)
    rows = np.arange(labels.size)
    logits = z @ prototypes.vectors.T / tau
    per_sample = logsumexp(logits, axis=1) - logits[rows, targets]
    weights = softmax(logits, axis=1)
    weights[rows, targets] -= 1.0
    grad = weights @ prototypes.vectors / (tau * labels.size)
    return LossValue(float(np.mean(per_sample)), grad)


def unsup_contrastive(
    embeddings: np.ndarray, positives: np.ndarray, tau: float, all_views: bool = False
) -> LossValue:
    """
    Instance contrast between each anchor and its augmented view.

    The denominator holds the anchor's own positive plus every other anchor.
    With ``all_views`` the other anchors' positives join the denominator too.
    Returns the gradient for anchors and positives stacked as ``[anchors; positives]``.
    """
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    n = z.shape[0]
    if n < 2:
        raise ArgumentError(f"unsup_contrastive needs at least 2 anchors, got {n}")
    if pos.shape != z.shape:
        raise ArgumentError(f"positives {pos.shape} are not aligned with anchors {z.shape}")
    if tau <= 0:
        raise ArgumentError(f"tau must be positive, got {tau}")

    keys = np.vstack([z, pos])
    rows = np.arange(n)
    allowed = np.zeros((n, 2 * n), dtype=bool)
    allowed[:, :n] = True
    allowed[rows, rows] = False
    if all_views:
        allowed[:, n:] = True
    allowed[rows, n + rows] = True

    logits = np.where(allowed, z @ keys.T / tau, -np.inf)
    positive_logits = logits[rows, n + rows]
    per_anchor = logsumexp(logits, axis=1) - positive_logits

    weights = softmax(logits, axis=1)
    weights[rows, n + rows] -= 1.0
    grad_anchor = weights @ keys / (tau * n)
    grad_keys = weights.T @ z / (tau * n)
    grad = grad_keys
    grad[:n] += grad_anchor
    return LossValue(float(np.mean(per_anchor)), grad)


def source_ce(probs: Probs, labels: Sequence[int]) -> LossValue:
    """Cross-entropy of labeled samples; ``labels`` index the known slots."""
    p = _prob_matrix(probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != p.shape[0]:
        raise ArgumentError(f"{p.shape[0]} probability rows for {labels.size} labels")
    if np.any(labels < 0) or np.any(labels >= p.shape[1] - 1):
        raise ArgumentError(f"labels must index one of {p.shape[1] - 1} known classes")
    rows = np.arange(labels.size)
    picked = p[rows, labels]
    clamped = picked < PROB_FLOOR
    if np.any(clamped):
        logger.warning(f"Clamped {int(clamped.sum())} zero label probabilities at {PROB_FLOOR}")
    safe = np.maximum(picked, PROB_FLOOR)
    grad = np.zeros_like(p)
    grad[rows, labels] = np.where(clamped, 0.0, -1.0 / safe) / labels.size
    return LossValue(float(np.mean(-np.log(safe))), grad)


def adv_osda(probs: Probs, alpha: float) -> LossValue:
    """Binary cross-entropy pulling the open-set probability toward alpha."""
    if not 0 < alpha < 1:
        raise ArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    p = _prob_matrix(probs)
    raw = p[:, -1]
    p_open = np.clip(raw, PROB_FLOOR, 1.0 - PROB_FLOOR)
    values = -alpha * np.log(p_open) - (1.0 - alpha) * np.log(1.0 - p_open)
    inside = (raw > PROB_FLOOR) & (raw < 1.0 - PROB_FLOOR)
    grad = np.zeros_like(p)
    grad[:, -1] = np.where(inside, -alpha / p_open + (1.0 - alpha) / (1.0 - p_open), 0.0) / p.shape[0]
    return LossValue(float(np.mean(values)), grad)


def margin(probs: Probs, m: float) -> LossValue:
    """
    Hinge on the gap between the top known probability and the open-set
    probability ``1 - sum(known)``. Argmax ties go to the lowest index.
    """
    if not 0 < m < 1:
        raise ArgumentError(f"margin m must lie in (0, 1), got {m}")
    p = _prob_matrix(probs)
    known = p[:, :-1]
    n = p.shape[0]
    top = np.argmax(known, axis=1)
    rows = np.arange(n)
    gap = known[rows, top] - (1.0 - known.sum(axis=1))
    slack = m - np.abs(gap)
    active = slack > 0
    grad = np.zeros_like(p)
    direction = (-np.sign(gap) * active)[:, None]
    grad[:, :-1] = direction
    grad[rows, top] += direction[:, 0]
    return LossValue(float(np.mean(np.maximum(slack, 0.0))), grad / n)


@dataclass(frozen=True)
class EpisodeBatch:
    """
    One training step's inputs. ``*_views`` are augmented copies aligned row
    for row with their originals. The target part is absent when the episode
    trains without a pseudo-target.
    """

    source_x: np.ndarray = field(repr=False)
    source_labels: np.ndarray = field(repr=False)
    source_views: np.ndarray = field(repr=False)
    known_classes: Tuple[int, ...]
    target_x: Optional[np.ndarray] = field(default=None, repr=False)
    target_views: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_source(self) -> int:
        return self.source_x.shape[0]

    @property
    def n_target(self) -> int:
        return 0 if self.target_x is None else self.target_x.shape[0]

    def stacked_inputs(self) -> np.ndarray:
        parts = [self.source_x]
        views = [self.source_views]
        if self.target_x is not None:
            parts.append(self.target_x)
            views.append(self.target_views)
        return np.vstack(parts + views)

    def label_indices(self) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.known_classes)}
        try:
            return np.array([lookup[int(y)] for y in self.source_labels], dtype=np.int64)
        except KeyError as e:
            raise ArgumentError(f"source label {e.args[0]} is not a known class")

    def drop_rows(self, keep_source: np.ndarray, keep_target: np.ndarray) -> "EpisodeBatch":
        return EpisodeBatch(
            source_x=self.source_x[keep_source],
            source_labels=self.source_labels[keep_source],
            source_views=self.source_views[keep_source],
            known_classes=self.known_classes,
            target_x=None if self.target_x is None else self.target_x[keep_target],
            target_views=None if self.target_views is None else self.target_views[keep_target],
        )


class ObjectiveResult(NamedTuple):
    total: float
    gradients: NetworkGradients
    terms: Dict[str, float]
    skipped: int

    def encoder_objective(self, cfg: LossConfig) -> float:
        """
        The objective the encoder descends: the adversarial term enters with
        -grl_factor and the margin term only with ``margin_to_encoder``.
        """
        value = self.total - (1.0 + cfg.grl_factor) * cfg.adv_weight * self.terms["adv"]
        if not cfg.margin_to_encoder:
            value -= cfg.lambda_margin * self.terms["margin"]
        return value


def _split_rows(batch: EpisodeBatch, norms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ns, nt = batch.n_source, batch.n_target
    ok = norms > 0
    keep_source = ok[:ns] & ok[ns + nt:2 * ns + nt]
    keep_target = ok[ns:ns + nt] & ok[2 * ns + nt:]
    return keep_source, keep_target


def episode_objective(
    encoder: EncoderParams,
    classifier: ClassifierParams,
    batch: EpisodeBatch,
    cfg: LossConfig,
    prototypes: Optional[PrototypeSet] = None,
    bank: Optional[PrototypeBank] = None,
) -> ObjectiveResult:
    """
    Weighted sum of supervised and unsupervised contrast, source
    cross-entropy, the adversarial open-set term and the margin term.

    Without ``prototypes`` they are the current batch's class means (falling
    back to ``bank``), held constant for the gradient.
    """
    network = EpisodeNetwork(encoder, classifier)
    z, probs = network.forward(batch.stacked_inputs())
    keep_source, keep_target = _split_rows(batch, network.norms)
    skipped = int((~keep_source).sum() + (~keep_target).sum())
    if skipped:
        logger.warning(f"Skipped {skipped} samples with a zero embedding")
        batch = batch.drop_rows(keep_source, keep_target)
        if batch.n_source == 0:
            raise DegenerateInputError("every source sample in the batch has a zero embedding")
        z, probs = network.forward(batch.stacked_inputs())

    ns, nt = batch.n_source, batch.n_target
    n_anchor = ns + nt
    grad_z = np.zeros_like(z)
    grad_probs = np.zeros_like(probs)
    grad_probs_adv = np.zeros_like(probs)
    grad_probs_head = np.zeros_like(probs)
    terms = {"sup": 0.0, "unsup": 0.0, "ce": 0.0, "adv": 0.0, "margin": 0.0}

    if prototypes is None:
        prototypes = compute_prototypes(z[:ns], batch.source_labels, batch.known_classes, bank)
    sup = sup_contrastive(z[:ns], batch.source_labels, prototypes, cfg.tau)
    terms["sup"] = sup.value
    grad_z[:ns] += cfg.sup_weight * sup.grad

    if n_anchor >= 2:
        unsup = unsup_contrastive(z[:n_anchor], z[n_anchor:], cfg.tau, cfg.unsup_all_views)
        terms["unsup"] = unsup.value
        grad_z += cfg.unsup_weight * unsup.grad

    ce = source_ce(probs[:ns], batch.label_indices())
    terms["ce"] = ce.value
    grad_probs[:ns] += cfg.ce_weight * ce.grad

    if nt:
        adv = adv_osda(probs[ns:n_anchor], cfg.alpha)
        terms["adv"] = adv.value
        grad_probs_adv[ns:n_anchor] += cfg.adv_weight * adv.grad
        gap = margin(probs[ns:n_anchor], cfg.margin_m)
        terms["margin"] = gap.value
        margin_grads = grad_probs if cfg.margin_to_encoder else grad_probs_head
        margin_grads[ns:n_anchor] += cfg.lambda_margin * gap.grad

    total = (
        cfg.sup_weight * terms["sup"]
        + cfg.unsup_weight * terms["unsup"]
        + cfg.ce_weight * terms["ce"]
        + cfg.adv_weight * terms["adv"]
        + cfg.lambda_margin * terms["margin"]
    )
    if not np.isfinite(total):
        logger.error(f"Non-finite episode objective: {terms}")
    gradients = network.backward(grad_z, grad_probs, grad_probs_adv, cfg.grl_factor, grad_probs_head)
    return ObjectiveResult(float(total), gradients, terms, skipped)

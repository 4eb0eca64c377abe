"""
Feed-forward embedding network and the episode classifier head.

The encoder maps D-dim features through a tanh hidden layer to an
L2-normalized E-dim embedding. The classifier maps embeddings to
``n_known + 1`` probabilities; the last slot is the open-set class.
"""
import logging
import re
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import softmax

from app.core.errors import (
    ArgumentError,
    DegenerateInputError,
    LayoutMismatchError,
    StateError,
)
from app.core.numeric import ParamVector, SeededRng

logger = logging.getLogger(__name__)

_LAYOUT_RE = re.compile(r"^mlp-(\d+)-(\d+)-(\d+)$")


class EncoderDims(NamedTuple):
    input_dim: int
    hidden_dim: int
    embed_dim: int

    @property
    def layout_id(self) -> str:
        return f"mlp-{self.input_dim}-{self.hidden_dim}-{self.embed_dim}"

    @property
    def param_count(self) -> int:
        d, h, e = self
        return h * d + h + e * h + e

    @classmethod
    def from_layout_id(cls, layout_id: str) -> "EncoderDims":
        match = _LAYOUT_RE.match(layout_id)
        if match is None:
            raise LayoutMismatchError(f"{layout_id!r} is not an encoder layout")
        return cls(*(int(g) for g in match.groups()))


@dataclass
class EncoderParams:
    """Weights in layout order W1 (H x D), b1, W2 (E x H), b2."""

    w1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)
    b2: np.ndarray = field(repr=False)

    @property
    def dims(self) -> EncoderDims:
        return EncoderDims(self.w1.shape[1], self.w1.shape[0], self.w2.shape[0])

    def to_param_vector(self) -> ParamVector:
        return ParamVector(
            np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]),
            self.dims.layout_id,
        )

    @classmethod
    def from_param_vector(cls, vector: ParamVector, dims: Optional[EncoderDims] = None) -> "EncoderParams":
        if dims is None:
            dims = EncoderDims.from_layout_id(vector.layout_id)
        if vector.layout_id != dims.layout_id or len(vector) != dims.param_count:
            raise LayoutMismatchError(
                f"vector {vector.layout_id}[{len(vector)}] does not fit encoder "
                f"{dims.layout_id}[{dims.param_count}]"
            )
        d, h, e = dims
        v = np.array(vector.values, dtype=np.float64)
        parts = np.split(v, np.cumsum([h * d, h, e * h]))
        return cls(parts[0].reshape(h, d), parts[1], parts[2].reshape(e, h), parts[3])

    @classmethod
    def zeros_like(cls, other: "EncoderParams") -> "EncoderParams":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return self.w1, self.b1, self.w2, self.b2

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(a.copy() for a in self.arrays()))

    def sgd_step(self, grad: "EncoderParams", lr: float) -> None:
        for param, g in zip(self.arrays(), grad.arrays()):
            param -= lr * g

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class ClassifierParams:
    """Linear map E -> n_known + 1 logits; the last row scores the open-set class."""

    weight: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)

    @classmethod
    def zeros(cls, n_known: int, embed_dim: int) -> "ClassifierParams":
        if n_known < 1:
            raise ArgumentError(f"classifier needs at least one known class, got {n_known}")
        return cls(np.zeros((n_known + 1, embed_dim)), np.zeros(n_known + 1))

    @property
    def n_known(self) -> int:
        return self.weight.shape[0] - 1

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[1]

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return self.weight, self.bias

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.weight.copy(), self.bias.copy())

    def sgd_step(self, grad: "ClassifierParams", lr: float) -> None:
        self.weight -= lr * grad.weight
        self.bias -= lr * grad.bias

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias)))


@dataclass(frozen=True)
class ClassProbabilities:
    known: np.ndarray = field(repr=False)
    open_set: float

    def __post_init__(self):
        known = np.array(self.known, dtype=np.float64).reshape(-1)
        if known.size == 0:
            raise ArgumentError("at least one known-class probability is required")
        total = float(known.sum()) + float(self.open_set)
        if np.any(known < 0) or np.any(known > 1) or not 0 <= self.open_set <= 1:
            raise ArgumentError("class probabilities must lie in [0, 1]")
        if abs(total - 1.0) > 1e-9:
            raise ArgumentError(f"class probabilities sum to {total}, expected 1")
        known.setflags(write=False)
        object.__setattr__(self, "known", known)
        object.__setattr__(self, "open_set", float(self.open_set))

    @classmethod
    def from_vector(cls, p) -> "ClassProbabilities":
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        return cls(p[:-1], float(p[-1]))

    def as_vector(self) -> np.ndarray:
        return np.append(self.known, self.open_set)


def init_encoder(dims: EncoderDims, rng: SeededRng, init_scale: float = 1.0) -> EncoderParams:
    d, h, e = dims
    if min(dims) < 1:
        raise ArgumentError(f"encoder dimensions must be positive, got {tuple(dims)}")
    return EncoderParams(
        w1=rng.normal(0.0, init_scale / np.sqrt(d), size=(h, d)),
        b1=np.zeros(h),
        w2=rng.normal(0.0, init_scale / np.sqrt(h), size=(e, h)),
        b2=np.zeros(e),
    )


def init_from_global(global_params: ParamVector, dims: Optional[EncoderDims] = None) -> EncoderParams:
    """Independent encoder copy of the global model."""
    return EncoderParams.from_param_vector(global_params, dims)


class EncoderForward(NamedTuple):
    inputs: np.ndarray
    hidden: np.ndarray
    raw: np.ndarray
    norms: np.ndarray
    embeddings: np.ndarray


def encoder_forward(params: EncoderParams, x: np.ndarray) -> EncoderForward:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.dims.input_dim:
        raise ArgumentError(f"encoder expects {params.dims.input_dim}-d inputs, got {x.shape[1]}-d")
    hidden = np.tanh(x @ params.w1.T + params.b1)
    raw = hidden @ params.w2.T + params.b2
    norms = np.linalg.norm(raw, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return EncoderForward(x, hidden, raw, norms, raw / safe[:, None])


def embed(params: EncoderParams, x) -> np.ndarray:
    forward = encoder_forward(params, np.asarray(x, dtype=np.float64).reshape(1, -1))
    if forward.norms[0] == 0.0:
        raise DegenerateInputError("pre-normalization embedding is zero")
    return forward.embeddings[0]


def embed_batch(params: EncoderParams, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Embeddings plus a validity mask; rows with a zero raw embedding are flagged invalid."""
    forward = encoder_forward(params, x)
    valid = forward.norms > 0
    skipped = int((~valid).sum())
    if skipped:
        logger.warning(f"Skipped {skipped} samples with a zero embedding")
    return forward.embeddings, valid


def class_probabilities(clf: ClassifierParams, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    if z.shape[1] != clf.embed_dim:
        raise ArgumentError(f"classifier expects {clf.embed_dim}-d embeddings, got {z.shape[1]}-d")
    return softmax(z @ clf.weight.T + clf.bias, axis=1)


def classify(clf: ClassifierParams, z) -> ClassProbabilities:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ArgumentError(f"classify takes one embedding, got shape {z.shape}")
    return ClassProbabilities.from_vector(class_probabilities(clf, z)[0])


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Gradient at the logits given the gradient at the softmax output."""
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True))


def encoder_backward(params: EncoderParams, forward: EncoderForward, grad_z: np.ndarray) -> EncoderParams:
    z = forward.embeddings
    safe = np.where(forward.norms > 0, forward.norms, 1.0)
    grad_raw = (grad_z - z * np.sum(z * grad_z, axis=1, keepdims=True)) / safe[:, None]
    grad_raw[forward.norms == 0] = 0.0
    grad_hidden = grad_raw @ params.w2
    grad_pre = grad_hidden * (1.0 - forward.hidden ** 2)
    return EncoderParams(
        w1=grad_pre.T @ forward.inputs,
        b1=grad_pre.sum(axis=0),
        w2=grad_raw.T @ forward.hidden,
        b2=grad_raw.sum(axis=0),
    )


class NetworkGradients(NamedTuple):
    encoder: EncoderParams
    classifier: ClassifierParams


class EpisodeNetwork:
    """
    Encoder plus classifier for one episode with a cached forward pass.

    ``backward`` takes the loss gradients at the embeddings and at the class
    probabilities. Probability gradients from the adversarial branch reach the
    encoder multiplied by ``-grl_factor``; the classifier sees them unchanged.
    ``grad_probs_head`` trains the classifier only.
    """

    def __init__(self, encoder: EncoderParams, classifier: ClassifierParams):
        if encoder.dims.embed_dim != classifier.embed_dim:
            raise ArgumentError(
                f"encoder embeds into {encoder.dims.embed_dim} dims, classifier reads {classifier.embed_dim}"
            )
        self.encoder = encoder
        self.classifier = classifier
        self._forward: Optional[EncoderForward] = None
        self._probs: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        self._forward = encoder_forward(self.encoder, x)
        self._probs = class_probabilities(self.classifier, self._forward.embeddings)
        return self._forward.embeddings, self._probs

    @property
    def norms(self) -> np.ndarray:
        if self._forward is None:
            raise StateError("no forward pass cached")
        return self._forward.norms

    def backward(
        self,
        grad_z: Optional[np.ndarray] = None,
        grad_probs: Optional[np.ndarray] = None,
        grad_probs_adversarial: Optional[np.ndarray] = None,
        grl_factor: float = 1.0,
        grad_probs_head: Optional[np.ndarray] = None,
    ) -> NetworkGradients:
        if self._forward is None or self._probs is None:
            raise StateError("backward called before forward; no cached activations")
        z, probs = self._forward.embeddings, self._probs
        zeros = np.zeros_like(probs)
        grad_logits = softmax_backward(probs, zeros if grad_probs is None else grad_probs)
        grad_logits_adv = softmax_backward(
            probs, zeros if grad_probs_adversarial is None else grad_probs_adversarial
        )

        total_logits = grad_logits + grad_logits_adv
        if grad_probs_head is not None:
            total_logits = total_logits + softmax_backward(probs, grad_probs_head)
        classifier_grad = ClassifierParams(total_logits.T @ z, total_logits.sum(axis=0))

        grad_embed = np.zeros_like(z) if grad_z is None else np.array(grad_z, dtype=np.float64)
        w = self.classifier.weight
        grad_embed = grad_embed + grad_logits @ w - grl_factor * (grad_logits_adv @ w)
        encoder_grad = encoder_backward(self.encoder, self._forward, grad_embed)
        return NetworkGradients(encoder_grad, classifier_grad)

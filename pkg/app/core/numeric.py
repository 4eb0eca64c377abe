"""
Flat parameter vectors, seeded randomness and small numeric helpers shared
by the rest of the package.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import softmax as _scipy_softmax

from app.core.errors import (
    ArgumentError,
    DegenerateInputError,
    DivergenceError,
    EvaluationError,
    LayoutMismatchError,
)

logger = logging.getLogger(__name__)

# Merge-boundary parameters live on this fixed-point grid. Sums and differences
# of grid values below GRID_LIMIT are exact in float64.
GRID_QUANTUM = 2.0 ** -40
GRID_LIMIT = 2.0 ** 11

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ArgumentError(f"rng keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """
    Deterministic random stream built on numpy's PCG64.

    Child streams are derived by key (``rng.derive(g, e)``) so a stream for
    global update g and episode e does not depend on how many draws other
    episodes made.
    """

    def __init__(self, seed: int, key: Sequence[Key] = ()):
        if seed < 0 or seed >= 2 ** 64:
            raise ArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(_key_to_int(k) for k in key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def derive(self, *keys: Key) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(_key_to_int(k) for k in keys))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.generator.permutation(x)

    def random(self, size=None):
        return self.generator.random(size)

    def __repr__(self):
        return f"<SeededRng(seed={self.seed}, key={self.key})>"


@dataclass(frozen=True)
class ParamVector:
    """Model weights flattened by layer index, then row-major within a matrix."""

    values: np.ndarray = field(repr=False)
    layout_id: str

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise ArgumentError("parameter vector must not be empty")
        if not np.all(np.isfinite(values)):
            raise ArgumentError(f"parameter vector for {self.layout_id} has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, size: int, layout_id: str) -> "ParamVector":
        return cls(np.zeros(size), layout_id)

    def __len__(self) -> int:
        return self.values.size

    def _check_layout(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise ArgumentError(f"expected ParamVector, got {type(other).__name__}")
        if other.layout_id != self.layout_id or other.values.size != self.values.size:
            raise LayoutMismatchError(
                f"layout {other.layout_id}[{other.values.size}] does not match "
                f"{self.layout_id}[{self.values.size}]"
            )

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_layout(other)
        return ParamVector(self.values + other.values, self.layout_id)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_layout(other)
        return ParamVector(self.values - other.values, self.layout_id)

    def __mul__(self, scale: float) -> "ParamVector":
        return ParamVector(self.values * float(scale), self.layout_id)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout_id)

    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.values)))

    def bitwise_equal(self, other: "ParamVector") -> bool:
        return (
            self.layout_id == other.layout_id
            and self.values.tobytes() == other.values.tobytes()
        )

    def snapped(self) -> "ParamVector":
        return ParamVector(snap_to_grid(self.values), self.layout_id)


def snap_to_grid(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if not np.isfinite(peak) or peak > GRID_LIMIT:
        raise DivergenceError(f"parameter magnitude {peak} exceeds grid limit {GRID_LIMIT}")
    # + 0.0 folds negative zero into positive zero
    return np.round(values / GRID_QUANTUM) * GRID_QUANTUM + 0.0


def softmax(scores: Sequence[float]) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ArgumentError("softmax needs at least one score")
    if not np.all(np.isfinite(scores)):
        raise ArgumentError(f"softmax scores must be finite, got {scores.tolist()}")
    # scipy subtracts the max before exponentiating
    return _scipy_softmax(scores)


def l2_normalize(v: Sequence[float]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInputError("cannot normalize a zero vector")
    return v / norm


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: Sequence[float], eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + eps
        upper = float(f(x))
        flat_x[i] = original - eps
        lower = float(f(x))
        flat_x[i] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise EvaluationError(f"non-finite evaluation at coordinate {i}")
        flat_grad[i] = (upper - lower) / (2.0 * eps)
    return grad


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))

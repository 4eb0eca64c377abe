"""
Synthetic source, pseudo-target, validation and target domains.

A domain is an affine style transform plus Gaussian noise applied to fresh
draws from the class distributions, so class membership survives every
transform while the feature distribution shifts.
"""
import enum
import logging
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ArgumentError, ConfigurationError, GenerationError
from app.core.numeric import SeededRng, round_half_up
from app.schemas.config import DataConfig

logger = logging.getLogger(__name__)

SOURCE_DOMAIN_ID = "source"
AUGMENTED_DOMAIN_ID = "augmented"


class DomainRole(str, enum.Enum):
    SOURCE = "source"
    EPISODE_TRAIN = "episode_train"
    VALIDATION = "validation"
    TARGET = "target"


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    mean: np.ndarray = field(repr=False)
    covariance_scale: float = 1.0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        if self.covariance_scale <= 0:
            raise ArgumentError(f"covariance_scale must be positive for class {self.class_id}")
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)

    @property
    def dim(self) -> int:
        return self.mean.size

    def draw(self, n: int, rng: SeededRng) -> np.ndarray:
        return self.mean + self.covariance_scale * rng.normal(size=(n, self.dim))


def rotation_matrix(dim: int, angle: float) -> np.ndarray:
    """Rotate every coordinate pair (0,1), (2,3), ... by the same angle."""
    matrix = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        matrix[i, i], matrix[i, i + 1] = c, -s
        matrix[i + 1, i], matrix[i + 1, i + 1] = s, c
    return matrix


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    rotation_angle: float
    scale_factors: np.ndarray = field(repr=False)
    shift: np.ndarray = field(repr=False)
    noise_sigma: float
    role: DomainRole

    def __post_init__(self):
        scales = np.array(self.scale_factors, dtype=np.float64).reshape(-1)
        shift = np.array(self.shift, dtype=np.float64).reshape(-1)
        if np.any(scales <= 0):
            raise ArgumentError(f"domain {self.domain_id}: scale factors must be positive")
        if self.noise_sigma < 0:
            raise ArgumentError(f"domain {self.domain_id}: noise_sigma must be non-negative")
        if scales.size != shift.size:
            raise ArgumentError(
                f"domain {self.domain_id}: {scales.size} scale factors but {shift.size} shift entries"
            )
        scales.setflags(write=False)
        shift.setflags(write=False)
        object.__setattr__(self, "scale_factors", scales)
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "role", DomainRole(self.role))

    @classmethod
    def identity(cls, domain_id: str, dim: int, role: DomainRole) -> "DomainSpec":
        return cls(domain_id, 0.0, np.ones(dim), np.zeros(dim), 0.0, role)

    @property
    def dim(self) -> int:
        return self.scale_factors.size

    def apply(self, x: np.ndarray, rng: SeededRng) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ArgumentError(
                f"domain {self.domain_id} transforms {self.dim}-d features, got {x.shape[1]}-d"
            )
        styled = (x * self.scale_factors) @ rotation_matrix(self.dim, self.rotation_angle).T + self.shift
        if self.noise_sigma > 0:
            styled = styled + rng.normal(0.0, self.noise_sigma, size=styled.shape)
        return styled

    def same_transform(self, other: "DomainSpec") -> bool:
        return (
            self.dim == other.dim
            and self.rotation_angle == other.rotation_angle
            and self.noise_sigma == other.noise_sigma
            and np.array_equal(self.scale_factors, other.scale_factors)
            and np.array_equal(self.shift, other.shift)
        )


class LabeledSample(NamedTuple):
    features: np.ndarray
    label: int
    domain_id: str


class UnlabeledSample(NamedTuple):
    features: np.ndarray
    domain_id: str


@dataclass(frozen=True)
class LabeledSet:
    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    domain_ids: np.ndarray = field(repr=False)

    def __post_init__(self):
        _freeze_samples(self, self.labels)

    def __len__(self) -> int:
        return self.labels.size

    def __iter__(self) -> Iterator[LabeledSample]:
        for x, y, d in zip(self.features, self.labels, self.domain_ids):
            yield LabeledSample(x, int(y), str(d))

    @property
    def class_ids(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels))

    def subset(self, mask: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.features[mask], self.labels[mask], self.domain_ids[mask])

    def restrict_to(self, class_ids: Sequence[int]) -> "LabeledSet":
        return self.subset(np.isin(self.labels, list(class_ids)))

    def as_unlabeled(self) -> "UnlabeledSet":
        return UnlabeledSet(self.features, self.domain_ids, self.labels)


@dataclass(frozen=True)
class UnlabeledSet:
    """
    Unlabeled samples. ``hidden_labels`` carries the ground truth for
    evaluation code only; training never reads it.
    """

    features: np.ndarray = field(repr=False)
    domain_ids: np.ndarray = field(repr=False)
    hidden_labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        _freeze_samples(self, self.hidden_labels)

    def __len__(self) -> int:
        return self.hidden_labels.size

    def __iter__(self) -> Iterator[UnlabeledSample]:
        for x, d in zip(self.features, self.domain_ids):
            yield UnlabeledSample(x, str(d))

    @classmethod
    def concat(cls, parts: Sequence["UnlabeledSet"]) -> "UnlabeledSet":
        if not parts:
            raise ArgumentError("nothing to concatenate")
        return cls(
            np.vstack([p.features for p in parts]),
            np.concatenate([p.domain_ids for p in parts]),
            np.concatenate([p.hidden_labels for p in parts]),
        )


def _freeze_samples(obj, labels) -> None:
    features = np.array(obj.features, dtype=np.float64)
    if features.ndim != 2:
        raise ArgumentError(f"features must be a 2-d array, got shape {features.shape}")
    labels = np.array(labels, dtype=np.int64).reshape(-1)
    domain_ids = np.array(obj.domain_ids, dtype=object).reshape(-1)
    if not (features.shape[0] == labels.size == domain_ids.size):
        raise ArgumentError("features, labels and domain ids must have the same length")
    if not np.all(np.isfinite(features)):
        raise ArgumentError("sample features must be finite")
    for arr in (features, labels, domain_ids):
        arr.setflags(write=False)
    object.__setattr__(obj, "features", features)
    object.__setattr__(obj, "domain_ids", domain_ids)
    label_field = "labels" if hasattr(obj, "labels") else "hidden_labels"
    object.__setattr__(obj, label_field, labels)


@dataclass(frozen=True)
class EpisodeData:
    labeled_source: LabeledSet
    # None when the episode trains without a pseudo-target domain
    unlabeled_pseudo_target: Optional[UnlabeledSet]
    known_classes: Tuple[int, ...]
    episode_index: int = 0
    domain_id: Optional[str] = None

    def __post_init__(self):
        known = set(self.known_classes)
        if not known:
            raise ArgumentError("an episode needs at least one known class")
        stray = set(self.labeled_source.class_ids) - known
        if stray:
            raise ArgumentError(f"labeled source contains classes outside the known set: {sorted(stray)}")


@dataclass(frozen=True)
class ValidationSet:
    samples: UnlabeledSet
    source_domains: Tuple[DomainSpec, ...]

    @property
    def class_ids(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.samples.hidden_labels))


@dataclass(frozen=True)
class SyntheticProblem:
    classes: Tuple[ClassSpec, ...]
    source_class_ids: Tuple[int, ...]
    source: LabeledSet
    train_domains: Tuple[DomainSpec, ...]
    validation_domains: Tuple[DomainSpec, ...]
    target_domains: Tuple[DomainSpec, ...]

    @property
    def source_classes(self) -> Tuple[ClassSpec, ...]:
        return tuple(c for c in self.classes if c.class_id in self.source_class_ids)


def generate_source(
    n_classes: int,
    dim: int,
    samples_per_class: int,
    rng: SeededRng,
    *,
    covariance_scale: float = 1.0,
    separation: float = 4.0,
    mean_radius: Optional[float] = None,
    max_retries: int = 1000,
) -> Tuple[List[ClassSpec], LabeledSet]:
    """Draw class means at least ``separation * covariance_scale`` apart, then samples."""
    if n_classes < 2:
        raise ArgumentError(f"need at least 2 classes, got {n_classes}")
    if dim < 2:
        raise ArgumentError(f"need at least 2 feature dimensions, got {dim}")
    if samples_per_class < 1:
        raise ArgumentError(f"samples_per_class must be positive, got {samples_per_class}")
    min_distance = separation * covariance_scale
    if mean_radius is None:
        mean_radius = min_distance * max(1.0, n_classes ** (1.0 / dim))

    means: List[np.ndarray] = []
    for class_id in range(n_classes):
        for _ in range(max_retries):
            candidate = rng.uniform(-mean_radius, mean_radius, size=dim)
            if all(np.linalg.norm(candidate - m) >= min_distance for m in means):
                means.append(candidate)
                break
        else:
            raise GenerationError(
                f"could not place class {class_id} at distance {min_distance} "
                f"within radius {mean_radius} after {max_retries} tries"
            )

    classes = [ClassSpec(i, m, covariance_scale) for i, m in enumerate(means)]
    features = np.vstack([c.draw(samples_per_class, rng) for c in classes])
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    domain_ids = np.full(labels.size, SOURCE_DOMAIN_ID, dtype=object)
    logger.debug(f"Generated source with {n_classes} classes, {labels.size} samples")
    return classes, LabeledSet(features, labels, domain_ids)


def generate_pseudo_target(
    source_classes: Sequence[ClassSpec],
    domain: DomainSpec,
    samples_per_class: int,
    rng: SeededRng,
) -> UnlabeledSet:
    if domain.role == DomainRole.SOURCE:
        raise ArgumentError(f"domain {domain.domain_id} has role source; expected a shifted domain")
    parts, labels = [], []
    for spec in source_classes:
        if spec.dim != domain.dim:
            raise ArgumentError(
                f"class {spec.class_id} is {spec.dim}-d but domain {domain.domain_id} is {domain.dim}-d"
            )
        parts.append(domain.apply(spec.draw(samples_per_class, rng), rng))
        labels.append(np.full(samples_per_class, spec.class_id))
    labels = np.concatenate(labels)
    return UnlabeledSet(
        np.vstack(parts), np.full(labels.size, domain.domain_id, dtype=object), labels
    )


def make_domain(domain_id: str, role: DomainRole, dim: int, rng: SeededRng, cfg: DataConfig) -> DomainSpec:
    return DomainSpec(
        domain_id=domain_id,
        rotation_angle=float(rng.uniform(-cfg.max_domain_rotation, cfg.max_domain_rotation)),
        scale_factors=rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=dim),
        shift=rng.normal(0.0, cfg.shift_sigma, size=dim),
        noise_sigma=float(rng.uniform(cfg.noise_range[0], cfg.noise_range[1])),
        role=role,
    )


def make_domain_bank(
    cfg: DataConfig, rng: SeededRng
) -> Tuple[Tuple[DomainSpec, ...], Tuple[DomainSpec, ...], Tuple[DomainSpec, ...]]:
    """Episode-train, validation and target domains with distinct ids and transforms."""
    train = tuple(
        make_domain(f"train-{i}", DomainRole.EPISODE_TRAIN, cfg.dim, rng, cfg)
        for i in range(cfg.n_train_domains)
    )
    valid = tuple(
        make_domain(f"valid-{i}", DomainRole.VALIDATION, cfg.dim, rng, cfg)
        for i in range(cfg.n_validation_domains)
    )
    target = tuple(
        make_domain(f"target-{i}", DomainRole.TARGET, cfg.dim, rng, cfg)
        for i in range(cfg.n_target_domains)
    )
    return train, valid, target


def build_problem(cfg: DataConfig, rng: SeededRng) -> SyntheticProblem:
    n_total = cfg.n_classes + cfg.target_novel_classes
    classes, samples = generate_source(
        n_total,
        cfg.dim,
        cfg.samples_per_class,
        rng.derive("classes"),
        covariance_scale=cfg.covariance_scale,
        separation=cfg.separation,
    )
    source_ids = tuple(range(cfg.n_classes))
    train, valid, target = make_domain_bank(cfg, rng.derive("domains"))
    return SyntheticProblem(
        classes=tuple(classes),
        source_class_ids=source_ids,
        source=samples.restrict_to(source_ids),
        train_domains=train,
        validation_domains=valid,
        target_domains=target,
    )


def generate_targets(problem: SyntheticProblem, samples_per_class: int, rng: SeededRng) -> List[UnlabeledSet]:
    """One unlabeled set per target domain covering source and target-only classes."""
    return [
        generate_pseudo_target(problem.classes, domain, samples_per_class, rng.derive(domain.domain_id))
        for domain in problem.target_domains
    ]


def known_class_count(known_fraction: float, n_classes: int) -> int:
    n_known = round_half_up(known_fraction * n_classes)
    if not 0 < n_known < n_classes:
        raise ArgumentError(
            f"known_fraction {known_fraction} gives {n_known} of {n_classes} classes; "
            "need a strict non-empty subset"
        )
    return n_known


def static_known_classes(class_ids: Sequence[int], known_fraction: float, rng: SeededRng) -> Tuple[int, ...]:
    n_known = known_class_count(known_fraction, len(class_ids))
    return tuple(sorted(int(c) for c in rng.choice(np.asarray(class_ids), n_known, replace=False)))


def augment_batch(x: np.ndarray, rng: SeededRng, jitter_sigma: float, max_rotation: float) -> np.ndarray:
    """Rotate each row in a random coordinate plane by at most max_rotation, then jitter."""
    if jitter_sigma < 0:
        raise ArgumentError(f"jitter_sigma must be non-negative, got {jitter_sigma}")
    if max_rotation < 0:
        raise ArgumentError(f"max_rotation must be non-negative, got {max_rotation}")
    x = np.array(np.atleast_2d(x), dtype=np.float64)
    n, dim = x.shape
    first = rng.integers(0, dim, size=n)
    second = (first + rng.integers(1, dim, size=n)) % dim
    angles = rng.uniform(-max_rotation, max_rotation, size=n)
    rows = np.arange(n)
    a, b = x[rows, first].copy(), x[rows, second].copy()
    c, s = np.cos(angles), np.sin(angles)
    x[rows, first] = c * a - s * b
    x[rows, second] = s * a + c * b
    if jitter_sigma > 0:
        x = x + rng.normal(0.0, jitter_sigma, size=x.shape)
    return x


def augment(x: np.ndarray, rng: SeededRng, jitter_sigma: float, max_rotation: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ArgumentError(f"augment takes a single feature vector, got shape {x.shape}")
    return augment_batch(x[None, :], rng, jitter_sigma, max_rotation)[0]


def augmented_pseudo_target(
    source: LabeledSet, samples_per_class: int, rng: SeededRng, jitter_sigma: float, max_rotation: float
) -> UnlabeledSet:
    """Pseudo-target made of augmented source samples instead of a style domain."""
    picks = []
    for class_id in source.class_ids:
        members = np.flatnonzero(source.labels == class_id)
        picks.append(rng.choice(members, samples_per_class, replace=True))
    picks = np.concatenate(picks)
    features = augment_batch(source.features[picks], rng, jitter_sigma, max_rotation)
    return UnlabeledSet(
        features, np.full(picks.size, AUGMENTED_DOMAIN_ID, dtype=object), source.labels[picks]
    )


def sample_episode(
    source: LabeledSet,
    source_classes: Sequence[ClassSpec],
    domains: Sequence[DomainSpec],
    episode_index: int,
    known_fraction: float,
    rng: SeededRng,
    *,
    samples_per_class: int,
    static_known: Optional[Sequence[int]] = None,
    domain: Optional[DomainSpec] = None,
    with_pseudo_target: bool = True,
    manual_augmentation: bool = False,
    jitter_sigma: float = 0.05,
    max_rotation: float = 0.15,
) -> EpisodeData:
    """
    Pair a reduced-class labeled source subset with an unlabeled pseudo-target
    covering every source class.

    ``static_known`` pins the known classes (static split ablation); ``domain``
    pins the pseudo-target style, otherwise one episode-train domain is drawn.
    """
    class_ids = source.class_ids
    n_known = known_class_count(known_fraction, len(class_ids))
    if static_known is not None:
        known = tuple(sorted(int(c) for c in static_known))
        if len(known) != n_known or not set(known) < set(class_ids):
            raise ArgumentError(f"static known classes {known} do not form a {n_known}-class subset")
    else:
        known = tuple(sorted(int(c) for c in rng.choice(np.asarray(class_ids), n_known, replace=False)))

    train_domains = [d for d in domains if d.role == DomainRole.EPISODE_TRAIN]
    if not train_domains:
        raise ArgumentError("sample_episode needs at least one episode_train domain")
    if domain is None:
        domain = train_domains[int(rng.integers(0, len(train_domains)))]

    pseudo_target = None
    domain_id = None
    if with_pseudo_target:
        if manual_augmentation:
            pseudo_target = augmented_pseudo_target(source, samples_per_class, rng, jitter_sigma, max_rotation)
            domain_id = AUGMENTED_DOMAIN_ID
        else:
            pseudo_target = generate_pseudo_target(source_classes, domain, samples_per_class, rng)
            domain_id = domain.domain_id

    return EpisodeData(
        labeled_source=source.restrict_to(known),
        unlabeled_pseudo_target=pseudo_target,
        known_classes=known,
        episode_index=episode_index,
        domain_id=domain_id,
    )


def build_validation_set(
    source_classes: Sequence[ClassSpec],
    validation_domains: Sequence[DomainSpec],
    samples_per_class_per_domain: int,
    rng: SeededRng,
    episode_domains: Sequence[DomainSpec] = (),
) -> ValidationSet:
    if not validation_domains:
        raise ConfigurationError("at least one validation domain is required")
    for valid in validation_domains:
        for train in episode_domains:
            if valid.domain_id == train.domain_id or valid.same_transform(train):
                raise ConfigurationError(
                    f"validation domain {valid.domain_id} overlaps episode domain {train.domain_id}"
                )
    parts = [
        generate_pseudo_target(source_classes, d, samples_per_class_per_domain, rng.derive(d.domain_id))
        for d in validation_domains
    ]
    return ValidationSet(UnlabeledSet.concat(parts), tuple(validation_domains))


def episode_validation_set(episode: EpisodeData) -> ValidationSet:
    """Validation on the episode's own data (episode-specific validation ablation)."""
    parts = [episode.labeled_source.as_unlabeled()]
    if episode.unlabeled_pseudo_target is not None:
        parts.append(episode.unlabeled_pseudo_target)
    return ValidationSet(UnlabeledSet.concat(parts), ())

from enum import Enum
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.numeric import round_half_up


class MergeStrategy(str, Enum):
    WEIGHTED_TA = "weighted_ta"
    FIXED_TA = "fixed_ta"
    TIES = "ties"
    FISHER = "fisher"
    MINMAX_TA = "minmax_ta"


class ScoreScale(str, Enum):
    FRACTION = "fraction"
    PERCENT = "percent"


class LossConfig(BaseModel):
    """Weights and hyper-parameters of the episode objective."""

    model_config = ConfigDict(extra="forbid")

    tau: float = Field(0.1, gt=0)
    lambda_margin: float = Field(0.20, ge=0)
    margin_m: float = Field(0.7, gt=0, lt=1)
    alpha: float = Field(0.5, gt=0, lt=1)
    grl_factor: float = 1.0
    sup_weight: float = Field(1.0, ge=0)
    unsup_weight: float = Field(1.0, ge=0)
    adv_weight: float = Field(1.0, ge=0)
    ce_weight: float = Field(1.0, ge=0)
    # include every augmented view of the batch among the unsupervised negatives
    unsup_all_views: bool = False
    # let the margin gradient reach the encoder; by default it trains the classifier head only
    margin_to_encoder: bool = False

    @classmethod
    def preset(cls, name: str, **overrides) -> "LossConfig":
        """Named subsets of the loss terms; ``full`` is every term at its default weight."""
        presets = {
            "supervised": dict(unsup_weight=0.0, adv_weight=0.0, ce_weight=0.0, lambda_margin=0.0),
            "contrastive": dict(adv_weight=0.0, ce_weight=0.0, lambda_margin=0.0),
            "no_margin": dict(lambda_margin=0.0),
            "full": dict(),
        }
        if name not in presets:
            raise ValueError(f"unknown loss configuration {name!r}, expected one of {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


class MergeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: MergeStrategy = MergeStrategy.WEIGHTED_TA
    # fixed_ta only; None means 1/n_e
    fixed_scale: Optional[float] = Field(None, ge=0)
    trim_fraction: float = Field(0.2, gt=0, lt=1)
    fisher_samples: int = Field(64, ge=1)
    score_scale: ScoreScale = ScoreScale.FRACTION


class AblationFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")

    no_synthetic: bool = False
    static_split: bool = False
    episode_local_validation: bool = False
    single_global_update: bool = False
    minmax_weights: bool = False
    manual_augmentation: bool = False


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # n_g = 0 and epochs_per_episode = 0 are accepted as test hooks
    n_g: int = Field(10, ge=0)
    n_e: int = Field(6, ge=1)
    epochs_per_episode: int = Field(8, ge=0)
    batch_size: int = Field(128, ge=2)
    lr: float = Field(0.1, gt=0)
    lr_min: float = Field(0.0, ge=0)
    known_fraction: float = Field(4 / 7, gt=0, lt=1)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    jitter_sigma: float = Field(0.05, ge=0)
    max_rotation: float = Field(0.15, ge=0)
    merge: MergeConfig = Field(default_factory=MergeConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    ablations: AblationFlags = Field(default_factory=AblationFlags)

    @property
    def effective_n_g(self) -> int:
        if self.ablations.single_global_update:
            return min(self.n_g, 1)
        return self.n_g

    @property
    def effective_strategy(self) -> MergeStrategy:
        if self.ablations.minmax_weights:
            return MergeStrategy.MINMAX_TA
        return self.merge.strategy


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_classes: int = Field(7, ge=2)
    dim: int = Field(8, ge=2)
    samples_per_class: int = Field(50, ge=1)
    pseudo_target_samples_per_class: int = Field(50, ge=1)
    validation_samples_per_class_per_domain: int = Field(20, ge=1)
    target_samples_per_class: int = Field(50, ge=1)
    n_train_domains: int = Field(6, ge=1)
    n_validation_domains: int = Field(3, ge=1)
    n_target_domains: int = Field(1, ge=1)
    target_novel_classes: int = Field(3, ge=0)
    covariance_scale: float = Field(1.0, gt=0)
    separation: float = Field(4.0, gt=0)
    max_domain_rotation: float = Field(0.8, ge=0)
    scale_range: Tuple[float, float] = (0.7, 1.4)
    shift_sigma: float = Field(1.5, ge=0)
    noise_range: Tuple[float, float] = (0.05, 0.3)

    @model_validator(mode="after")
    def check_ranges(self) -> "DataConfig":
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ValueError(f"scale_range must satisfy 0 < low <= high, got {self.scale_range}")
        low, high = self.noise_range
        if not 0 <= low <= high:
            raise ValueError(f"noise_range must satisfy 0 <= low <= high, got {self.noise_range}")
        return self


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_dim: int = Field(32, ge=1)
    embed_dim: int = Field(16, ge=2)
    init_scale: float = Field(1.0, gt=0)


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    target_k: Literal["estimate", "truth"] = "estimate"
    # None means the number of classes present in the validation set
    validation_k: Optional[int] = Field(None, ge=1)
    k_max: int = Field(20, ge=2)
    # target K search stops at known + ceil(max_novel_ratio * known)
    max_novel_ratio: float = Field(0.5, gt=0)
    kmeans_max_iters: int = Field(100, ge=1)
    kmeans_n_init: int = Field(3, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    training: TrainingConfig = Field(default_factory=TrainingConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def check_known_split(self) -> "RunConfig":
        n_known = round_half_up(self.training.known_fraction * self.data.n_classes)
        if not 0 < n_known < self.data.n_classes:
            raise ValueError(
                f"known_fraction {self.training.known_fraction} gives {n_known} known classes "
                f"out of {self.data.n_classes}; need a strict non-empty subset"
            )
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        training = self.training.model_copy(update={"seed": seed})
        return self.model_copy(update={"training": training})

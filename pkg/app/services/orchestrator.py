"""
Episodic training of the global encoder.

Each global update fine-tunes ``n_e`` episode models from the same global
parameters, scores them on the validation domains and merges their task
vectors. Every random stream is keyed by (seed, global update, episode),
so results do not depend on how episodes are scheduled across threads.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import ArgumentError, ConfigurationError, DivergenceError, RunError
from app.core.numeric import ParamVector, SeededRng
from app.schemas.config import EvaluationConfig, MergeStrategy, RunConfig
from app.schemas.metrics import (
    EpisodeSummary,
    GcdMetrics,
    GlobalUpdateSummary,
    KEstimate,
    SweepRow,
    TargetMetrics,
    TargetReport,
)
from app.services import domains
from app.services.domains import EpisodeData, LabeledSet, SyntheticProblem, UnlabeledSet, ValidationSet
from app.services.encoder import ClassifierParams, EncoderDims, embed_batch, init_encoder, init_from_global
from app.services.evaluation import cluster_and_score, estimate_k, hungarian_accuracy, kmeans
from app.services.merging import TaskVector, merge, sign_conflict_fraction, task_vector
from app.services.training import StepTrace, estimate_fisher, fine_tune

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentData:
    problem: SyntheticProblem
    validation: ValidationSet
    targets: Tuple[UnlabeledSet, ...]

    @property
    def dim(self) -> int:
        return self.problem.source.features.shape[1]


@dataclass
class EpisodeResult:
    local_params: ParamVector
    task_vector: TaskVector
    valid_metrics: GcdMetrics
    episode_index: int
    global_index: int
    domain_id: Optional[str]
    known_classes: Tuple[int, ...]
    fisher: Optional[ParamVector] = field(default=None, repr=False)
    trace: List[StepTrace] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class EpisodeAbort:
    episode_index: int
    global_index: int
    domain_id: Optional[str]
    known_classes: Tuple[int, ...]
    reason: str


@dataclass
class GlobalModelState:
    params: ParamVector
    global_index: int = 0
    history: List[GlobalUpdateSummary] = field(default_factory=list)
    # params after every update, the initial model first
    snapshots: List[ParamVector] = field(default_factory=list, repr=False)
    # (global index, episode index, step)
    step_traces: List[Tuple[int, int, StepTrace]] = field(default_factory=list, repr=False)


@dataclass
class RunOutcome:
    state: GlobalModelState
    report: TargetReport
    data: ExperimentData = field(repr=False)


def build_experiment(cfg: RunConfig) -> ExperimentData:
    """Source, domain bank, validation set and target sets for one seed."""
    data_cfg = cfg.data
    rng = SeededRng(cfg.training.seed).derive("data")
    problem = domains.build_problem(data_cfg, rng)
    validation = domains.build_validation_set(
        problem.source_classes,
        problem.validation_domains,
        data_cfg.validation_samples_per_class_per_domain,
        rng.derive("validation"),
        episode_domains=problem.train_domains,
    )
    targets = domains.generate_targets(problem, data_cfg.target_samples_per_class, rng.derive("targets"))
    logger.info(
        f"Built experiment: {len(problem.source)} source samples, "
        f"{len(validation.samples)} validation samples, {len(targets)} target domains"
    )
    return ExperimentData(problem, validation, tuple(targets))


def validation_metrics(
    params: ParamVector,
    validation: ValidationSet,
    known_classes: Sequence[int],
    cfg: RunConfig,
    rng: SeededRng,
) -> GcdMetrics:
    """Cluster validation embeddings with K = number of validation classes unless configured."""
    encoder = init_from_global(params)
    z, valid = embed_batch(encoder, validation.samples.features)
    labels = validation.samples.hidden_labels[valid]
    k = cfg.evaluation.validation_k or len(np.unique(labels))
    return cluster_and_score(
        z[valid], labels, known_classes, k, rng,
        cfg.evaluation.kmeans_max_iters, cfg.evaluation.kmeans_n_init,
    )


def run_episode(
    global_params: ParamVector,
    episode: EpisodeData,
    validation: ValidationSet,
    cfg: RunConfig,
    rng: SeededRng,
    global_index: int = 1,
    strategy: Optional[MergeStrategy] = None,
    validation_rng: Optional[SeededRng] = None,
) -> EpisodeResult:
    """
    Fine-tune one episode model from the global parameters and score it.
    Episodes of one update share ``validation_rng`` so their scores differ
    only by the models.

    Raises DivergenceError when the loss or the parameters stop being finite.
    """
    training = cfg.training
    strategy = strategy or training.effective_strategy
    tuned = None
    if training.epochs_per_episode == 0:
        local = global_params
    else:
        tuned = fine_tune(global_params, episode, training, rng.derive("fine-tune"))
        local = tuned.local_params

    if training.ablations.episode_local_validation:
        validation = domains.episode_validation_set(episode)
    metrics = validation_metrics(
        local, validation, episode.known_classes, cfg, validation_rng or rng.derive("validation")
    )

    fisher = None
    if strategy == MergeStrategy.FISHER:
        if tuned is not None:
            classifier = tuned.classifier
        else:
            classifier = ClassifierParams.zeros(len(episode.known_classes), init_from_global(local).dims.embed_dim)
        fisher = estimate_fisher(
            local, classifier, episode, training.loss, training.merge.fisher_samples,
            rng.derive("fisher"), training.jitter_sigma, training.max_rotation,
        )

    return EpisodeResult(
        local_params=local,
        task_vector=task_vector(global_params, local, episode.episode_index, global_index),
        valid_metrics=metrics,
        episode_index=episode.episode_index,
        global_index=global_index,
        domain_id=episode.domain_id,
        known_classes=episode.known_classes,
        fisher=fisher,
        trace=tuned.trace if tuned is not None else [],
    )


def _run_or_abort(
    state: GlobalModelState,
    episode: EpisodeData,
    validation: ValidationSet,
    cfg: RunConfig,
    rng: SeededRng,
    global_index: int,
    strategy: MergeStrategy,
    validation_rng: SeededRng,
) -> Union[EpisodeResult, EpisodeAbort]:
    try:
        return run_episode(state.params, episode, validation, cfg, rng, global_index, strategy, validation_rng)
    except DivergenceError as e:
        logger.warning(f"Episode {episode.episode_index} of update {global_index} aborted: {e}")
        return EpisodeAbort(episode.episode_index, global_index, episode.domain_id, episode.known_classes, str(e))


def run_global_update(
    state: GlobalModelState,
    episodes: Sequence[EpisodeData],
    validation: ValidationSet,
    cfg: RunConfig,
    rng: SeededRng,
) -> GlobalModelState:
    """Run every episode from the same global parameters, then merge the survivors."""
    if not episodes:
        raise ArgumentError("a global update needs at least one episode")
    global_index = state.global_index + 1
    strategy = cfg.training.effective_strategy
    jobs = [(ep, rng.derive("episode", ep.episode_index)) for ep in episodes]
    validation_rng = rng.derive("validation")

    if settings.N_WORKERS > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=settings.N_WORKERS) as pool:
            futures = [
                pool.submit(_run_or_abort, state, ep, validation, cfg, ep_rng, global_index, strategy, validation_rng)
                for ep, ep_rng in jobs
            ]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [
            _run_or_abort(state, ep, validation, cfg, ep_rng, global_index, strategy, validation_rng)
            for ep, ep_rng in jobs
        ]

    survivors = [o for o in outcomes if isinstance(o, EpisodeResult)]
    if not survivors:
        raise RunError(f"every episode of global update {global_index} diverged")
    if len(survivors) < len(outcomes):
        logger.warning(
            f"Global update {global_index}: merging {len(survivors)} of {len(outcomes)} episodes"
        )

    merged = merge(
        state.params,
        [r.task_vector for r in survivors],
        [r.valid_metrics.all for r in survivors],
        cfg.training.merge,
        strategy=strategy,
        local_params=[r.local_params for r in survivors],
        fisher_diagonals=[r.fisher for r in survivors] if strategy == MergeStrategy.FISHER else None,
    )
    weights = list(merged.weights.weights) if merged.weights is not None else []
    weight_of: Dict[int, float] = {
        r.episode_index: (weights[i] if weights else 0.0) for i, r in enumerate(survivors)
    }
    sign_conflict = None
    if len(survivors) >= 2:
        sign_conflict = sign_conflict_fraction([r.task_vector for r in survivors])

    summaries = []
    for o in outcomes:
        if isinstance(o, EpisodeResult):
            summaries.append(EpisodeSummary(
                episode_index=o.episode_index,
                domain_id=o.domain_id,
                known_classes=list(o.known_classes),
                valid=o.valid_metrics,
                weight=weight_of[o.episode_index],
            ))
        else:
            summaries.append(EpisodeSummary(
                episode_index=o.episode_index,
                domain_id=o.domain_id,
                known_classes=list(o.known_classes),
                aborted=True,
                abort_reason=o.reason,
            ))

    row = GlobalUpdateSummary(
        global_index=global_index,
        strategy=strategy.value,
        weight_diff_l1=merged.update.l1_norm(),
        sign_conflict=sign_conflict,
        weights=weights,
        episodes=summaries,
    )
    logger.info(
        f"Global update {global_index}: strategy={strategy.value} "
        f"l1={row.weight_diff_l1:.6f} sign_conflict={sign_conflict} "
        f"valid_all={[round(r.valid_metrics.all, 4) for r in survivors]}"
    )
    traces = [(global_index, r.episode_index, t) for r in survivors for t in r.trace]
    return replace(
        state,
        params=merged.params,
        global_index=global_index,
        history=state.history + [row],
        snapshots=state.snapshots + [merged.params],
        step_traces=state.step_traces + traces,
    )


def initial_state(cfg: RunConfig, dim: int) -> GlobalModelState:
    dims = EncoderDims(dim, cfg.encoder.hidden_dim, cfg.encoder.embed_dim)
    rng = SeededRng(cfg.training.seed).derive("init")
    params = init_encoder(dims, rng, cfg.encoder.init_scale).to_param_vector().snapped()
    return GlobalModelState(params=params, snapshots=[params])


def sample_global_episodes(
    cfg: RunConfig,
    problem: SyntheticProblem,
    rng: SeededRng,
    static_known: Optional[Sequence[int]] = None,
) -> List[EpisodeData]:
    """
    Episodes of one global update. Training domains are shuffled once per
    update and episode e takes the domain at position e modulo their count.
    """
    training = cfg.training
    train_domains = problem.train_domains
    order = rng.derive("domains").permutation(len(train_domains))
    return [
        domains.sample_episode(
            problem.source,
            problem.source_classes,
            train_domains,
            e,
            training.known_fraction,
            rng.derive("sample", e),
            samples_per_class=cfg.data.pseudo_target_samples_per_class,
            static_known=static_known,
            domain=train_domains[int(order[e % len(train_domains)])],
            with_pseudo_target=not training.ablations.no_synthetic,
            manual_augmentation=training.ablations.manual_augmentation,
            jitter_sigma=training.jitter_sigma,
            max_rotation=training.max_rotation,
        )
        for e in range(training.n_e)
    ]


def train(
    cfg: RunConfig,
    data: ExperimentData,
    on_update: Optional[Callable[[GlobalModelState], None]] = None,
) -> GlobalModelState:
    """Run the configured number of global updates from a seeded initial encoder."""
    training = cfg.training
    root = SeededRng(training.seed)
    state = initial_state(cfg, data.dim)
    static_known = None
    if training.ablations.static_split:
        static_known = domains.static_known_classes(
            data.problem.source_class_ids, training.known_fraction, root.derive("static-split")
        )
        logger.info(f"Static split: known classes {static_known}")

    n_g = training.effective_n_g
    logger.info(
        f"Training seed={training.seed} n_g={n_g} n_e={training.n_e} "
        f"strategy={training.effective_strategy.value}"
    )
    for g in range(1, n_g + 1):
        g_rng = root.derive("global", g)
        episodes = sample_global_episodes(cfg, data.problem, g_rng, static_known)
        state = run_global_update(state, episodes, data.validation, cfg, g_rng)
        if on_update is not None:
            on_update(state)
    return state


def target_k_bounds(n_known: int, n_samples: int, evaluation: EvaluationConfig) -> Tuple[int, int]:
    """K search range for a target: at least every known class, at most a bounded number of novel ones."""
    if n_known < 1:
        raise ArgumentError("estimating K needs at least one known class")
    k_max = n_known + math.ceil(evaluation.max_novel_ratio * n_known)
    k_max = min(k_max, evaluation.k_max, n_samples)
    return n_known, max(k_max, n_known + 1)


def evaluate_on_target(
    params: ParamVector,
    target: UnlabeledSet,
    old_class_set: Sequence[int],
    k: Union[int, str],
    cfg: RunConfig,
    rng: SeededRng,
    labeled: Optional[LabeledSet] = None,
) -> Tuple[GcdMetrics, Optional[KEstimate]]:
    """
    Cluster the target under ``params``. ``k="estimate"`` searches K within
    ``target_k_bounds`` using ``labeled`` as the labeled subset; ``k="truth"`` uses the number of target classes.
    """
    evaluation = cfg.evaluation
    encoder = init_from_global(params)
    z, valid = embed_batch(encoder, target.features)
    z, labels = z[valid], target.hidden_labels[valid]
    estimate = None
    if k == "truth":
        k = len(np.unique(labels))
    elif k == "estimate":
        if labeled is None:
            raise ArgumentError("estimating K needs a labeled subset")
        labeled_z, labeled_valid = embed_batch(encoder, labeled.features)
        k_min, k_max = target_k_bounds(len(old_class_set), z.shape[0] + int(labeled_valid.sum()), evaluation)
        estimate = estimate_k(
            z, labeled_z[labeled_valid], labeled.labels[labeled_valid], k_min, k_max,
            rng.derive("estimate-k"), evaluation.kmeans_max_iters, evaluation.kmeans_n_init,
        )
        k = estimate.k_hat
    elif not isinstance(k, (int, np.integer)):
        raise ArgumentError(f"k must be an integer, 'truth' or 'estimate', got {k!r}")
    clustering = kmeans(z, int(k), rng.derive("cluster"), evaluation.kmeans_max_iters, evaluation.kmeans_n_init)
    metrics = hungarian_accuracy(clustering.assignments, labels, old_class_set, k_used=int(k))
    return metrics, estimate


def evaluate_targets(params: ParamVector, data: ExperimentData, cfg: RunConfig) -> TargetReport:
    rng = SeededRng(cfg.training.seed).derive("target-eval")
    problem = data.problem
    per_domain = []
    for domain, target in zip(problem.target_domains, data.targets):
        metrics, estimate = evaluate_on_target(
            params, target, problem.source_class_ids, cfg.evaluation.target_k, cfg,
            rng.derive(domain.domain_id), labeled=problem.source,
        )
        logger.info(
            f"Target {domain.domain_id}: all={metrics.all:.4f} old={metrics.old:.4f} "
            f"new={metrics.new:.4f} k={metrics.k_used}"
        )
        per_domain.append(TargetMetrics(domain_id=domain.domain_id, metrics=metrics, k_estimate=estimate))
    return TargetReport.from_domains(per_domain)


def run_experiment(
    cfg: RunConfig, on_update: Optional[Callable[[GlobalModelState], None]] = None
) -> RunOutcome:
    data = build_experiment(cfg)
    state = train(cfg, data, on_update)
    return RunOutcome(state, evaluate_targets(state.params, data, cfg), data)


def override(cfg: RunConfig, section: str, **fields) -> RunConfig:
    """Copy of ``cfg`` with ``fields`` replaced in one section, validated again."""
    data = cfg.model_dump()
    if section not in data:
        raise ArgumentError(f"unknown config section {section!r}")
    data[section].update(fields)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid override {section}.{fields}: {e}")


def _sweep_row(label: str, value, cfg: RunConfig) -> SweepRow:
    outcome = run_experiment(cfg)
    history = outcome.state.history
    conflicts = [h.sign_conflict for h in history if h.sign_conflict is not None]
    return SweepRow(
        label=label,
        value=str(value),
        seed=cfg.training.seed,
        target=outcome.report,
        mean_sign_conflict=float(np.mean(conflicts)) if conflicts else None,
        mean_weight_diff_l1=float(np.mean([h.weight_diff_l1 for h in history])) if history else None,
    )


def sweep_episodes(cfg: RunConfig, n_e_values: Sequence[int]) -> List[SweepRow]:
    """One full run per episode count, all sharing the data seed."""
    if any(v < 1 for v in n_e_values):
        raise ArgumentError(f"episode counts must be positive, got {list(n_e_values)}")
    return [_sweep_row("n_e", v, override(cfg, "training", n_e=v)) for v in n_e_values]


def compare_merges(
    cfg: RunConfig,
    seeds: Sequence[int],
    strategies: Sequence[Union[str, MergeStrategy]] = tuple(MergeStrategy),
) -> List[SweepRow]:
    """Every strategy on every seed; rows for the same seed share data and episodes."""
    rows = []
    for seed in seeds:
        seeded = cfg.with_seed(seed)
        for strategy in strategies:
            strategy = MergeStrategy(strategy)
            merge_cfg = {**seeded.training.merge.model_dump(), "strategy": strategy}
            rows.append(_sweep_row("strategy", strategy.value, override(seeded, "training", merge=merge_cfg)))
    return rows


def sweep_margin(cfg: RunConfig, lambdas: Sequence[float]) -> List[SweepRow]:
    rows = []
    for value in lambdas:
        loss = {**cfg.training.loss.model_dump(), "lambda_margin": value}
        rows.append(_sweep_row("lambda_margin", value, override(cfg, "training", loss=loss)))
    return rows


def sweep_splits(cfg: RunConfig, known_fractions: Sequence[float]) -> List[SweepRow]:
    return [
        _sweep_row("known_fraction", f, override(cfg, "training", known_fraction=f)) for f in known_fractions
    ]

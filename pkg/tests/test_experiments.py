"""Multi-seed checks on full-size problems. Run with ``pytest -m slow``."""
import numpy as np
import pytest
from scipy.stats import ks_2samp

from app.core.numeric import SeededRng
from app.schemas.config import RunConfig, TrainingConfig
from app.services.domains import (
    DomainRole, DomainSpec, generate_pseudo_target, generate_source, make_domain_bank, sample_episode,
)
from app.services.encoder import EncoderDims, init_encoder
from app.services.evaluation import estimate_k
from app.services.orchestrator import RunOutcome, override, run_experiment
from app.services.training import fine_tune

pytestmark = pytest.mark.slow

SEEDS = range(10)


def test_identity_domain_keeps_the_source_marginals():
    rng = SeededRng(0)
    classes, source = generate_source(4, 4, 2500, rng.derive("source"))
    identity = DomainSpec.identity("same", 4, DomainRole.EPISODE_TRAIN)
    pseudo = generate_pseudo_target(classes, identity, 2500, rng.derive("pseudo"))
    p_values = [ks_2samp(source.features[:, j], pseudo.features[:, j]).pvalue for j in range(4)]
    assert min(p_values) > 0.01 / 4


@pytest.mark.parametrize("n_classes,window", [(5, (4, 6)), (7, (6, 8))])
def test_k_estimate_recovers_the_class_count(n_classes, window):
    hits = 0
    for seed in SEEDS:
        rng = SeededRng(seed)
        _, data = generate_source(n_classes, 2, 60, rng.derive("data"), separation=8.0)
        labeled_mask = np.arange(len(data)) % 60 < 20
        estimate = estimate_k(
            data.features[~labeled_mask], data.features[labeled_mask], data.labels[labeled_mask],
            2, 20, rng.derive("k"), n_init=3,
        )
        hits += window[0] <= estimate.k_hat <= window[1]
    assert hits >= 8


def test_episode_training_lowers_the_loss():
    lower = 0
    cfg = TrainingConfig(epochs_per_episode=8)
    for seed in SEEDS:
        rng = SeededRng(seed)
        classes, source = generate_source(7, 8, 50, rng.derive("source"))
        train_domains, _, _ = make_domain_bank(RunConfig().data, rng.derive("bank"))
        episode = sample_episode(
            source, classes, train_domains, 0, cfg.known_fraction, rng.derive("episode"), samples_per_class=50
        )
        params = init_encoder(EncoderDims(8, 32, 16), rng.derive("init")).to_param_vector().snapped()
        result = fine_tune(params, episode, cfg, rng.derive("fine-tune"), record_loss=True)
        lower += result.final_loss < result.initial_loss
    assert lower >= 9


def _variant(seed: int, name: str) -> RunConfig:
    cfg = RunConfig().with_seed(seed)
    training = cfg.training
    if name == "fixed_ta":
        return override(cfg, "training", merge={**training.merge.model_dump(), "strategy": "fixed_ta"})
    if name == "no_margin":
        return override(cfg, "training", loss={**training.loss.model_dump(), "lambda_margin": 0.0})
    if name == "no_synthetic":
        return override(cfg, "training", ablations={**training.ablations.model_dump(), "no_synthetic": True})
    return cfg


@pytest.fixture(scope="module")
def outcomes():
    cache = {}

    def get(seed: int, name: str = "weighted_ta") -> RunOutcome:
        if (seed, name) not in cache:
            cache[seed, name] = run_experiment(_variant(seed, name))
        return cache[seed, name]

    return get


def _paired_gaps(outcomes, baseline: str) -> np.ndarray:
    return np.array([
        outcomes(seed).report.mean_all - outcomes(seed, baseline).report.mean_all for seed in SEEDS
    ])


def test_updates_shrink_as_training_converges(outcomes):
    shrinking = 0
    for seed in SEEDS:
        history = outcomes(seed).state.history
        late = np.mean([row.weight_diff_l1 for row in history[7:10]])
        shrinking += late < history[0].weight_diff_l1
    assert shrinking >= 8


@pytest.mark.parametrize("baseline", ["fixed_ta", "no_margin"])
def test_full_method_is_not_worse_than_the_baseline(outcomes, baseline):
    gaps = _paired_gaps(outcomes, baseline)
    assert gaps.mean() >= 0.0
    assert (gaps >= 0.0).sum() >= 6


def test_pseudo_target_domains_help(outcomes):
    assert _paired_gaps(outcomes, "no_synthetic").mean() > 0.0


def test_weighted_merging_has_fewer_sign_conflicts(outcomes):
    def mean_conflict(outcome: RunOutcome) -> float:
        return float(np.mean([row.sign_conflict for row in outcome.state.history if row.sign_conflict is not None]))

    weighted = np.mean([mean_conflict(outcomes(seed)) for seed in SEEDS])
    fixed = np.mean([mean_conflict(outcomes(seed, "fixed_ta")) for seed in SEEDS])
    assert weighted <= fixed

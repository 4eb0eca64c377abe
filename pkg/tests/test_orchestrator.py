import pytest
from pytest import raises

from app.core.config import settings
from app.core.errors import ArgumentError, ConfigurationError, DivergenceError, RunError
from app.core.numeric import SeededRng
from app.schemas.config import EvaluationConfig, MergeStrategy
from app.services import orchestrator
from app.services.domains import AUGMENTED_DOMAIN_ID
from app.services.orchestrator import (
    build_experiment,
    evaluate_on_target,
    evaluate_targets,
    initial_state,
    override,
    run_episode,
    run_global_update,
    sample_global_episodes,
    target_k_bounds,
    train,
    validation_metrics,
)


@pytest.fixture
def data(tiny_config):
    return build_experiment(tiny_config)


@pytest.fixture
def state(tiny_config, data):
    return initial_state(tiny_config, data.dim)


def _episodes(cfg, data, g=1):
    return sample_global_episodes(cfg, data.problem, SeededRng(cfg.training.seed).derive("global", g))


def _ablation(cfg, **flags):
    ablations = {**cfg.training.ablations.model_dump(), **flags}
    return override(cfg, "training", ablations=ablations)


class TestExperimentData:
    def test_build_is_deterministic(self, tiny_config, data):
        again = build_experiment(tiny_config)
        assert (again.problem.source.features == data.problem.source.features).all()
        assert (again.validation.samples.features == data.validation.samples.features).all()

    def test_validation_domains_are_not_episode_domains(self, data):
        train_ids = {d.domain_id for d in data.problem.train_domains}
        assert not train_ids & set(data.validation.samples.domain_ids.tolist())

    def test_episode_domains_are_shuffled_per_update(self, tiny_config, data):
        episodes = _episodes(tiny_config, data)
        assert len(episodes) == tiny_config.training.n_e
        assert len({e.domain_id for e in episodes}) == 2
        assert [e.episode_index for e in episodes] == [0, 1]


class TestRunEpisode:
    def test_zero_epochs_gives_a_zero_task_vector(self, tiny_config, data, state):
        cfg = override(tiny_config, "training", epochs_per_episode=0)
        episode = _episodes(cfg, data)[0]
        rng = SeededRng(1)
        result = run_episode(state.params, episode, data.validation, cfg, rng)
        assert result.task_vector.delta.l1_norm() == 0.0
        assert result.local_params.bitwise_equal(state.params)
        expected = validation_metrics(state.params, data.validation, episode.known_classes, cfg, rng.derive("validation"))
        assert result.valid_metrics == expected

    def test_same_seed_same_result(self, tiny_config, data, state):
        episode = _episodes(tiny_config, data)[0]
        a = run_episode(state.params, episode, data.validation, tiny_config, SeededRng(4))
        b = run_episode(state.params, episode, data.validation, tiny_config, SeededRng(4))
        assert a.local_params.bitwise_equal(b.local_params)
        assert a.valid_metrics == b.valid_metrics

    def test_task_vector_is_global_minus_local(self, tiny_config, data, state):
        episode = _episodes(tiny_config, data)[1]
        result = run_episode(state.params, episode, data.validation, tiny_config, SeededRng(4), global_index=3)
        assert (state.params - result.task_vector.delta).bitwise_equal(result.local_params)
        assert (result.task_vector.episode_index, result.task_vector.global_index) == (1, 3)

    def test_validation_uses_every_validation_class(self, tiny_config, data, state):
        episode = _episodes(tiny_config, data)[0]
        result = run_episode(state.params, episode, data.validation, tiny_config, SeededRng(4))
        assert result.valid_metrics.k_used == tiny_config.data.n_classes
        assert result.valid_metrics.n_old == 2 * 5

    def test_fisher_is_estimated_for_fisher_merging(self, tiny_config, data, state):
        merge = {**tiny_config.training.merge.model_dump(), "strategy": "fisher", "fisher_samples": 4}
        cfg = override(tiny_config, "training", merge=merge)
        result = run_episode(state.params, _episodes(cfg, data)[0], data.validation, cfg, SeededRng(2))
        assert result.fisher is not None
        assert len(result.fisher) == len(state.params)


class TestGlobalUpdate:
    def test_single_episode_update_is_the_local_model(self, tiny_config, data, state):
        cfg = override(tiny_config, "training", n_e=1)
        episodes = _episodes(cfg, data)
        rng = SeededRng(9)
        new_state = run_global_update(state, episodes, data.validation, cfg, rng)
        local = run_episode(state.params, episodes[0], data.validation, cfg, rng.derive("episode", 0)).local_params
        assert new_state.params.bitwise_equal(local)
        assert new_state.history[0].weights == [1.0]
        assert new_state.history[0].sign_conflict is None

    def test_one_history_row_per_update(self, tiny_config, data, state):
        new_state = run_global_update(state, _episodes(tiny_config, data), data.validation, tiny_config, SeededRng(9))
        assert new_state.global_index == 1
        assert len(new_state.history) == 1
        row = new_state.history[0]
        assert len(row.episodes) == 2
        assert sum(row.weights) == pytest.approx(1.0)
        assert row.sign_conflict is not None
        assert len(state.history) == 0

    def test_episodes_share_the_validation_clustering(self, tiny_config, data, state):
        cfg = override(tiny_config, "training", epochs_per_episode=0)
        new_state = run_global_update(state, _episodes(cfg, data), data.validation, cfg, SeededRng(9))
        row = new_state.history[0]
        assert len({ep.valid.all for ep in row.episodes}) == 1
        assert row.weights == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_threads_do_not_change_results(self, tiny_config, data, state, monkeypatch):
        episodes = _episodes(tiny_config, data)
        sequential = run_global_update(state, episodes, data.validation, tiny_config, SeededRng(9))
        monkeypatch.setattr(settings, "N_WORKERS", 2)
        threaded = run_global_update(state, episodes, data.validation, tiny_config, SeededRng(9))
        assert threaded.params.bitwise_equal(sequential.params)
        assert threaded.history == sequential.history

    def test_diverged_episodes_are_left_out(self, tiny_config, data, state, monkeypatch):
        real = orchestrator.fine_tune

        def flaky(global_params, episode, cfg, rng, record_loss=False):
            if episode.episode_index == 0:
                raise DivergenceError("loss is nan")
            return real(global_params, episode, cfg, rng, record_loss)

        monkeypatch.setattr(orchestrator, "fine_tune", flaky)
        new_state = run_global_update(state, _episodes(tiny_config, data), data.validation, tiny_config, SeededRng(9))
        row = new_state.history[0]
        assert row.weights == [1.0]
        aborted = row.episodes[0]
        assert aborted.aborted and aborted.weight == 0.0 and aborted.valid is None
        assert "nan" in aborted.abort_reason
        assert not row.episodes[1].aborted

    def test_all_episodes_diverged(self, tiny_config, data, state, monkeypatch):
        def broken(*args, **kwargs):
            raise DivergenceError("loss is inf")

        monkeypatch.setattr(orchestrator, "fine_tune", broken)
        with raises(RunError):
            run_global_update(state, _episodes(tiny_config, data), data.validation, tiny_config, SeededRng(9))

    def test_no_episodes(self, tiny_config, data, state):
        with raises(ArgumentError):
            run_global_update(state, [], data.validation, tiny_config, SeededRng(9))


class TestTrain:
    def test_history_and_snapshots(self, tiny_config, data):
        seen = []
        final = train(tiny_config, data, on_update=lambda s: seen.append(s.global_index))
        assert seen == [1, 2]
        assert final.global_index == 2
        assert len(final.history) == 2
        assert len(final.snapshots) == 3
        for g, row in enumerate(final.history, start=1):
            diff = final.snapshots[g - 1] - final.snapshots[g]
            assert row.weight_diff_l1 == diff.l1_norm()
        assert final.step_traces

    def test_training_is_reproducible(self, tiny_config, data):
        a = train(tiny_config, data)
        b = train(tiny_config, build_experiment(tiny_config))
        assert a.params.bitwise_equal(b.params)
        assert a.history == b.history

    def test_zero_updates_returns_the_initial_model(self, tiny_config, data):
        cfg = override(tiny_config, "training", n_g=0)
        final = train(cfg, data)
        assert final.params.bitwise_equal(initial_state(cfg, data.dim).params)
        assert final.history == []

    def test_single_global_update_ablation(self, tiny_config, data):
        final = train(_ablation(tiny_config, single_global_update=True), data)
        assert len(final.history) == 1

    def test_minmax_ablation(self, tiny_config, data):
        final = train(_ablation(tiny_config, minmax_weights=True), data)
        assert {row.strategy for row in final.history} == {MergeStrategy.MINMAX_TA.value}

    def test_static_split_pins_known_classes(self, tiny_config, data):
        final = train(_ablation(tiny_config, static_split=True), data)
        splits = {tuple(ep.known_classes) for row in final.history for ep in row.episodes}
        assert len(splits) == 1

    def test_no_synthetic_and_manual_augmentation(self, tiny_config, data):
        plain = _ablation(tiny_config, no_synthetic=True)
        assert all(e.unlabeled_pseudo_target is None for e in _episodes(plain, data))
        assert len(train(plain, data).history) == 2
        augmented = _ablation(tiny_config, manual_augmentation=True)
        assert {e.domain_id for e in _episodes(augmented, data)} == {AUGMENTED_DOMAIN_ID}

    def test_episode_local_validation(self, tiny_config, data):
        final = train(_ablation(tiny_config, episode_local_validation=True), data)
        assert all(ep.valid is not None for row in final.history for ep in row.episodes)


class TestTargetEvaluation:
    def test_true_k(self, tiny_config, data, state):
        metrics, estimate = evaluate_on_target(
            state.params, data.targets[0], data.problem.source_class_ids, "truth", tiny_config, SeededRng(1)
        )
        assert metrics.k_used == 6
        assert estimate is None
        assert metrics.n_new > 0
        assert 0.0 <= metrics.all <= 1.0

    def test_estimated_k_stays_in_bounds(self, tiny_config, data, state):
        metrics, estimate = evaluate_on_target(
            state.params, data.targets[0], data.problem.source_class_ids, "estimate", tiny_config, SeededRng(1),
            labeled=data.problem.source,
        )
        assert estimate.search_bounds == (4, 6)
        assert 4 <= estimate.k_hat <= 6
        assert metrics.k_used == estimate.k_hat

    @pytest.mark.parametrize(
        "n_known,n_samples,bounds", [(7, 500, (7, 11)), (4, 500, (4, 6)), (7, 9, (7, 9)), (19, 500, (19, 20))]
    )
    def test_k_bounds_cap_the_novel_classes(self, n_known, n_samples, bounds):
        assert target_k_bounds(n_known, n_samples, EvaluationConfig()) == bounds

    def test_k_bounds_need_a_known_class(self):
        with raises(ArgumentError):
            target_k_bounds(0, 100, EvaluationConfig())

    def test_bad_k(self, tiny_config, data, state):
        target = data.targets[0]
        with raises(ArgumentError):
            evaluate_on_target(state.params, target, (0, 1), "estimate", tiny_config, SeededRng(1))
        with raises(ArgumentError):
            evaluate_on_target(state.params, target, (0, 1), "guess", tiny_config, SeededRng(1))

    def test_report_covers_every_target(self, tiny_config, data, state):
        report = evaluate_targets(state.params, data, tiny_config)
        assert [t.domain_id for t in report.per_domain] == ["target-0"]
        assert report.mean_all == report.per_domain[0].metrics.all


class TestSweeps:
    def test_override_errors(self, tiny_config):
        with raises(ConfigurationError):
            override(tiny_config, "training", n_e=0)
        with raises(ArgumentError):
            override(tiny_config, "optimizer", lr=0.1)

    def test_sweep_episodes(self, tiny_config):
        cfg = override(tiny_config, "training", n_g=1)
        rows = orchestrator.sweep_episodes(cfg, [1, 2])
        assert [(r.label, r.value) for r in rows] == [("n_e", "1"), ("n_e", "2")]
        assert rows[0].mean_sign_conflict is None
        assert rows[1].mean_sign_conflict is not None
        with raises(ArgumentError):
            orchestrator.sweep_episodes(cfg, [0])

    def test_compare_merges(self, tiny_config):
        cfg = override(tiny_config, "training", n_g=1)
        merge = {**cfg.training.merge.model_dump(), "fisher_samples": 4}
        cfg = override(cfg, "training", merge=merge)
        rows = orchestrator.compare_merges(cfg, [3], [s.value for s in MergeStrategy])
        assert [r.value for r in rows] == [s.value for s in MergeStrategy]
        assert {r.seed for r in rows} == {3}

    def test_margin_and_split_sweeps(self, tiny_config):
        cfg = override(tiny_config, "training", n_g=1)
        assert [r.value for r in orchestrator.sweep_margin(cfg, [0.0, 0.2])] == ["0.0", "0.2"]
        assert [r.label for r in orchestrator.sweep_splits(cfg, [0.5])] == ["known_fraction"]

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pytest import raises

from app.core.errors import ArgumentError, LayoutMismatchError
from app.core.numeric import ParamVector, snap_to_grid
from app.schemas.config import MergeConfig, MergeStrategy, ScoreScale
from app.services.merging import (
    MergeWeights,
    WeightScheme,
    apply_update,
    fisher_merge,
    fixed_ta_merge,
    merge,
    minmax_weights,
    sign_conflict_fraction,
    softmax_weights,
    task_vector,
    ties_merge,
    trim_top_magnitude,
)


def pv(*values, layout="toy"):
    return ParamVector(list(values), layout)


def grid_vectors(n_vectors, size):
    return st.lists(
        st.lists(st.floats(-50, 50), min_size=size, max_size=size),
        min_size=n_vectors, max_size=n_vectors,
    ).map(lambda rows: [ParamVector(snap_to_grid(np.array(r)), "toy") for r in rows])


class TestTaskVector:
    def test_difference(self):
        tv = task_vector(pv(1.0, 2.0), pv(0.0, 2.0), e=3, g=1)
        assert tv.delta.values.tolist() == [1.0, 0.0]
        assert (tv.episode_index, tv.global_index) == (3, 1)

    def test_equal_models_give_zero(self):
        assert task_vector(pv(1.5, -2.0), pv(1.5, -2.0), 0, 1).delta.l1_norm() == 0.0

    def test_layout_mismatch(self):
        with raises(LayoutMismatchError):
            task_vector(pv(1.0, 2.0), pv(1.0, 2.0, layout="other"), 0, 1)

    def test_apply_with_weight_one_recovers_the_local(self):
        glob, local = pv(1.0, 2.0), pv(0.0, 2.0)
        tv = task_vector(glob, local, 0, 1)
        out = apply_update(glob, [tv], MergeWeights((1.0,), WeightScheme.SOFTMAX))
        assert out.params.bitwise_equal(local)


class TestWeights:
    def test_softmax_examples(self):
        assert softmax_weights([0.7, 0.3]).weights == pytest.approx((0.598688, 0.401312), abs=1e-6)
        assert softmax_weights([0.4, 0.4, 0.4]).weights == pytest.approx((1 / 3,) * 3, abs=1e-15)
        assert softmax_weights([0.9]).weights == (1.0,)

    def test_softmax_percent_scale_sharpens(self):
        fraction = softmax_weights([0.7, 0.3]).weights
        percent = softmax_weights([0.7, 0.3], ScoreScale.PERCENT).weights
        assert percent[0] > 0.999 > fraction[0]

    def test_empty_scores(self):
        with raises(ArgumentError):
            softmax_weights([])
        with raises(ArgumentError):
            minmax_weights([])

    def test_minmax_examples(self):
        assert minmax_weights([0.2, 0.8]).weights == (0.0, 1.0)
        assert minmax_weights([0.5, 0.5, 0.5]).weights == pytest.approx((1 / 3,) * 3)
        w = minmax_weights([0.3, 0.9, 0.6]).weights
        assert w[0] == 0.0
        assert sum(w) == pytest.approx(1.0)

    def test_negative_softmax_weights_are_rejected(self):
        with raises(ArgumentError):
            MergeWeights((0.5, -0.1), WeightScheme.SOFTMAX)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
    def test_softmax_weights_sum_to_one(self, scores):
        w = softmax_weights(scores).weights
        assert abs(sum(w) - 1.0) <= 1e-12
        assert all(x >= 0 for x in w)


class TestApplyUpdate:
    def test_opposite_deltas_cancel(self):
        glob = pv(1.0, -3.0)
        d = pv(0.5, 0.25)
        out = apply_update(glob, [d, -d], MergeWeights((0.5, 0.5), WeightScheme.SOFTMAX))
        assert out.params.bitwise_equal(glob)

    def test_zero_deltas(self):
        glob = pv(1.0, -3.0)
        zero = ParamVector.zeros(2, "toy")
        out = apply_update(glob, [zero, zero], softmax_weights([0.1, 0.9]))
        assert out.params.values.tolist() == glob.values.tolist()

    def test_count_mismatch(self):
        with raises(ArgumentError):
            apply_update(pv(1.0), [pv(1.0), pv(2.0)], MergeWeights((1.0,), WeightScheme.SOFTMAX))

    def test_update_reassembles_the_previous_global(self):
        glob = pv(0.125, 7.0, -2.5)
        deltas = [pv(0.3, -0.1, 0.7), pv(-0.2, 0.4, 0.05)]
        out = apply_update(glob, deltas, softmax_weights([0.61, 0.58]))
        assert (out.params + out.update).bitwise_equal(glob)

    @given(grid_vectors(3, 4), st.floats(0, 1), st.floats(-3, 3))
    def test_softmax_shift_invariance(self, vectors, base, shift):
        glob, d1, d2 = vectors
        scores = [base, base / 2]
        a = apply_update(glob, [d1, d2], softmax_weights(scores)).params
        b = apply_update(glob, [d1, d2], softmax_weights([s + shift for s in scores])).params
        assert np.allclose(a.values, b.values, atol=1e-12, rtol=0)


class TestFixedTA:
    def test_examples(self):
        glob = pv(5.0, 5.0)
        assert fixed_ta_merge(glob, [pv(2.0, 0.0), pv(0.0, 2.0)], 0.5).params.values.tolist() == [4.0, 4.0]
        assert fixed_ta_merge(glob, [pv(1.0, 1.0)] * 3, 1 / 3).params.values == pytest.approx([4.0, 4.0])
        assert fixed_ta_merge(glob, [pv(1.0, 1.0)], 0.0).params.bitwise_equal(glob)

    def test_negative_scale(self):
        with raises(ArgumentError):
            fixed_ta_merge(pv(1.0), [pv(1.0)], -1.0)

    @given(grid_vectors(2, 5))
    def test_single_episode_strategies_coincide_with_the_local(self, vectors):
        glob, local = vectors
        tv = task_vector(glob, local, 0, 1)
        weighted = apply_update(glob, [tv], softmax_weights([0.42])).params
        fixed = fixed_ta_merge(glob, [tv], 1.0).params
        assert weighted.bitwise_equal(local)
        assert fixed.bitwise_equal(local)


class TestTies:
    def test_trim_keeps_top_magnitudes(self):
        assert trim_top_magnitude(np.array([0.1, -3.0, 2.0, 0.5]), 0.5).tolist() == [0.0, -3.0, 2.0, 0.0]
        assert trim_top_magnitude(np.array([0.1, 0.2]), 0.01).tolist() == [0.0, 0.2]

    def test_hand_trace(self):
        glob = pv(0.0, 0.0)
        out = ties_merge(glob, [pv(2.0, -0.1), pv(3.0, 0.1)], 0.5)
        assert out.update.values.tolist() == [2.5, 0.0]
        assert out.params.values.tolist() == [-2.5, 0.0]

    def test_identical_vectors(self):
        d = pv(4.0, 0.5, -2.0, 0.0, 1.0)
        out = ties_merge(ParamVector.zeros(5, "toy"), [d, d], 0.4)
        assert out.update.values.tolist() == [4.0, 0.0, -2.0, 0.0, 0.0]

    def test_sign_tie_drops_the_coordinate(self):
        out = ties_merge(pv(1.0, 1.0), [pv(1.0, 0.0), pv(-1.0, 0.0)], 0.5)
        assert out.update.values.tolist() == [0.0, 0.0]

    def test_trim_fraction_range(self):
        with raises(ArgumentError):
            ties_merge(pv(1.0), [pv(1.0)], 1.0)

    @given(grid_vectors(3, 6), st.floats(0.1, 0.9))
    def test_merged_value_within_agreeing_values(self, vectors, trim):
        trimmed = np.vstack([trim_top_magnitude(v.values, trim) for v in vectors])
        merged = ties_merge(ParamVector.zeros(6, "toy"), vectors, trim).update.values
        elected = np.sign(trimmed.sum(axis=0))
        for i in range(6):
            agreeing = [x for x in trimmed[:, i] if x != 0 and np.sign(x) == elected[i]]
            if agreeing:
                assert min(agreeing) - 1e-12 <= merged[i] <= max(agreeing) + 1e-12
            else:
                assert merged[i] == 0.0


class TestFisher:
    def test_hand_example(self):
        out = fisher_merge(pv(0.0, 0.0), [pv(5.0, 9.0), pv(3.0, 7.0)], [pv(1.0, 0.0), pv(0.0, 1.0)])
        assert out.params.values.tolist() == [5.0, 7.0]
        assert (out.params + out.update).values.tolist() == [0.0, 0.0]

    def test_equal_fisher_gives_the_mean(self):
        out = fisher_merge(pv(0.0, 0.0), [pv(1.0, 4.0), pv(3.0, 0.0)], [pv(2.0, 2.0), pv(2.0, 2.0)])
        assert out.params.values.tolist() == [2.0, 2.0]

    def test_zero_fisher_model_is_ignored(self):
        out = fisher_merge(pv(0.0, 0.0), [pv(1.0, 4.0), pv(3.0, 0.0)], [pv(0.0, 0.0), pv(0.5, 0.25)])
        assert out.params.values.tolist() == [3.0, 0.0]

    def test_zero_total_falls_back_to_the_mean(self):
        out = fisher_merge(pv(0.0), [pv(1.0), pv(3.0)], [pv(0.0), pv(0.0)])
        assert out.params.values.tolist() == [2.0]

    def test_argument_checks(self):
        with raises(ArgumentError):
            fisher_merge(pv(0.0), [pv(1.0)], [pv(1.0), pv(1.0)])
        with raises(ArgumentError):
            fisher_merge(pv(0.0), [pv(1.0)], [pv(-1.0)])

    @given(
        grid_vectors(3, 4),
        st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 10)), min_size=12, max_size=12),
    )
    def test_merged_value_within_local_range(self, locals_, fisher_values):
        fishers = [ParamVector(fisher_values[i * 4:(i + 1) * 4], "toy") for i in range(3)]
        merged = fisher_merge(ParamVector.zeros(4, "toy"), locals_, fishers).params.values
        stacked = np.vstack([p.values for p in locals_])
        assert np.all(merged >= stacked.min(axis=0) - 1e-9)
        assert np.all(merged <= stacked.max(axis=0) + 1e-9)


class TestSignConflict:
    def test_examples(self):
        assert sign_conflict_fraction([pv(1.0, -1.0), pv(1.0, -1.0)]) == 0.0
        assert sign_conflict_fraction([pv(1.0, -1.0), pv(1.0, 1.0)]) == 0.5
        assert sign_conflict_fraction([pv(1.0, 0.0), pv(0.0, -1.0)]) == 0.0

    def test_all_zero_coordinates_are_excluded(self):
        assert sign_conflict_fraction([pv(1.0, 0.0), pv(-1.0, 0.0)]) == 1.0

    def test_needs_two_vectors(self):
        with raises(ArgumentError):
            sign_conflict_fraction([pv(1.0)])

    @given(grid_vectors(4, 5), st.randoms())
    def test_permutation_invariant(self, vectors, random):
        shuffled = list(vectors)
        random.shuffle(shuffled)
        assert sign_conflict_fraction(shuffled) == sign_conflict_fraction(vectors)


class TestMergeDispatch:
    def test_each_strategy(self):
        glob = pv(1.0, 1.0)
        tvs = [task_vector(glob, pv(0.0, 1.0), 0, 1), task_vector(glob, pv(1.0, 0.0), 1, 1)]
        scores = [0.5, 0.5]
        weighted = merge(glob, tvs, scores, MergeConfig())
        assert weighted.params.values.tolist() == [0.5, 0.5]
        assert weighted.weights.scheme == WeightScheme.SOFTMAX
        fixed = merge(glob, tvs, scores, MergeConfig(), strategy=MergeStrategy.FIXED_TA)
        assert fixed.params.values.tolist() == [0.5, 0.5]
        minmax = merge(glob, tvs, [0.2, 0.8], MergeConfig(strategy=MergeStrategy.MINMAX_TA))
        assert minmax.params.values.tolist() == [1.0, 0.0]
        ties = merge(glob, tvs, scores, MergeConfig(strategy=MergeStrategy.TIES, trim_fraction=0.5))
        assert ties.weights is None

    def test_fisher_needs_locals(self):
        glob = pv(1.0)
        tvs = [task_vector(glob, pv(0.0), 0, 1)]
        with raises(ArgumentError):
            merge(glob, tvs, [0.5], MergeConfig(strategy=MergeStrategy.FISHER))
        out = merge(glob, tvs, [0.5], MergeConfig(strategy=MergeStrategy.FISHER),
                    local_params=[pv(0.0)], fisher_diagonals=[pv(1.0)])
        assert out.params.values.tolist() == [0.0]

    def test_score_count_mismatch(self):
        glob = pv(1.0)
        with raises(ArgumentError):
            merge(glob, [task_vector(glob, pv(0.0), 0, 1)], [0.1, 0.2], MergeConfig())

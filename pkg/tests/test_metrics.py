"""Ranking and regression metrics against hand-computed and brute-force oracles."""

import math

import numpy as np
import pytest

from tembed.metrics import auc_roc, average_precision, explained_variance, mae, rmse


class TestAucRoc:
    def test_hand_case(self):
        # positives score {0.35, 0.8}, negatives {0.1, 0.4}: 3 of 4 pairs ordered
        got = auc_roc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
        assert math.isclose(got, 0.75, rel_tol=0, abs_tol=1e-15)

    def test_perfect_and_inverted(self):
        assert auc_roc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
        assert auc_roc([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]) == 0.0

    def test_ties_count_half(self):
        assert math.isclose(auc_roc([0, 1], [0.5, 0.5]), 0.5, rel_tol=0, abs_tol=1e-15)
        got = auc_roc([0, 0, 1, 1], [0.3, 0.5, 0.5, 0.7])
        # pairs: (0.5>0.3)=1, (0.5=0.5)=0.5, (0.7>0.3)=1, (0.7>0.5)=1 -> 3.5/4
        assert math.isclose(got, 0.875, rel_tol=0, abs_tol=1e-15)

    def test_constant_scores_give_half(self):
        assert math.isclose(auc_roc([0, 1, 0, 1], [2.0] * 4), 0.5, rel_tol=0, abs_tol=1e-15)

    def test_matches_pair_counting_on_random_data(self):
        rng = np.random.default_rng(11)
        y = (rng.random(300) < 0.4).astype(int)
        s = np.round(rng.normal(size=300), 1)  # coarse grid forces ties
        pos, neg = s[y == 1], s[y == 0]
        wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        want = wins / (len(pos) * len(neg))
        assert math.isclose(auc_roc(y, s), want, rel_tol=0, abs_tol=1e-12)

    def test_invariant_to_monotone_transforms(self):
        y = [0, 1, 0, 1, 1, 0]
        s = np.array([0.1, 0.7, 0.3, 0.9, 0.5, 0.2])
        assert math.isclose(auc_roc(y, s), auc_roc(y, 10 * s - 3), rel_tol=0, abs_tol=1e-15)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            auc_roc([1, 1], [0.1, 0.2])
        with pytest.raises(ValueError):
            auc_roc([0, 0], [0.1, 0.2])

    def test_rejects_non_binary_labels(self):
        with pytest.raises(ValueError):
            auc_roc([0, 2], [0.1, 0.2])

    def test_rejects_bad_shapes_and_values(self):
        with pytest.raises(ValueError):
            auc_roc([], [])
        with pytest.raises(ValueError):
            auc_roc([0, 1], [0.1])
        with pytest.raises(ValueError):
            auc_roc([0, 1], [0.1, math.nan])


class TestAveragePrecision:
    def test_hand_case(self):
        # ranked desc: 0.8(+), 0.4(-), 0.35(+), 0.1(-): AP = (1 + 2/3) / 2
        got = average_precision([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
        assert math.isclose(got, 5.0 / 6.0, rel_tol=0, abs_tol=1e-15)

    def test_perfect_ranking(self):
        assert average_precision([0, 1, 1], [0.1, 0.8, 0.9]) == 1.0

    def test_worst_ranking(self):
        # one positive ranked last of three
        got = average_precision([1, 0, 0], [0.1, 0.8, 0.9])
        assert math.isclose(got, 1.0 / 3.0, rel_tol=0, abs_tol=1e-15)

    def test_tied_block_uses_block_precision(self):
        got = average_precision([1, 0], [0.5, 0.5])
        assert math.isclose(got, 0.5, rel_tol=0, abs_tol=1e-15)
        got = average_precision([1, 1, 0, 0], [0.5, 0.5, 0.5, 0.5])
        assert math.isclose(got, 0.5, rel_tol=0, abs_tol=1e-15)

    def test_matches_brute_force_on_random_data(self):
        rng = np.random.default_rng(5)
        y = (rng.random(200) < 0.3).astype(int)
        s = np.round(rng.random(200), 2)
        # brute force: step through distinct thresholds from high to low
        order = np.argsort(-s, kind="stable")
        ys, ss = y[order], s[order]
        want, tp, prev_recall = 0.0, 0, 0.0
        npos = int(y.sum())
        i = 0
        while i < len(ss):
            j = i
            while j < len(ss) and ss[j] == ss[i]:
                j += 1
            tp += int(ys[i:j].sum())
            precision = tp / j
            recall = tp / npos
            want += (recall - prev_recall) * precision
            prev_recall = recall
            i = j
        assert math.isclose(average_precision(y, s), want, rel_tol=0, abs_tol=1e-12)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            average_precision([1, 1], [0.1, 0.2])


class TestRegressionMetrics:
    def test_mae_hand_case(self):
        assert math.isclose(mae([1.0, 2.0, 3.0], [2.0, 2.0, 5.0]), 1.0, rel_tol=0, abs_tol=1e-15)

    def test_rmse_hand_case(self):
        got = rmse([1.0, 2.0, 3.0], [2.0, 2.0, 5.0])
        assert math.isclose(got, math.sqrt(5.0 / 3.0), rel_tol=0, abs_tol=1e-15)

    def test_rmse_dominates_mae(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=50)
        p = y + rng.normal(size=50)
        assert rmse(y, p) >= mae(y, p)

    def test_zero_error(self):
        y = [1.5, -2.0, 0.0]
        assert mae(y, y) == 0.0
        assert rmse(y, y) == 0.0

    def test_explained_variance_hand_case(self):
        got = explained_variance([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 5.0])
        assert math.isclose(got, 0.85, rel_tol=0, abs_tol=1e-15)

    def test_explained_variance_perfect(self):
        assert explained_variance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0

    def test_explained_variance_of_shifted_prediction_is_one(self):
        # constant offsets leave residual variance at zero
        y = np.array([1.0, 2.0, 4.0])
        assert math.isclose(explained_variance(y, y + 3.0), 1.0, rel_tol=0, abs_tol=1e-15)

    def test_explained_variance_of_mean_prediction_is_zero(self):
        y = np.array([1.0, 2.0, 3.0, 6.0])
        p = np.full(4, y.mean())
        assert math.isclose(explained_variance(y, p), 0.0, rel_tol=0, abs_tol=1e-15)

    def test_explained_variance_rejects_constant_targets(self):
        with pytest.raises(ValueError):
            explained_variance([2.0, 2.0], [1.0, 3.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            mae([1.0, math.inf], [1.0, 2.0])
        with pytest.raises(ValueError):
            rmse([1.0, 2.0], [math.nan, 2.0])

    def test_rejects_empty_and_mismatched(self):
        for fn in (mae, rmse, explained_variance):
            with pytest.raises(ValueError):
                fn([], [])
            with pytest.raises(ValueError):
                fn([1.0], [1.0, 2.0])

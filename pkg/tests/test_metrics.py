import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnifuse.metrics import (
    MetricReport,
    apply_missing_policy,
    best_threshold,
    pair_verification,
    rrmse,
    score_task,
    task_metric,
    verify_distances,
)


class TestRrmse:
    def test_perfect(self, np_rng):
        t = np_rng.normal(size=(10, 3))
        assert rrmse(t, t) == 0.0

    def test_mean_predictor_is_one(self, np_rng):
        t = np_rng.normal(size=(50, 4)) * [1, 2, 3, 4]
        assert rrmse(np.broadcast_to(t.mean(axis=0), t.shape), t) == 1.0

    def test_independent_uniform_is_sqrt2(self):
        g = np.random.default_rng(0)
        t = g.uniform(-1, 1, size=(100_000, 1))
        r = g.uniform(-1, 1, size=(100_000, 1))
        assert abs(rrmse(r, t) - np.sqrt(2)) < 0.03

    def test_errors(self):
        with pytest.raises(ValueError):
            rrmse(np.ones((3, 2)), np.ones((3, 2)))
        with pytest.raises(ValueError):
            rrmse(np.ones((1, 2)), np.ones((1, 2)))
        with pytest.raises(ValueError):
            rrmse(np.ones((3, 2)), np.ones((3, 3)))

    def test_row_permutation_invariance(self, np_rng):
        t, r = np_rng.normal(size=(20, 3)), np_rng.normal(size=(20, 3))
        perm = np_rng.permutation(20)
        assert rrmse(r[perm], t[perm]) == pytest.approx(rrmse(r, t), abs=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 1000))
    def test_affine_invariance(self, alpha, c, seed):
        g = np.random.default_rng(seed)
        t, r = g.normal(size=(15, 3)), g.normal(size=(15, 3))
        assert abs(rrmse(alpha * r + c, alpha * t + c) - rrmse(r, t)) < 1e-10


class TestTaskMetric:
    def test_perfect(self):
        assert task_metric("accuracy", [1, 2], [1, 2]) == 1.0
        assert task_metric("mae", [1.0, 2.0], [1.0, 2.0]) == 0.0
        assert task_metric("error_rate", [[0.9, 0.1]], [[1, 0]]) == 0.0

    def test_half_counts_positive(self):
        assert task_metric("error_rate", [[0.5]], [[1]]) == 0.0
        assert task_metric("error_rate", [[0.5]], [[0]]) == 1.0

    def test_mae_example(self):
        assert task_metric("mae", [1, 3], [2, 2]) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            task_metric("accuracy", [], [])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
    def test_accuracy_complement(self, pairs):
        p, l = np.array(pairs).T
        assert task_metric("accuracy", p, l) + np.mean(p != l) == 1.0


class TestMissing:
    def test_classification_one_missing(self):
        labels = np.arange(10) % 3
        missing = np.zeros(10, bool)
        missing[4] = True
        rep = score_task("classification", "accuracy", labels.copy(), labels, missing)
        assert rep.value == pytest.approx(0.9)
        assert rep.n_missing == 1

    def test_regression_midpoint(self):
        out = apply_missing_policy("regression", np.array([1.0, 5.0]), [False, True], (0, 6))
        assert list(out) == [1.0, 3.0]

    def test_no_missing_unchanged(self):
        preds = np.array([0.2, 0.7])
        np.testing.assert_array_equal(apply_missing_policy("regression", preds, [False, False], (0, 1)), preds)

    def test_regression_needs_range(self):
        with pytest.raises(ValueError):
            apply_missing_policy("regression", np.array([1.0]), [True])

    def test_attrs_missing_all_bits_wrong(self):
        labels = np.array([[1, 0], [0, 1]])
        rep = score_task("binary-attrs", "error_rate", labels.astype(float), labels, np.array([True, False]))
        assert rep.value == 0.5

    def test_report_invariants(self):
        with pytest.raises(ValueError):
            MetricReport("mae", float("nan"), 3)
        with pytest.raises(ValueError):
            MetricReport("mae", 1.0, 3, n_missing=4)


def brute_best_threshold(dist, same):
    cands = [-np.inf] + sorted(set(dist)) + [np.inf]
    best = (-1, None)
    for t in cands:
        acc = np.mean((dist <= t) == same)
        if acc > best[0]:
            best = (acc, t)
    return best


class TestPairVerification:
    def test_separated(self):
        same = np.array([True, False] * 10)
        dist = np.where(same, 0.1, 0.9)
        assert verify_distances(dist, same, 10).value == 1.0

    def test_all_equal_balanced(self):
        same = np.array([True, False] * 10)
        assert verify_distances(np.full(20, 0.4), same, 10).value == 0.5

    def test_ten_folds(self, np_rng):
        emb = np_rng.normal(size=(30, 4))
        left, right = np_rng.integers(0, 30, 100), np_rng.integers(0, 30, 100)
        rep = pair_verification(emb, left, right, np_rng.random(100) < 0.5, n_folds=10)
        assert len(rep.fold_values) == 10

    def test_best_threshold_matches_brute_force(self, np_rng):
        dist = np.round(np_rng.random(25), 1)
        same = np_rng.random(25) < 0.5
        t, acc = best_threshold(dist, same)
        bacc, _ = brute_best_threshold(dist, same)
        assert acc == pytest.approx(bacc)
        assert np.mean((dist <= t) == same) == pytest.approx(acc)

    def test_monotone_transform_invariance(self, np_rng):
        dist = np_rng.random(60)
        same = np_rng.random(60) < 0.5
        a = verify_distances(dist, same, 6).value
        b = verify_distances(dist**2, same, 6).value
        assert a == b

    def test_single_class_fold_flagged(self):
        same = np.array([True] * 4 + [False, True] * 4)
        rep = verify_distances(np.linspace(0, 1, 12), same, 3)
        assert rep.flags

    def test_needs_two_folds(self, np_rng):
        with pytest.raises(ValueError):
            pair_verification(np.ones((2, 2)), [0], [1], [True], n_folds=1)

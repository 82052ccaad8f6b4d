import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feruq.exceptions import DimensionError, ValidationError
from feruq.metrics import (
    CalibrationBins,
    bin_edges,
    classification_error,
    ece,
    evaluate,
    nll,
    predictive_entropy,
    rank_by_entropy,
    reliability_curve,
    soft_label_divergence,
)
from feruq.uncertainty import PredictiveSamples

from .oracles import brute_force_ece, entropy_loop, full_sort_ranking

LN8 = math.log(8)

# rows with confidences 0.9 (correct), 0.8 (wrong), 0.4 (correct), 0.3 (wrong)
HAND_PROBS = [
    [0.9, 0.05, 0.05, 0.0],
    [0.8, 0.1, 0.1, 0.0],
    [0.4, 0.3, 0.3, 0.0],
    [0.3, 0.25, 0.25, 0.2],
]
HAND_LABELS = [0, 1, 0, 1]


def calibrated_simulation(n, k=8, seed=0):
    """Confidence ``c`` uniform on ``[1/k, 1]``; the argmax is right with probability ``c``."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(1.0 / k, 1.0, n)
    P = np.repeat(((1.0 - c) / (k - 1))[:, None], k, axis=1)
    P[:, 0] = c
    correct = rng.random(n) < c
    labels = np.where(correct, 0, rng.integers(1, k, n))
    return P, labels


class TestClassificationError:
    def test_one_hot(self):
        P = np.eye(4)
        assert classification_error(P, [0, 1, 2, 3]) == 0.0
        assert classification_error(P, [1, 2, 3, 0]) == 1.0

    def test_one_of_four_wrong(self):
        assert classification_error(np.eye(4), [0, 1, 2, 0]) == 0.25

    def test_tie_goes_to_lowest_index(self):
        assert classification_error([[0.5, 0.5]], [0]) == 0.0
        assert classification_error([[0.5, 0.5]], [1]) == 1.0

    def test_empty_and_mismatched(self):
        with pytest.raises(ValidationError):
            classification_error(np.zeros((0, 3)), [])
        with pytest.raises(DimensionError):
            classification_error(np.eye(3), [0, 1])
        with pytest.raises(ValidationError):
            classification_error(np.eye(3), [0, 1, 3])


class TestNLL:
    def test_perfect(self):
        assert nll(np.eye(3), [0, 1, 2]) == 0.0

    def test_uniform(self):
        assert nll(np.full((5, 8), 1 / 8), [0, 1, 2, 3, 4]) == pytest.approx(LN8, abs=1e-12)

    def test_hand_value(self):
        value = nll([[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]], [0, 3])
        assert value == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-15)
        assert value == pytest.approx(1.0397207708399179, abs=1e-15)

    def test_clamp(self):
        assert nll([[1.0, 0.0]], [1]) == pytest.approx(-math.log(1e-12))


class TestECE:
    def test_hand_worked_two_bins(self):
        value, bins = ece(HAND_PROBS, HAND_LABELS, n_bins=2)
        assert value == 0.25
        np.testing.assert_allclose(bins.confidence, [0.35, 0.85], atol=1e-15)
        np.testing.assert_array_equal(bins.accuracy, [0.5, 0.5])
        np.testing.assert_array_equal(bins.count, [2, 2])

    def test_one_hot_correct_is_zero(self):
        value, bins = ece(np.eye(8), np.arange(8))
        assert value == 0.0
        assert bins.count[-1] == 8

    def test_interior_edge_goes_up(self):
        # 0.5 is the edge between the two bins
        _, bins = ece([[0.5, 0.5]], [0], n_bins=2)
        np.testing.assert_array_equal(bins.count, [0, 1])
        _, bins = ece([[0.6, 0.4]], [0], n_bins=5)
        assert bins.count[3] == 1

    def test_top_bin_closed(self):
        _, bins = ece([[1.0, 0.0]], [0], n_bins=15)
        assert bins.count[14] == 1

    def test_bins_partition(self):
        rng = np.random.default_rng(2)
        P = rng.dirichlet(np.ones(8), 300)
        _, bins = ece(P, rng.integers(8, size=300), n_bins=7)
        np.testing.assert_array_equal(bins.lo, bin_edges(7)[:-1])
        np.testing.assert_array_equal(bins.hi, bin_edges(7)[1:])
        assert bins.total == 300
        assert np.all(np.isnan(bins.confidence[bins.empty]))

    @pytest.mark.parametrize("n_bins", [1, 5, 15])
    def test_matches_brute_force(self, n_bins):
        rng = np.random.default_rng(n_bins)
        for _ in range(10):
            n = int(rng.integers(1, 400))
            P = rng.dirichlet(rng.uniform(0.1, 3.0, 8), n)
            y = rng.integers(8, size=n)
            value, _ = ece(P, y, n_bins)
            assert abs(value - brute_force_ece(P, y, n_bins)) <= 1e-12

    def test_single_bin_is_gap_of_means(self):
        rng = np.random.default_rng(4)
        P = rng.dirichlet(np.ones(3), 50)
        y = rng.integers(3, size=50)
        value, _ = ece(P, y, n_bins=1)
        gap = abs(np.mean(P.argmax(1) == y) - P.max(1).mean())
        assert value == pytest.approx(gap, abs=1e-15)

    def test_calibrated_simulation(self):
        P, y = calibrated_simulation(100_000)
        value, bins = ece(P, y)
        assert value < 0.02
        for conf, acc in reliability_curve(bins):
            assert abs(conf - acc) < 0.02

    def test_invalid(self):
        with pytest.raises(ValidationError):
            ece(np.zeros((0, 8)), [])
        with pytest.raises(ValidationError):
            ece(np.eye(2), [0, 1], n_bins=0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 60), st.integers(2, 6), st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_in_unit_interval(self, n, k, n_bins, seed):
        rng = np.random.default_rng(seed)
        value, _ = ece(rng.dirichlet(np.ones(k), n), rng.integers(k, size=n), n_bins)
        assert 0.0 <= value <= 1.0


class TestReliabilityCurve:
    def test_skips_empty_bins(self):
        bins = CalibrationBins(
            np.array([0.0, 0.5]), np.array([0.5, 1.0]), np.array([0, 3]), np.array([np.nan, 0.7]), np.array([np.nan, 2 / 3])
        )
        assert reliability_curve(bins) == [(0.7, 2 / 3)]

    def test_single_bin(self):
        _, bins = ece(HAND_PROBS, HAND_LABELS, n_bins=1)
        assert len(reliability_curve(bins)) == 1


class TestEntropy:
    def test_reference_values(self):
        assert predictive_entropy(np.eye(8)[3]) == 0.0
        assert predictive_entropy(np.full(8, 1 / 8)) == pytest.approx(LN8, abs=1e-9)
        assert predictive_entropy([0.5, 0.5, 0, 0, 0, 0, 0, 0]) == pytest.approx(math.log(2), abs=1e-15)

    def test_vectorised_matches_loop(self):
        rng = np.random.default_rng(6)
        P = rng.dirichlet(np.full(8, 0.3), 50)
        np.testing.assert_allclose(predictive_entropy(P), [entropy_loop(p) for p in P], rtol=1e-12, atol=1e-15)

    def test_bounds_on_random_simplex(self):
        rng = np.random.default_rng(7)
        H = predictive_entropy(rng.dirichlet(rng.uniform(0.05, 5.0, 8), 10_000))
        assert np.all(H >= 0.0)
        assert np.all(H <= LN8 + 1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 2**32 - 1))
    def test_permutation_invariant(self, k, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(k))
        assert predictive_entropy(p) == pytest.approx(predictive_entropy(rng.permutation(p)), abs=1e-12)

    def test_off_simplex(self):
        with pytest.raises(ValidationError):
            predictive_entropy([0.5, 0.6])
        with pytest.raises(ValidationError):
            predictive_entropy([1.1, -0.1])
        predictive_entropy([0.5, 0.5 + 1e-7])


class TestSoftLabelDivergence:
    def test_reference_values(self):
        p = np.array([0.1, 0.2, 0.7])
        assert soft_label_divergence(p, p) == 0.0
        assert soft_label_divergence(np.full(8, 1 / 8), np.eye(8)[2]) == pytest.approx(LN8, abs=1e-12)
        expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
        assert soft_label_divergence([0.75, 0.25], [0.5, 0.5]) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.14384103622589042, abs=1e-15)

    def test_zero_prediction_is_clamped(self):
        assert soft_label_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(1e-12))

    def test_invalid(self):
        with pytest.raises(ValidationError):
            soft_label_divergence([0.5, 0.6], [0.5, 0.5])
        with pytest.raises(DimensionError):
            soft_label_divergence([0.5, 0.5], [1.0, 0.0, 0.0])


class TestRankByEntropy:
    def test_identical_predictions_keep_id_order(self):
        P = np.tile([0.7, 0.2, 0.1], (6, 1))
        assert rank_by_entropy(P, 3).ids == [0, 1, 2]

    def test_uniform_ranks_first(self):
        P = np.eye(4)[[0, 1, 2, 3, 0]].astype(float)
        P[3] = 0.25
        ranking = rank_by_entropy(P, 2)
        assert ranking.ids[0] == 3
        assert ranking[0].entropy == pytest.approx(math.log(4))

    def test_matches_full_sort(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            n = int(rng.integers(1, 100))
            P = rng.dirichlet(np.full(8, rng.uniform(0.2, 2.0)), n)
            # inject exact ties
            P[rng.integers(n, size=n // 4)] = P[0]
            ids = rng.permutation(1000)[:n]
            k = int(rng.integers(0, n + 1))
            assert rank_by_entropy(P, k, ids=ids).ids == full_sort_ranking(P, k, ids)

    def test_entropies_non_increasing(self):
        rng = np.random.default_rng(9)
        H = rank_by_entropy(rng.dirichlet(np.ones(8), 200), 50).entropies
        assert all(a >= b for a, b in zip(H, H[1:]))

    def test_accepts_predictive_samples(self):
        rng = np.random.default_rng(10)
        s = PredictiveSamples(rng.dirichlet(np.ones(5), (4, 30)), "mc_dropout")
        assert rank_by_entropy(s, 5).ids == rank_by_entropy(s.mean, 5).ids
        per_sample = [PredictiveSamples(s.samples[:, i], "mc_dropout") for i in range(30)]
        assert rank_by_entropy(per_sample, 5).ids == rank_by_entropy(s.mean, 5).ids

    def test_zero_k_and_bounds(self):
        assert rank_by_entropy(np.eye(3), 0) == []
        with pytest.raises(ValidationError):
            rank_by_entropy(np.eye(3), 4)

    def test_carries_label_distributions(self):
        labels = np.eye(3)
        r = rank_by_entropy(np.full((3, 3), 1 / 3), 1, label_dists=labels)
        np.testing.assert_array_equal(r[0].label_dist, labels[0])


class TestEvaluate:
    def test_report_fields(self):
        report = evaluate(HAND_PROBS, HAND_LABELS, n_bins=2)
        d = report.to_dict()
        assert set(d) == {"error", "nll", "ece", "mean_entropy", "bins"}
        assert d["error"] == 0.5
        assert d["ece"] == 0.25
        assert d["bins"][0] == {"lo": 0.0, "hi": 0.5, "count": 2, "conf": pytest.approx(0.35), "acc": 0.5}

    def test_pure(self):
        rng = np.random.default_rng(11)
        P = rng.dirichlet(np.ones(8), 100)
        y = rng.integers(8, size=100)
        before = P.copy()
        assert evaluate(P, y).to_dict() == evaluate(P, y).to_dict()
        np.testing.assert_array_equal(P, before)

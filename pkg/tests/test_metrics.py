import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vroute.metrics import (auprc, auroc, calibration_report, ece,
                            gate_entropy, inf_logit_var, jaccard,
                            jaccard_rows, mce, mc_logit_var)
from vroute.routers import GaussianPosterior
from vroute.tensor import Tensor


class TestEce:
    def test_perfectly_confident_and_correct(self):
        assert ece(np.ones(10), np.ones(10)) == 0.0

    def test_single_bin_hand_value(self):
        conf = np.full(4, 0.9)
        correct = np.array([1.0, 1.0, 0.0, 0.0])
        assert ece(conf, correct) == pytest.approx(0.4, abs=1e-12)
        assert mce(conf, correct) == pytest.approx(0.4, abs=1e-12)

    def test_simulated_calibrated_scores_near_zero(self):
        rng = np.random.default_rng(0)
        conf = rng.uniform(0.0, 1.0, 100_000)
        correct = (rng.uniform(size=conf.size) < conf).astype(float)
        assert ece(conf, correct) < 0.02

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ece(np.ones(3), np.ones(4))

    def test_out_of_range_confidence_rejected(self):
        with pytest.raises(ValueError):
            ece(np.array([1.2]), np.array([1.0]))


class TestMce:
    def test_perfect_is_zero(self):
        assert mce(np.ones(8), np.ones(8)) == 0.0

    def test_mce_at_least_ece_random(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(5, 60))
            conf = rng.uniform(size=n)
            correct = rng.integers(0, 2, n).astype(float)
            assert mce(conf, correct) >= ece(conf, correct) - 1e-12


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.1, 0.2], [0.3, 0.4]) == 1.0

    def test_identical_distributions_near_half(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=10_000)
        b = rng.normal(size=10_000)
        assert abs(auroc(a, b) - 0.5) < 0.01

    def test_pairwise_enumeration(self):
        # pairs won: (.1,.2) (.1,.3) (.1,.5) (.4,.5) -> 4/6
        assert auroc([0.1, 0.4], [0.2, 0.3, 0.5]) == pytest.approx(
            4.0 / 6.0, abs=1e-12)

    def test_brute_force_with_ties(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            a = rng.integers(0, 5, size=12).astype(float)
            b = rng.integers(0, 5, size=9).astype(float)
            wins = sum((bb > aa) + 0.5 * (bb == aa) for aa in a for bb in b)
            assert auroc(a, b) == pytest.approx(wins / (12 * 9), abs=1e-12)

    def test_empty_side_rejected(self):
        with pytest.raises(ValueError):
            auroc([], [0.1])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-500, 500), min_size=2, max_size=20,
                    unique=True))
    def test_monotone_transform_invariance_and_symmetry(self, raw):
        # integer-spaced scores stay distinct under the exp transform
        values = [v / 100.0 for v in raw]
        half = len(values) // 2
        a, b = values[:half] or [values[0]], values[half:]
        base = auroc(a, b)
        transformed = auroc(np.exp(0.3 * np.asarray(a)),
                            np.exp(0.3 * np.asarray(b)))
        assert transformed == pytest.approx(base, abs=1e-12)
        assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)


class TestAuprc:
    def test_perfect_separation(self):
        assert auprc([0.1, 0.2], [0.3, 0.4]) == 1.0

    def test_constant_scores_balanced(self):
        assert auprc([1.0] * 5, [1.0] * 5) == pytest.approx(0.5, abs=1e-12)

    def test_brute_force_threshold_sweep(self):
        rng = np.random.default_rng(17)
        a = rng.normal(size=5)
        b = rng.normal(size=5)

        # oracle: step AP over descending unique thresholds
        scores = np.concatenate([a, b])
        labels = np.concatenate([np.zeros(5), np.ones(5)])
        expected, prev_recall = 0.0, 0.0
        for th in sorted(set(scores), reverse=True):
            sel = scores >= th
            tp = labels[sel].sum()
            recall = tp / labels.sum()
            precision = tp / sel.sum()
            expected += (recall - prev_recall) * precision
            prev_recall = recall
        assert auprc(a, b) == pytest.approx(expected, abs=1e-12)


class TestGateEntropy:
    def test_one_hot_is_zero(self):
        assert gate_entropy(np.eye(6)[2]) == 0.0

    def test_uniform_forty(self):
        assert gate_entropy(np.full(40, 1 / 40)) == pytest.approx(
            math.log(40), abs=1e-12)

    def test_matches_term_by_term_sum(self):
        rng = np.random.default_rng(2)
        p = rng.dirichlet(np.ones(9))
        expected = -sum(pi * math.log(pi) for pi in p if pi > 0)
        assert gate_entropy(p) == pytest.approx(expected, abs=1e-12)


class TestInfLogitVar:
    def test_identity_factor(self):
        post = GaussianPosterior(Tensor(np.zeros(5)),
                                 cholesky_L=Tensor(np.eye(5)))
        assert inf_logit_var(post) == pytest.approx(5.0, abs=1e-12)

    def test_diagonal_sigmas(self):
        post = GaussianPosterior(Tensor(np.zeros(2)),
                                 diag_sigma=Tensor([2.0, 3.0]))
        assert inf_logit_var(post) == pytest.approx(13.0, abs=1e-12)

    def test_matches_trace_of_product(self):
        rng = np.random.default_rng(21)
        L = np.tril(rng.normal(size=(6, 6)))
        L[np.arange(6), np.arange(6)] = np.exp(np.diag(L))
        post = GaussianPosterior(Tensor(np.zeros(6)), cholesky_L=Tensor(L))
        assert inf_logit_var(post) == pytest.approx(np.trace(L @ L.T),
                                                    abs=1e-9)


class TestMcLogitVar:
    def test_identical_rows_zero(self):
        assert mc_logit_var(np.ones((7, 3))) == 0.0

    def test_hand_computed_pair(self):
        samples = np.array([[0.0, 0.0], [2.0, 0.0]])
        assert mc_logit_var(samples) == pytest.approx(2.0, abs=1e-12)

    def test_quadratic_homogeneity(self):
        rng = np.random.default_rng(8)
        s = rng.normal(size=(10, 4))
        centre = s.mean(0, keepdims=True)
        doubled = centre + 2.0 * (s - centre)
        assert mc_logit_var(doubled) == pytest.approx(4 * mc_logit_var(s),
                                                      rel=1e-12)


class TestJaccard:
    def test_equal_sets(self):
        assert jaccard({1, 2, 3}, {1, 2, 3}) == 1.0

    def test_disjoint_sets(self):
        assert jaccard({0, 1}, {2, 3}) == 0.0

    def test_eight_element_half_overlap(self):
        a = set(range(8))
        b = set(range(4, 12))
        assert jaccard(a, b) == pytest.approx(4 / 12, abs=1e-12)

    def test_symmetry_and_mask_input(self):
        a = np.array([1.0, 0.0, 1.0, 0.0])
        b = np.array([1.0, 1.0, 0.0, 0.0])
        assert jaccard(a, b) == jaccard(b, a) == pytest.approx(1 / 3)

    def test_rowwise_matches_scalar(self):
        rng = np.random.default_rng(4)
        a = (rng.uniform(size=(20, 6)) < 0.4).astype(float)
        b = (rng.uniform(size=(20, 6)) < 0.4).astype(float)
        rows = jaccard_rows(a, b)
        for i in range(20):
            assert rows[i] == pytest.approx(jaccard(a[i], b[i]), abs=1e-12)


def test_calibration_report_consistency():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(400, 4))
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    labels = rng.integers(0, 4, 400)
    rep = calibration_report(probs, labels)
    conf = probs.max(1)
    correct = (probs.argmax(1) == labels).astype(float)
    assert rep.ece == pytest.approx(ece(conf, correct), abs=1e-12)
    assert rep.mce == pytest.approx(mce(conf, correct), abs=1e-12)
    assert rep.accuracy == pytest.approx(correct.mean(), abs=1e-12)
    assert 0 <= rep.ece <= rep.mce <= 1
    assert sum(rep.bin_count) == 400
    assert rep.bin_edges[0] == 0.0 and rep.bin_edges[-1] == 1.0

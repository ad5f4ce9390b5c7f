import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedsim.similarity import (
    jaccard,
    logit_weight,
    model_similarity,
    normality_scores,
    signature_from_importance,
    spearman_norm,
    weights_from_scores,
)

seeds = st.integers(0, 2**32 - 1)


def random_sig(rng, dim=60, k_ratio=0.1):
    return signature_from_importance(rng.random(dim), k_ratio)


class TestJaccard:
    def test_identical(self):
        assert jaccard({1, 4}, {4, 1}) == 1.0

    def test_disjoint(self):
        assert jaccard([1, 2], [3]) == 0.0

    def test_overlap(self):
        assert jaccard([1, 2, 3], [2, 3, 4]) == 0.5

    def test_both_empty(self):
        assert jaccard([], []) == 1.0


class TestSpearman:
    def test_identical(self):
        assert spearman_norm([0, 2, 1, 3], [0, 2, 1, 3]) == 1.0

    def test_reversed(self):
        assert spearman_norm([0, 1, 2, 3], [3, 2, 1, 0]) == 0.0

    def test_one_swap(self):
        # 1 - 6 * sum(d^2) / (n (n^2 - 1)) with d = (0, 1, 1, 0)
        rho = 1 - 6 * 2 / (4 * 15)
        assert spearman_norm([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx((rho + 1) / 2, abs=1e-12)
        assert spearman_norm([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.9, abs=1e-12)

    def test_degenerate_is_neutral(self):
        assert spearman_norm([], []) == 0.5
        assert spearman_norm([3], [1]) == 0.5
        assert spearman_norm([1, 1, 1], [0, 1, 2]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            spearman_norm([0, 1], [0, 1, 2])

    @given(st.permutations(range(12)), st.permutations(range(12)))
    def test_agrees_with_scipy(self, a, b):
        rho = stats.spearmanr(a, b).statistic
        assert spearman_norm(a, b) == pytest.approx((rho + 1) / 2, abs=1e-12)


def hand_sig(imp, k_ratio=0.3):
    return signature_from_importance(np.asarray(imp, dtype=float), k_ratio)


class TestModelSimilarity:
    def test_self_similarity(self):
        sig = hand_sig([5, 10, 11, 12, 6, 7, 8, 1, 2, 3])
        assert model_similarity(sig, sig) == 4.0

    def test_disjoint_sets(self):
        a = hand_sig([10, 11, 12, 4, 5, 6, 7, 1, 2, 3])
        b = hand_sig([1, 2, 3, 4, 5, 6, 7, 10, 11, 12])
        assert set(a.critical.top.tolist()) == {0, 1, 2}
        assert set(b.critical.bottom.tolist()) == {0, 1, 2}
        assert model_similarity(a, b) == 1.0

    def test_partial_overlap(self):
        a = hand_sig([5, 10, 11, 12, 6, 7, 8, 1, 2, 3])
        b = hand_sig([5, 6, 11, 12, 10, 7, 8, 1, 2, 3])
        assert a.critical.top.tolist() == [1, 2, 3]
        assert b.critical.top.tolist() == [2, 3, 4]
        assert model_similarity(a, b) == pytest.approx(0.5 + 1 + 1 + 1)

    def test_ablation_flags(self):
        a = hand_sig([5, 10, 11, 12, 6, 7, 8, 1, 2, 3])
        b = hand_sig([5, 6, 11, 12, 10, 7, 8, 1, 2, 3])
        assert model_similarity(a, b, use_bottom=False) == pytest.approx(1.5)
        assert model_similarity(a, b, use_top=False) == pytest.approx(2.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            model_similarity(hand_sig(np.arange(10.0)), hand_sig(np.arange(20.0)))

    @given(seeds)
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_sig(rng), random_sig(rng)
        assert model_similarity(a, b) == model_similarity(b, a)

    @given(seeds, st.integers(20, 300))
    def test_self_is_four(self, seed, dim):
        sig = signature_from_importance(np.random.default_rng(seed).random(dim), 0.1)
        assert sig.critical.k_count >= 2
        assert model_similarity(sig, sig) == 4.0

    @given(seeds)
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        assert 0.0 <= model_similarity(random_sig(rng), random_sig(rng)) <= 4.0


class TestNormality:
    def test_identical_clients(self):
        sig = hand_sig([5, 10, 11, 12, 6, 7, 8, 1, 2, 3])
        raw = normality_scores([sig] * 4)
        assert len(set(raw)) == 1
        # three peers at similarity 4, divided by four clients
        assert raw[0] == pytest.approx(3.0)

    def test_two_clients_divide_by_count(self):
        a = hand_sig([5, 10, 11, 12, 6, 7, 8, 1, 2, 3])
        b = hand_sig([5, 6, 11, 12, 10, 7, 8, 1, 2, 3])
        s = model_similarity(a, b)
        assert normality_scores([a, b]) == pytest.approx([s / 2, s / 2])

    def test_global_term_added(self):
        rng = np.random.default_rng(3)
        sigs = [random_sig(rng) for _ in range(3)]
        g = random_sig(rng)
        without = normality_scores(sigs)
        with_g = normality_scores(sigs, g)
        for i in range(3):
            assert with_g[i] == pytest.approx(without[i] + model_similarity(sigs[i], g))
        only_global = normality_scores(sigs, g, use_local=False)
        assert only_global == pytest.approx([model_similarity(s, g) for s in sigs])
        assert normality_scores(sigs, g, use_global=False) == without

    def test_outlier_is_minimal(self):
        rng = np.random.default_rng(11)
        base = rng.random(80)
        benign = [signature_from_importance(base + 0.05 * rng.random(80), 0.1) for _ in range(4)]
        outlier = signature_from_importance(rng.random(80), 0.1)
        sigs = benign + [outlier]
        benign_pairs = [model_similarity(a, b) for i, a in enumerate(benign) for b in benign[i + 1 :]]
        outlier_pairs = [model_similarity(outlier, b) for b in benign]
        assert max(outlier_pairs) < min(benign_pairs)
        raw = normality_scores(sigs)
        assert int(np.argmin(raw)) == 4
        assert all(raw[4] < r for r in raw[:4])

    def test_empty(self):
        with pytest.raises(ValueError):
            normality_scores([])


class TestWeights:
    def test_breakpoints(self):
        lam = logit_weight([0.3775, 0.5, 0.6225])
        np.testing.assert_allclose(lam, [0.0, 0.5, 1.0], atol=1e-6)

    def test_breakpoints_are_where_logit_crosses(self):
        s_hi = 1 / (1 + math.exp(-0.5))
        assert s_hi == pytest.approx(0.6225, abs=1e-4)
        assert logit_weight([s_hi - 1e-3])[0] < 1.0
        assert logit_weight([1 - s_hi + 1e-3])[0] > 0.0

    def test_degenerate_scores(self):
        np.testing.assert_array_equal(weights_from_scores([2.0, 2.0, 2.0]), [0.5, 0.5, 0.5])
        np.testing.assert_array_equal(weights_from_scores([7.0]), [0.5])

    def test_extremes_saturate(self):
        lam = weights_from_scores([1.0, 2.0, 3.0])
        assert lam[0] == 0.0 and lam[2] == 1.0 and lam[1] == pytest.approx(0.5)

    def test_empty(self):
        with pytest.raises(ValueError):
            weights_from_scores([])

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
    def test_bounded_and_monotone(self, raw):
        lam = weights_from_scores(raw)
        assert np.all((lam >= 0) & (lam <= 1))
        order = np.argsort(raw, kind="stable")
        assert np.all(np.diff(lam[order]) >= 0)

    @settings(max_examples=200)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=20),
           st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariance(self, raw, scale, shift):
        raw = np.asarray(raw)
        if np.ptp(raw) < 1e-3:
            return
        np.testing.assert_allclose(
            weights_from_scores(scale * raw + shift), weights_from_scores(raw), atol=1e-6
        )

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=20))
    def test_argmax_gets_one_argmin_gets_zero(self, raw):
        raw = np.asarray(raw)
        if np.ptp(raw) == 0:
            return
        lam = weights_from_scores(raw)
        assert lam[np.argmax(raw)] == 1.0
        assert lam[np.argmin(raw)] == 0.0

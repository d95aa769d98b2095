"""Tests for Gram fingerprints and the cardinality heads.

Fingerprint values are checked against hand-computed Gram matrices; the
permutation invariances are asserted bitwise, which the sorted-accumulation
construction is specifically meant to deliver.
"""

import numpy as np
import pytest

from amoclust import autodiff as ad
from amoclust import cin
from amoclust import metrics as mt
from amoclust import pin
from amoclust.priors import Dataset

TINY = pin.PinHyper(d=16, d_tok=8, l_enc=1, l_dec=1, heads=4, k_max=4)


def _soft(rng, n, k, sharp=3.0):
    return mt.SoftPartition.from_logits(ad.Tensor(rng.standard_normal((n, k)) * sharp))


def _fingerprint(rng, k_max, n=12):
    parts = [_soft(rng, n, k) for k in range(2, k_max + 1)]
    return cin.fingerprint_from_partitions(parts)


class TestFingerprintLength:
    def test_totals(self):
        assert cin.expected_fingerprint_length(10) == 219
        assert cin.expected_fingerprint_length(2) == 3
        assert cin.expected_fingerprint_length(4) == 3 + 6 + 10

    def test_rejects_degenerate_k_max(self):
        with pytest.raises(ValueError, match="k_max"):
            cin.expected_fingerprint_length(1)

    def test_per_candidate_lengths(self):
        rng = np.random.default_rng(0)
        for k in range(2, 7):
            g = cin.gram_fingerprint(_soft(rng, 15, k))
            assert g.shape == (k * (k + 1) // 2,)

    def test_concat_matches_parts(self):
        fp = _fingerprint(np.random.default_rng(1), 10)
        assert fp.concat.shape == (219,)
        np.testing.assert_array_equal(
            fp.concat.data, np.concatenate([g.data for g in fp.per_k]))


class TestGramFingerprint:
    def test_single_cluster_collapse(self):
        p = mt.SoftPartition.from_probs(np.tile([1.0, 0.0], (5, 1)))
        np.testing.assert_array_equal(cin.gram_fingerprint(p).data, [1.0, 0.0, 0.0])

    def test_uniform_partition(self):
        p = mt.SoftPartition.from_probs(np.full((7, 3), 1.0 / 3.0))
        np.testing.assert_allclose(cin.gram_fingerprint(p).data, np.full(6, 1.0 / 9.0),
                                   atol=1e-15)

    def test_matches_direct_gram_arithmetic(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n, k = int(rng.integers(3, 30)), int(rng.integers(2, 6))
            p = _soft(rng, n, k)
            g = p.probs.data.T @ p.probs.data / n
            want = np.concatenate([np.sort(np.diag(g))[::-1],
                                   np.sort(g[np.triu_indices(k, 1)])[::-1]])
            np.testing.assert_allclose(cin.gram_fingerprint(p).data, want, atol=1e-12)

    def test_sorted_segments_non_increasing(self):
        rng = np.random.default_rng(3)
        g = cin.gram_fingerprint(_soft(rng, 25, 5)).data
        assert (np.diff(g[:5]) <= 0).all()
        assert (np.diff(g[5:]) <= 0).all()

    def test_entries_bounded_and_diag_mass(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            k = int(rng.integers(2, 7))
            g = cin.gram_fingerprint(_soft(rng, 20, k)).data
            assert (g >= 0).all() and (g <= 1).all()
            assert g[:k].sum() <= 1.0 + 1e-6

    def test_row_permutation_invariance_bitwise(self):
        rng = np.random.default_rng(5)
        p = _soft(rng, 40, 4)
        base = cin.gram_fingerprint(p).data
        for _ in range(5):
            perm = rng.permutation(40)
            other = cin.gram_fingerprint(
                mt.SoftPartition.from_probs(p.probs.data[perm])).data
            np.testing.assert_array_equal(other, base)

    def test_column_permutation_invariance_bitwise(self):
        rng = np.random.default_rng(6)
        p = _soft(rng, 40, 5)
        base = cin.gram_fingerprint(p).data
        for _ in range(5):
            perm = rng.permutation(5)
            other = cin.gram_fingerprint(
                mt.SoftPartition.from_probs(p.probs.data[:, perm])).data
            np.testing.assert_array_equal(other, base)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        weights = ad.Tensor(rng.standard_normal(6))

        def f(t):
            p = mt.SoftPartition.from_probs(ad.softmax(t))
            return ad.rsum(ad.mul(cin.gram_fingerprint(p), weights))

        rep = ad.finite_difference_check(f, rng.standard_normal((6, 3)), tol=1e-4)
        assert rep.passed, rep


class TestSweepAssembly:
    def test_rejects_bad_column_counts(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError, match="expected 3"):
            cin.fingerprint_from_partitions([_soft(rng, 5, 2), _soft(rng, 5, 4)])
        with pytest.raises(ValueError, match="empty"):
            cin.fingerprint_from_partitions([])

    def test_partition_sweep_column_counts(self):
        rng = np.random.default_rng(9)
        ds = Dataset(x=rng.standard_normal((10, 3)), col_kind=["numeric"] * 3,
                     labels=None, k_true=3)
        params = pin.init_pin_params(TINY, np.random.default_rng(10))
        parts = cin.partition_sweep(ds, params, TINY)
        assert [p.k for p in parts] == [2, 3, 4]

    def test_naive_sweep_is_sliced_to_k_columns(self):
        hyper = pin.PinHyper(d=16, d_tok=8, l_enc=1, l_dec=1, heads=4, k_max=4,
                             decoder="naive")
        params = pin.init_pin_params(hyper, np.random.default_rng(11))
        rng = np.random.default_rng(12)
        ds = Dataset(x=rng.standard_normal((10, 3)), col_kind=["numeric"] * 3,
                     labels=None, k_true=3)
        parts = cin.partition_sweep(ds, params, hyper)
        assert [p.k for p in parts] == [2, 3, 4]
        for p in parts:
            assert np.abs(p.probs.data.sum(axis=1) - 1.0).max() <= 1e-12


class TestPosteriorHead:
    def test_output_is_a_distribution(self):
        fp = _fingerprint(np.random.default_rng(13), 10)
        params = cin.init_cin_params(10, np.random.default_rng(14))
        post = cin.cin_forward(fp, params)
        assert post.shape == (9,)
        assert abs(post.data.sum() - 1.0) <= 1e-8
        assert (post.data > 0).all()

    def test_width_mismatch(self):
        fp = _fingerprint(np.random.default_rng(15), 4)
        params = cin.init_cin_params(10, np.random.default_rng(16))
        with pytest.raises(ValueError, match="width"):
            cin.cin_forward(fp, params)

    def test_column_permutation_of_sweep_leaves_posterior_unchanged(self):
        rng = np.random.default_rng(17)
        parts = [_soft(rng, 15, k) for k in range(2, 11)]
        params = cin.init_cin_params(10, np.random.default_rng(18))
        base = cin.cin_forward(cin.fingerprint_from_partitions(parts), params).data
        shuffled = [mt.SoftPartition.from_probs(p.probs.data[:, rng.permutation(p.k)])
                    for p in parts]
        other = cin.cin_forward(cin.fingerprint_from_partitions(shuffled), params).data
        np.testing.assert_array_equal(other, base)

    def test_predict_k_range_and_determinism(self):
        rng = np.random.default_rng(19)
        ds = Dataset(x=rng.standard_normal((12, 3)), col_kind=["numeric"] * 3,
                     labels=None, k_true=3)
        pparams = pin.init_pin_params(TINY, np.random.default_rng(20))
        cparams = cin.init_cin_params(4, np.random.default_rng(21))
        khat = cin.predict_k(ds, pparams, TINY, cparams)
        assert 2 <= khat <= 4
        assert cin.predict_k(ds, pparams, TINY, cparams) == khat

    def test_predict_k_argmax_and_tie_rule(self, monkeypatch):
        ds = Dataset(x=np.zeros((4, 2)), col_kind=["numeric"] * 2,
                     labels=None, k_true=3)
        pparams = pin.init_pin_params(TINY, np.random.default_rng(22))
        cparams = cin.init_cin_params(4, np.random.default_rng(23))

        def fake_post(fp, params):
            return ad.Tensor(np.array(post_values))

        monkeypatch.setattr(cin, "cin_forward", fake_post)
        post_values = [0.1, 0.1, 0.8]
        assert cin.predict_k(ds, pparams, TINY, cparams) == 4
        post_values = [0.3, 0.1, 0.3]       # exact tie between K=2 and K=4
        assert cin.predict_k(ds, pparams, TINY, cparams) == 2


class TestOrdinalHead:
    def _setup(self, seed=24):
        fp = _fingerprint(np.random.default_rng(seed), 10)
        params = cin.init_cin_params(10, np.random.default_rng(seed + 1),
                                     with_ordinal=True)
        return fp, params

    def test_thresholds_non_decreasing(self):
        _, params = self._setup()
        params.ordinal.deltas.data[:] = np.random.default_rng(26).standard_normal(8) * 3
        b = cin.ordinal_thresholds(params).data
        assert (np.diff(b) >= 0).all()
        assert b.shape == (8,)

    def test_score_below_first_threshold_predicts_two(self):
        fp, params = self._setup()
        params.ordinal.b3.data[:] = -100.0      # force a very low score
        eta = cin.ordinal_forward(fp, params).data
        assert (eta < 0).all()
        assert cin.ordinal_predict_k(fp, params) == 2

    def test_score_above_last_threshold_predicts_k_max(self):
        fp, params = self._setup()
        params.ordinal.b3.data[:] = 100.0
        assert cin.ordinal_predict_k(fp, params) == 10

    def test_prediction_monotone_in_score(self):
        fp, params = self._setup()
        b = cin.ordinal_thresholds(params).data
        predictions = []
        for shift in np.linspace(b[0] - 1.0, b[-1] + 1.0, 30):
            params.ordinal.b3.data[:] = shift       # score == b3 at zero weights?
            predictions.append(cin.ordinal_predict_k(fp, params))
        assert all(a <= b2 for a, b2 in zip(predictions, predictions[1:]))
        assert predictions[0] == 2 and predictions[-1] == 10

    def test_missing_head_raises(self):
        fp = _fingerprint(np.random.default_rng(27), 10)
        params = cin.init_cin_params(10, np.random.default_rng(28))
        with pytest.raises(ValueError, match="ordinal"):
            cin.ordinal_forward(fp, params)

    def test_eta_gradients_match_finite_differences(self):
        fp, params = self._setup(seed=29)
        weights = ad.Tensor(np.random.default_rng(30).standard_normal(8))

        def f(t):
            params.ordinal.deltas = t
            return ad.rsum(ad.mul(cin.ordinal_forward(fp, params), weights))

        rep = ad.finite_difference_check(f, params.ordinal.deltas.data.copy(), tol=1e-4)
        assert rep.passed, rep


class TestCinInit:
    def test_named_tensors(self):
        params = cin.init_cin_params(10, np.random.default_rng(31), with_ordinal=True)
        names = [n for n, _ in params.named_tensors()]
        assert len(names) == len(set(names)) == 14
        base = cin.init_cin_params(10, np.random.default_rng(31))
        assert len(base.named_tensors()) == 6

    def test_shapes_track_k_max(self):
        params = cin.init_cin_params(6, np.random.default_rng(32), with_ordinal=True)
        assert params.w1.shape == (cin.expected_fingerprint_length(6), 256)
        assert params.w3.shape == (256, 5)
        assert params.ordinal.deltas.shape == (4,)

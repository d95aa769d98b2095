"""Tests for the partition network.

Permutation claims are checked by direct comparison of permuted runs,
gradients against central finite differences, and the attention-cost claims
by recording every softmax input shape during a forward pass.
"""

import dataclasses
import math

import numpy as np
import pytest

from amoclust import autodiff as ad
from amoclust import metrics as mt
from amoclust import pin
from amoclust.priors import Dataset

TINY = pin.PinHyper(d=16, d_tok=8, l_enc=1, l_dec=1, heads=4, k_max=3)


def _dataset(rng, n, d, k_true=3, kinds=None):
    return Dataset(x=rng.standard_normal((n, d)),
                   col_kind=kinds or ["numeric"] * d,
                   labels=rng.integers(0, k_true, size=n).astype(np.intp),
                   k_true=k_true)


def _record_softmax_shapes(monkeypatch):
    shapes = []
    real = ad.softmax

    def recorder(x):
        shapes.append(tuple(np.shape(x.data if isinstance(x, ad.Tensor) else x)))
        return real(x)

    monkeypatch.setattr(ad, "softmax", recorder)
    return shapes


class TestPinHyper:
    def test_width_must_divide_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            pin.PinHyper(d=30, heads=4)
        with pytest.raises(ValueError, match="divisible"):
            pin.PinHyper(d_tok=10, heads=4)

    def test_layer_and_k_bounds(self):
        with pytest.raises(ValueError, match="l_dec"):
            pin.PinHyper(l_dec=0)
        with pytest.raises(ValueError, match="k_max"):
            pin.PinHyper(k_max=1)
        with pytest.raises(ValueError, match="ffn_mult"):
            pin.PinHyper(ffn_mult=0)
        with pytest.raises(ValueError, match="temperature"):
            pin.PinHyper(temperature_init=0.0)

    def test_unknown_decoder(self):
        with pytest.raises(ValueError, match="decoder"):
            pin.PinHyper(decoder="recurrent")


class TestInit:
    def test_temperature_starts_at_configured_value(self):
        params = pin.init_pin_params(pin.PinHyper(temperature_init=7.0),
                                     np.random.default_rng(0))
        assert abs(math.exp(params.log_tau.item()) - 7.0) <= 1e-12

    def test_block_weights_truncated_at_two_sigma(self):
        # residual-block internals start near identity; the out-of-stream
        # MLPs (cell embed, projection, head) are fan-in scaled instead
        params = pin.init_pin_params(pin.PinHyper(), np.random.default_rng(1))
        for name, t in params.named_tensors():
            if ".w" in name and name.endswith(("wq", "wk", "wv", "wo", "ffn_w1", "ffn_w2")):
                assert np.abs(t.data).max() <= 2.0 * pin.INIT_STD + 1e-12, name
        assert np.abs(params.pool_seed.data).max() <= 2.0 * pin.INIT_STD + 1e-12

    def test_fan_in_weights_scaled_by_input_width(self):
        params = pin.init_pin_params(pin.PinHyper(), np.random.default_rng(1))
        for t, fan in [(params.cell_w1, pin.CELL_INPUT_WIDTH), (params.cell_w2, 16),
                       (params.proj_w, 16), (params.head_w1, 64),
                       (params.head_w2, 128)]:
            std = fan ** -0.5
            assert np.abs(t.data).max() <= 2.0 * std + 1e-12
            # and they really are wider than the 0.02 block init
            assert t.data.std() > 3.0 * pin.INIT_STD

    def test_named_tensors_unique_and_complete(self):
        params = pin.init_pin_params(pin.PinHyper(), np.random.default_rng(2))
        names = [n for n, _ in params.named_tensors()]
        assert len(names) == len(set(names))
        assert "prototypes" in names and "log_tau" in names
        assert not any(n.startswith(("naive", "nonit")) for n in names)

    def test_decoder_choice_selects_parameter_groups(self):
        p_naive = pin.init_pin_params(pin.PinHyper(decoder="naive"),
                                      np.random.default_rng(3))
        assert p_naive.prototypes is None and p_naive.naive_blocks is not None
        p_non = pin.init_pin_params(pin.PinHyper(decoder="noniterative"),
                                    np.random.default_rng(3))
        assert p_non.prototypes is not None and p_non.nonit_row is not None
        assert p_non.dec_sa is None

    def test_dtype_propagates(self):
        params = pin.init_pin_params(TINY, np.random.default_rng(4), dtype=np.float32)
        assert params.dtype == np.float32
        assert all(t.data.dtype == np.float32 for _, t in params.named_tensors())


class TestMabPre:
    def _block(self, width=8, seed=0):
        return pin._init_mab(np.random.default_rng(seed), width, 2, np.float64)

    def test_query_row_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        blk = self._block()
        q, kv = ad.Tensor(rng.standard_normal((6, 8))), ad.Tensor(rng.standard_normal((4, 8)))
        out = pin.mab_pre(q, kv, blk, 4)
        perm = rng.permutation(6)
        out_p = pin.mab_pre(ad.Tensor(q.data[perm]), kv, blk, 4)
        assert np.abs(out_p.data - out.data[perm]).max() <= 1e-9

    def test_kv_row_permutation_invariance(self):
        rng = np.random.default_rng(6)
        blk = self._block()
        q, kv = ad.Tensor(rng.standard_normal((3, 8))), ad.Tensor(rng.standard_normal((7, 8)))
        out = pin.mab_pre(q, kv, blk, 4)
        out_p = pin.mab_pre(q, ad.Tensor(kv.data[rng.permutation(7)]), blk, 4)
        assert np.abs(out_p.data - out.data).max() <= 1e-9

    def test_width_mismatch_raises(self):
        blk = self._block()
        with pytest.raises(ad.ShapeError, match="mab_pre"):
            pin.mab_pre(ad.Tensor(np.zeros((3, 8))), ad.Tensor(np.zeros((3, 6))), blk, 4)

    @pytest.mark.parametrize("wrt", ["q", "kv", "wq", "ffn_w1"])
    def test_gradients_match_finite_differences(self, wrt):
        rng = np.random.default_rng(7)
        blk = self._block(seed=8)
        q0 = rng.standard_normal((3, 8))
        kv0 = rng.standard_normal((5, 8))

        def f(t):
            if wrt == "q":
                return ad.rsum(ad.mul(pin.mab_pre(t, ad.Tensor(kv0), blk, 4), weights))
            if wrt == "kv":
                return ad.rsum(ad.mul(pin.mab_pre(ad.Tensor(q0), t, blk, 4), weights))
            b = dataclasses.replace(blk, **{wrt: t})
            return ad.rsum(ad.mul(pin.mab_pre(ad.Tensor(q0), ad.Tensor(kv0), b, 4), weights))

        weights = ad.Tensor(rng.standard_normal((3, 8)))
        x0 = {"q": q0, "kv": kv0, "wq": blk.wq.data, "ffn_w1": blk.ffn_w1.data}[wrt]
        rep = ad.finite_difference_check(f, x0, tol=1e-4)
        assert rep.passed, rep


class TestEncode:
    def test_output_shape(self):
        hyper = pin.PinHyper(d=32, d_tok=8, l_enc=2, l_dec=1, heads=4, k_max=4)
        params = pin.init_pin_params(hyper, np.random.default_rng(9))
        ds = _dataset(np.random.default_rng(10), 16, 4)
        assert pin.encode(ds, params, hyper).shape == (16, 32)

    def test_feature_permutation_invariance(self):
        rng = np.random.default_rng(11)
        hyper, params = TINY, pin.init_pin_params(TINY, np.random.default_rng(12))
        ds = _dataset(rng, 10, 5, kinds=["numeric", "categorical", "numeric",
                                         "categorical", "numeric"])
        out = pin.encode(ds, params, hyper)
        perm = rng.permutation(5)
        ds_p = Dataset(x=ds.x[:, perm], col_kind=[ds.col_kind[j] for j in perm],
                       labels=ds.labels, k_true=ds.k_true)
        out_p = pin.encode(ds_p, params, hyper)
        assert np.abs(out_p.data - out.data).max() <= 1e-9

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        params = pin.init_pin_params(TINY, np.random.default_rng(14))
        ds = _dataset(rng, 12, 3)
        out = pin.encode(ds, params, TINY)
        perm = rng.permutation(12)
        ds_p = Dataset(x=ds.x[perm], col_kind=ds.col_kind, labels=None, k_true=3)
        out_p = pin.encode(ds_p, params, TINY)
        assert np.abs(out_p.data - out.data[perm]).max() <= 1e-9

    def test_rejects_flat_input(self):
        params = pin.init_pin_params(TINY, np.random.default_rng(15))
        ds = Dataset(x=np.zeros(5), col_kind=["numeric"], labels=None, k_true=2)
        with pytest.raises(ad.ShapeError, match="N x D"):
            pin.encode(ds, params, TINY)


class TestDecode:
    def test_k_two_ignores_later_prototype_rows(self):
        params = pin.init_pin_params(pin.PinHyper(), np.random.default_rng(16))
        r0 = ad.Tensor(np.random.default_rng(17).standard_normal((9, 64)))
        state = pin.decode(r0, 2, params, pin.PinHyper())
        params.prototypes.data[2:] += 50.0      # rows never selected at k=2
        state2 = pin.decode(r0, 2, params, pin.PinHyper())
        np.testing.assert_array_equal(state2.c.data, state.c.data)
        np.testing.assert_array_equal(state2.r.data, state.r.data)

    def test_row_permutation_moves_r_not_c(self):
        rng = np.random.default_rng(18)
        params = pin.init_pin_params(TINY, np.random.default_rng(19))
        r0 = rng.standard_normal((11, 16))
        state = pin.decode(ad.Tensor(r0), 3, params, TINY)
        perm = rng.permutation(11)
        state_p = pin.decode(ad.Tensor(r0[perm]), 3, params, TINY)
        assert np.abs(state_p.r.data - state.r.data[perm]).max() <= 1e-9
        assert np.abs(state_p.c.data - state.c.data).max() <= 1e-9
        assert state.layer == TINY.l_dec

    @pytest.mark.parametrize("k", [1, 4])
    def test_k_out_of_range(self, k):
        params = pin.init_pin_params(TINY, np.random.default_rng(20))
        with pytest.raises(ValueError, match="out of range"):
            pin.decode(ad.Tensor(np.zeros((5, 16))), k, params, TINY)

    def test_never_scores_data_against_data(self, monkeypatch):
        n, k = 17, 3
        params = pin.init_pin_params(TINY, np.random.default_rng(21))
        r0 = ad.Tensor(np.random.default_rng(22).standard_normal((n, 16)))
        shapes = _record_softmax_shapes(monkeypatch)
        pin.decode(r0, k, params, TINY)
        assert shapes, "no attention recorded"
        assert all(s[-2:] != (n, n) for s in shapes)
        assert any(s[-2:] == (k, n) for s in shapes)
        assert any(s[-2:] == (n, k) for s in shapes)

    def test_wrong_parameter_group(self):
        params = pin.init_pin_params(pin.PinHyper(decoder="naive"),
                                     np.random.default_rng(23))
        with pytest.raises(ValueError, match="iterative"):
            pin.decode(ad.Tensor(np.zeros((5, 64))), 2, params, pin.PinHyper(decoder="naive"))


class TestCosineHead:
    def test_logits_bounded_by_temperature(self):
        params = pin.init_pin_params(TINY, np.random.default_rng(24))
        rng = np.random.default_rng(25)
        state = pin.DecoderState(r=ad.Tensor(rng.standard_normal((20, 16))),
                                 c=ad.Tensor(rng.standard_normal((3, 16))), layer=1)
        sp = pin.cosine_head(state, params)
        tau = math.exp(params.log_tau.item())
        assert np.abs(sp.logits.data).max() <= tau + 1e-9

    def test_duplicate_rows_get_identical_assignments(self):
        params = pin.init_pin_params(TINY, np.random.default_rng(26))
        rng = np.random.default_rng(27)
        x = rng.standard_normal((8, 4))
        x[5] = x[2]
        ds = Dataset(x=x, col_kind=["numeric"] * 4, labels=None, k_true=3)
        sp = pin.pin_forward(ds, 3, params, TINY)
        assert np.abs(sp.probs.data[5] - sp.probs.data[2]).max() <= 1e-6

    def test_rows_sum_to_one(self):
        params = pin.init_pin_params(TINY, np.random.default_rng(28))
        ds = _dataset(np.random.default_rng(29), 15, 3)
        sp = pin.pin_forward(ds, 3, params, TINY)
        assert np.abs(sp.probs.data.sum(axis=1) - 1.0).max() <= 1e-8


class TestPinForward:
    def test_shape_contract(self):
        hyper = pin.PinHyper()
        params = pin.init_pin_params(hyper, np.random.default_rng(30))
        ds = _dataset(np.random.default_rng(31), 64, 5)
        sp = pin.pin_forward(ds, 3, params, hyper)
        assert sp.probs.shape == (64, 3)

    def test_row_equivariance_random_parameter_trials(self):
        for trial in range(5):
            rng = np.random.default_rng(100 + trial)
            params = pin.init_pin_params(TINY, rng)
            ds = _dataset(rng, 14, 4)
            sp = pin.pin_forward(ds, 3, params, TINY)
            perm = rng.permutation(14)
            ds_p = Dataset(x=ds.x[perm], col_kind=ds.col_kind, labels=None, k_true=3)
            sp_p = pin.pin_forward(ds_p, 3, params, TINY)
            assert np.abs(sp_p.probs.data - sp.probs.data[perm]).max() <= 1e-9

    def test_repeated_forward_bitwise_identical(self):
        params = pin.init_pin_params(TINY, np.random.default_rng(32))
        ds = _dataset(np.random.default_rng(33), 10, 3)
        a = pin.pin_forward(ds, 3, params, TINY)
        b = pin.pin_forward(ds, 3, params, TINY)
        np.testing.assert_array_equal(a.probs.data, b.probs.data)

    @pytest.mark.parametrize("target", ["prototypes", "log_tau", "cell_w1", "enc.wq"])
    def test_loss_gradients_match_finite_differences(self, target):
        rng = np.random.default_rng(34)
        params = pin.init_pin_params(TINY, np.random.default_rng(35))
        ds = _dataset(rng, 8, 3)
        z = ds.labels

        def f(t):
            if target == "enc.wq":
                blk = dataclasses.replace(params.enc_blocks[0], wq=t)
                p2 = dataclasses.replace(params, enc_blocks=[blk])
            else:
                p2 = dataclasses.replace(params, **{target: t})
            return mt.soft_ari(pin.pin_forward(ds, 3, p2, TINY), z)

        # encoder-block entries carry ~1e-8 gradients where central-diff
        # roundoff (eps*|f|/step) swamps a 1e-5 step; cell_w1 and the
        # prototypes have the opposite problem, curvature truncation at
        # coarse steps
        x0 = {"prototypes": params.prototypes, "log_tau": params.log_tau,
              "cell_w1": params.cell_w1, "enc.wq": params.enc_blocks[0].wq}[target]
        step = {"cell_w1": 1e-5, "prototypes": 3e-4}.get(target, 1e-3)
        rep = ad.finite_difference_check(f, x0.data, step=step, tol=1e-4)
        assert rep.passed, rep


class TestNaiveDecoder:
    HYPER = pin.PinHyper(d=16, d_tok=8, l_enc=1, l_dec=1, heads=4, k_max=5,
                         decoder="naive")

    def _setup(self, n=17, seed=36):
        params = pin.init_pin_params(self.HYPER, np.random.default_rng(seed))
        r0 = ad.Tensor(np.random.default_rng(seed + 1).standard_normal((n, 16)))
        return params, r0

    def test_masked_columns_get_zero_probability(self):
        params, r0 = self._setup()
        sp = pin.naive_decoder_forward(r0, 3, params, self.HYPER)
        assert sp.probs.shape == (17, 5)
        np.testing.assert_array_equal(sp.probs.data[:, 3:], 0.0)
        assert np.abs(sp.probs.data.sum(axis=1) - 1.0).max() <= 1e-12

    def test_row_permutation_equivariance(self):
        params, r0 = self._setup()
        sp = pin.naive_decoder_forward(r0, 3, params, self.HYPER)
        perm = np.random.default_rng(38).permutation(17)
        sp_p = pin.naive_decoder_forward(ad.Tensor(r0.data[perm]), 3, params, self.HYPER)
        assert np.abs(sp_p.probs.data - sp.probs.data[perm]).max() <= 1e-9

    def test_block_count_is_twice_l_dec(self):
        params, _ = self._setup()
        assert len(params.naive_blocks) == 2 * self.HYPER.l_dec

    def test_scores_rows_against_rows(self, monkeypatch):
        params, r0 = self._setup()
        shapes = _record_softmax_shapes(monkeypatch)
        pin.naive_decoder_forward(r0, 3, params, self.HYPER)
        assert any(s[-2:] == (17, 17) for s in shapes)

    def test_gradient_check_tiny(self):
        params, _ = self._setup()
        rng = np.random.default_rng(39)
        r0 = rng.standard_normal((4, 16))
        z = np.array([0, 1, 2, 0])

        def f(t):
            sp = pin.naive_decoder_forward(t, 3, params, self.HYPER)
            return mt.soft_ari(sp, z)

        rep = ad.finite_difference_check(f, r0, step=1e-3, tol=1e-4)
        assert rep.passed, rep

    def test_wrong_parameter_group(self):
        params = pin.init_pin_params(TINY, np.random.default_rng(40))
        with pytest.raises(ValueError, match="naive"):
            pin.naive_decoder_forward(ad.Tensor(np.zeros((4, 16))), 2, params, self.HYPER)


class TestNoniterDecoder:
    HYPER = pin.PinHyper(d=16, d_tok=8, l_enc=1, l_dec=2, heads=4, k_max=5,
                         decoder="noniterative")

    def test_prototypes_invariant_to_row_order(self):
        params = pin.init_pin_params(self.HYPER, np.random.default_rng(41))
        rng = np.random.default_rng(42)
        r0 = rng.standard_normal((13, 16))
        sp = pin.noniter_decoder_forward(ad.Tensor(r0), 3, params, self.HYPER)
        perm = rng.permutation(13)
        sp_p = pin.noniter_decoder_forward(ad.Tensor(r0[perm]), 3, params, self.HYPER)
        assert np.abs(sp_p.probs.data - sp.probs.data[perm]).max() <= 1e-9

    def test_layer_counts(self):
        params = pin.init_pin_params(self.HYPER, np.random.default_rng(43))
        assert len(params.nonit_row) == self.HYPER.l_dec
        assert len(params.nonit_sa) == self.HYPER.l_dec
        assert len(params.nonit_ca) == self.HYPER.l_dec

    def test_allocates_row_by_row_scores(self, monkeypatch):
        params = pin.init_pin_params(self.HYPER, np.random.default_rng(44))
        r0 = ad.Tensor(np.random.default_rng(45).standard_normal((19, 16)))
        shapes = _record_softmax_shapes(monkeypatch)
        pin.noniter_decoder_forward(r0, 3, params, self.HYPER)
        assert any(s[-2:] == (19, 19) for s in shapes)


class TestForwardPartition:
    def test_dispatch_matches_decoder_setting(self):
        ds = _dataset(np.random.default_rng(46), 12, 3)
        for decoder, cols in (("iterative", 3), ("naive", 5), ("noniterative", 3)):
            hyper = pin.PinHyper(d=16, d_tok=8, l_enc=1, l_dec=1, heads=4,
                                 k_max=5, decoder=decoder)
            params = pin.init_pin_params(hyper, np.random.default_rng(47))
            sp = pin.forward_partition(ds, 3, params, hyper)
            assert sp.probs.shape == (12, cols)

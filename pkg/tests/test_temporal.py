"""Temporal trunks: causal TCN, transformer encoder, attention pooling."""
import numpy as np
import pytest

import swallowgraph.autodiff as ad
from swallowgraph import temporal


def test_dilation_schedule_covers_sequence():
    for seq_len in (8, 16, 100, 750):
        for kernel in (2, 3, 5):
            d = temporal.tcn_dilations(seq_len, kernel)
            rf = 1 + (kernel - 1) * sum(d)
            assert rf >= seq_len
            # dropping the last block must leave the sequence uncovered
            if len(d) > 1:
                assert 1 + (kernel - 1) * sum(d[:-1]) < seq_len
            assert d == [2 ** i for i in range(len(d))]


def test_tcn_output_shape():
    rng = np.random.default_rng(0)
    params = temporal.init_tcn_params(rng, in_dim=5, channels=7, kernel=3, seq_len=16)
    x = rng.standard_normal((2, 16, 5))
    out = temporal.tcn_forward(ad.constant(x), params, kernel=3)
    assert out.data.shape == (2, 16, 7)


def test_tcn_is_causal():
    # perturbing timestep t must not change outputs before t
    rng = np.random.default_rng(1)
    params = temporal.init_tcn_params(rng, in_dim=4, channels=6, kernel=3, seq_len=32)
    x = rng.standard_normal((1, 32, 4))
    base = temporal.tcn_forward(ad.constant(x), params, kernel=3).data
    for t in (0, 7, 20, 31):
        xp = x.copy()
        xp[0, t] += 10.0
        out = temporal.tcn_forward(ad.constant(xp), params, kernel=3).data
        np.testing.assert_array_equal(out[0, :t], base[0, :t])
        assert not np.allclose(out[0, t], base[0, t])


def test_tcn_gradcheck_two_blocks():
    rng = np.random.default_rng(2)
    params = temporal.init_tcn_params(rng, in_dim=3, channels=4, kernel=3, seq_len=16)
    assert len(params["_tcn_dilations"]) >= 2
    x = rng.standard_normal((2, 16, 3))
    probe = rng.standard_normal((2, 16, 4))

    def fn(t):
        out = temporal.tcn_forward(ad.as_tensor(t), params, kernel=3)
        return ad.tsum(ad.mul(out, ad.constant(probe)))

    assert ad.grad_check(fn, x, step=1e-5).passed
    for key in params:
        if key.startswith("_"):
            continue
        def pfn(t, key=key):
            saved = params[key]
            params[key] = t
            try:
                out = temporal.tcn_forward(ad.constant(x), params, kernel=3)
                return ad.tsum(ad.mul(out, ad.constant(probe)))
            finally:
                params[key] = saved
        assert ad.grad_check(pfn, params[key].data, step=1e-5).passed, key


def test_sinusoidal_encoding_shape_and_range():
    pe = temporal.sinusoidal_encoding(50, 8)
    assert pe.shape == (50, 8)
    assert np.abs(pe).max() <= 1.0
    assert not np.allclose(pe[0], pe[1])


def test_transformer_output_shape_and_determinism():
    rng = np.random.default_rng(3)
    params = temporal.init_transformer_params(rng, in_dim=6, width=8, heads=2,
                                              ff_width=16, blocks=2)
    x = rng.standard_normal((2, 12, 6))
    a = temporal.transformer_encoder_forward(ad.constant(x), params).data
    b = temporal.transformer_encoder_forward(ad.constant(x), params).data
    assert a.shape == (2, 12, 8)
    np.testing.assert_array_equal(a, b)


def test_self_attention_rows_sum_to_one():
    rng = np.random.default_rng(4)
    q = rng.standard_normal((2, 3, 10, 4))
    k = rng.standard_normal((2, 3, 10, 4))
    w = temporal.self_attention_weights(ad.constant(q), ad.constant(k)).data
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    assert (w > 0).all()


def test_transformer_gradcheck_one_block():
    rng = np.random.default_rng(5)
    params = temporal.init_transformer_params(rng, in_dim=3, width=4, heads=2,
                                              ff_width=8, blocks=1)
    x = rng.standard_normal((2, 8, 3))
    probe = rng.standard_normal((2, 8, 4))

    def fn(t):
        out = temporal.transformer_encoder_forward(ad.as_tensor(t), params)
        return ad.tsum(ad.mul(out, ad.constant(probe)))

    assert ad.grad_check(fn, x, step=1e-5).passed


def test_temporal_pool_weights_convex():
    rng = np.random.default_rng(6)
    params = temporal.init_temporal_pool_params(rng, in_dim=5, category_dim=4)
    seq = rng.standard_normal((3, 10, 5))
    for c in range(3):
        w = temporal.temporal_pool_weights(ad.constant(seq), params, c).data
        assert (w > 0).all()
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_temporal_pool_output_shape_and_gradcheck():
    rng = np.random.default_rng(7)
    params = temporal.init_temporal_pool_params(rng, in_dim=5, category_dim=4)
    seq = rng.standard_normal((3, 10, 5))
    z = temporal.temporal_attention_pool(ad.constant(seq), params, 1)
    assert z.data.shape == (3, 4)
    probe = rng.standard_normal((3, 4))

    def fn(t):
        out = temporal.temporal_attention_pool(ad.as_tensor(t), params, 1)
        return ad.tsum(ad.mul(out, ad.constant(probe)))

    assert ad.grad_check(fn, seq, step=1e-5).passed

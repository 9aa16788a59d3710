"""Temporal modeling of the pooled per-timestep features.

Two interchangeable trunks over the 750-step sequence: a dilated causal
TCN (doubling dilations until the receptive field covers the sequence) and
a transformer encoder with sinusoidal positional encoding. A per-category
temporal attention pooling reduces the trunk output to one embedding per
classification category.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class TemporalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# TCN


def tcn_dilations(seq_len, kernel):
    """Doubling dilation schedule 1, 2, 4, ... until receptive field >= seq_len."""
    dilations = []
    d = 1
    while True:
        dilations.append(d)
        rf = 1 + (kernel - 1) * sum(dilations)
        if rf >= seq_len:
            return dilations
        d *= 2


def init_tcn_params(rng, in_dim, channels, kernel, seq_len):
    dilations = tcn_dilations(seq_len, kernel)
    params = {"_tcn_dilations": dilations}
    d_in = in_dim
    for i, _ in enumerate(dilations):
        p = f"tcn{i}_"
        scale = (2.0 / (kernel * d_in)) ** 0.5
        params[p + "w"] = ad.Tensor(
            rng.normal(0.0, scale, size=(kernel, d_in, channels)), requires_grad=True)
        params[p + "b"] = ad.Tensor(np.zeros(channels), requires_grad=True)
        if d_in != channels:
            params[p + "proj"] = ad.Tensor(
                rng.normal(0.0, (1.0 / d_in) ** 0.5, size=(d_in, channels)),
                requires_grad=True)
        d_in = channels
    return params


def tcn_forward(x, params, kernel):
    """Residual dilated causal blocks: [B, T, k] -> [B, T, channels].

    Causal by construction: only left padding inside the convolution.
    """
    dilations = params["_tcn_dilations"]
    h = x
    for i, dil in enumerate(dilations):
        p = f"tcn{i}_"
        y = ad.leaky_relu(ad.add(
            ad.conv1d_causal(h, params[p + "w"], dilation=dil), params[p + "b"]))
        if (p + "proj") in params:
            h = ad.add(y, ad.matmul(h, params[p + "proj"]))
        else:
            h = ad.add(y, h)
    return h


# ---------------------------------------------------------------------------
# transformer encoder


def sinusoidal_encoding(seq_len, width):
    pos = np.arange(seq_len)[:, None]
    i = np.arange(width // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / width)
    enc = np.zeros((seq_len, width))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


def init_transformer_params(rng, in_dim, width, heads, ff_width, blocks):
    if width % heads != 0:
        raise TemporalError("model width must divide by head count")
    params = {"_tr_blocks": blocks, "_tr_heads": heads}

    def mat(shape):
        return ad.Tensor(rng.normal(0.0, (1.0 / shape[0]) ** 0.5, size=shape),
                         requires_grad=True)

    params["tr_in_w"] = mat((in_dim, width))
    params["tr_in_b"] = ad.Tensor(np.zeros(width), requires_grad=True)
    for i in range(blocks):
        p = f"tr{i}_"
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = mat((width, width))
        params[p + "ff_w1"] = mat((width, ff_width))
        params[p + "ff_b1"] = ad.Tensor(np.zeros(ff_width), requires_grad=True)
        params[p + "ff_w2"] = mat((ff_width, width))
        params[p + "ff_b2"] = ad.Tensor(np.zeros(width), requires_grad=True)
        for ln in ("ln1", "ln2"):
            params[p + ln + "_g"] = ad.Tensor(np.ones(width), requires_grad=True)
            params[p + ln + "_b"] = ad.Tensor(np.zeros(width), requires_grad=True)
    return params


def _split_heads(x, heads):
    b, t, w = x.shape
    x = ad.reshape(x, (b, t, heads, w // heads))
    return ad.transpose(x, (0, 2, 1, 3))  # [B, H, T, dh]


def _merge_heads(x):
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def self_attention_weights(q, k):
    """Softmax attention rows (each sums to 1)."""
    dh = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    return ad.softmax(scores, axis=-1)


def transformer_encoder_forward(x, params):
    """Full (non-causal) self-attention encoder: [B, T, k] -> [B, T, width]."""
    blocks = params["_tr_blocks"]
    heads = params["_tr_heads"]
    h = ad.add(ad.matmul(x, params["tr_in_w"]), params["tr_in_b"])
    t, w = h.shape[1], h.shape[2]
    h = ad.add(h, ad.constant(sinusoidal_encoding(t, w)))
    for i in range(blocks):
        p = f"tr{i}_"
        hn = ad.layer_norm(h, params[p + "ln1_g"], params[p + "ln1_b"])
        q = _split_heads(ad.matmul(hn, params[p + "wq"]), heads)
        k = _split_heads(ad.matmul(hn, params[p + "wk"]), heads)
        v = _split_heads(ad.matmul(hn, params[p + "wv"]), heads)
        att = self_attention_weights(q, k)
        ctx = _merge_heads(ad.matmul(att, v))
        h = ad.add(h, ad.matmul(ctx, params[p + "wo"]))
        hn = ad.layer_norm(h, params[p + "ln2_g"], params[p + "ln2_b"])
        ff = ad.matmul(ad.leaky_relu(ad.add(
            ad.matmul(hn, params[p + "ff_w1"]), params[p + "ff_b1"])),
            params[p + "ff_w2"])
        h = ad.add(h, ad.add(ff, params[p + "ff_b2"]))
    return h


# ---------------------------------------------------------------------------
# temporal attention pooling (per category)


def init_temporal_pool_params(rng, in_dim, category_dim, n_categories=3):
    params = {}
    for c in range(n_categories):
        p = f"tpool{c}_"
        params[p + "w"] = ad.Tensor(
            rng.normal(0.0, (2.0 / in_dim) ** 0.5, size=(in_dim, in_dim)),
            requires_grad=True)
        params[p + "b"] = ad.Tensor(np.zeros(in_dim), requires_grad=True)
        params[p + "v"] = ad.Tensor(
            rng.normal(0.0, (2.0 / in_dim) ** 0.5, size=(in_dim, 1)),
            requires_grad=True)
        params[p + "proj"] = ad.Tensor(
            rng.normal(0.0, (1.0 / in_dim) ** 0.5, size=(in_dim, category_dim)),
            requires_grad=True)
        params[p + "proj_b"] = ad.Tensor(np.zeros(category_dim), requires_grad=True)
    return params


def temporal_attention_pool(seq, params, category):
    """Convex combination over timesteps, then a linear projection to d_c.

    seq: [B, T, d_t] -> [B, d_c].
    """
    p = f"tpool{category}_"
    scores = ad.matmul(
        ad.leaky_relu(ad.add(ad.matmul(seq, params[p + "w"]), params[p + "b"])),
        params[p + "v"])                                # [B, T, 1]
    alpha = ad.softmax(scores, axis=1)
    pooled = ad.tsum(ad.mul(alpha, seq), axis=1)        # [B, d_t]
    return ad.add(ad.matmul(pooled, params[p + "proj"]), params[p + "proj_b"])


def temporal_pool_weights(seq, params, category):
    p = f"tpool{category}_"
    scores = ad.matmul(
        ad.leaky_relu(ad.add(ad.matmul(seq, params[p + "w"]), params[p + "b"])),
        params[p + "v"])
    return ad.softmax(scores, axis=1)

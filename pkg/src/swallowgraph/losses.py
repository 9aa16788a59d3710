"""Training objective: class-weighted smoothed cross-entropy per category,
supervised contrastive regularization on the category embeddings, and
their weighted sum across the three categories.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad


class LossError(ValueError):
    pass


def smoothed_targets(y, n_classes, epsilon):
    """(1-eps) one-hot + eps/K uniform; rows sum to 1 exactly."""
    if not (0.0 <= epsilon < 1.0):
        raise LossError("label smoothing must be in [0, 1)")
    y = np.asarray(y, dtype=int)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    if ((y < 0) | (y >= n_classes)).any():
        raise LossError("label index out of range")
    out = np.full((len(y), n_classes), epsilon / n_classes)
    out[np.arange(len(y)), y] += 1.0 - epsilon
    return out[0] if scalar else out


def compute_class_weights(labels, n_classes):
    """Inverse-frequency weights w_k = N/(K*n_k), normalized so the
    frequency-weighted mean weight is 1. Absent classes floor n_k at 1
    with a warning."""
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    if (counts == 0).any():
        warnings.warn(f"absent class(es) {np.where(counts == 0)[0].tolist()} "
                      "in training fold; flooring count at 1")
    floored = np.maximum(counts, 1.0)
    n = len(labels)
    raw = n / (n_classes * floored)
    freq_mean = (counts / n * raw).sum()
    return raw / freq_mean if freq_mean > 0 else raw


def weighted_ce(logits, targets, weights):
    """Eq-style weighted smoothed CE: -(1/N) sum_i sum_k w_k t_ik log p_ik."""
    logits = ad.as_tensor(logits)
    n = logits.shape[0]
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if (weights <= 0).any():
        raise LossError("class weights must be strictly positive")
    logp = ad.log_softmax(logits, axis=1)
    weighted = ad.mul(logp, ad.constant(targets * weights[None, :]))
    return ad.mul(ad.tsum(weighted), -1.0 / n)


def supcon_loss(embeddings, labels, temperature):
    """Supervised contrastive loss on cosine-similarity logits.

    Anchors with no positive partner are excluded from the average; if no
    anchor has positives the loss is 0 with a warning.
    """
    if temperature <= 0:
        raise LossError("temperature must be > 0")
    z = ad.as_tensor(embeddings)
    n = z.shape[0]
    if n < 2:
        raise LossError("supcon needs a batch of at least 2")
    labels = np.asarray(labels, dtype=int)

    zn = ad.l2_normalize(z, axis=1)
    sim = ad.mul(ad.matmul(zn, ad.transpose(zn, (1, 0))), 1.0 / temperature)
    eye = np.eye(n, dtype=bool)
    sim = ad.masked_fill(sim, eye, -1e30)  # exclude a = i from the denominator

    pos = (labels[:, None] == labels[None, :]) & ~eye
    pos_count = pos.sum(axis=1)
    anchors = pos_count > 0
    if not anchors.any():
        warnings.warn("supcon: no anchor has a positive partner; loss is 0")
        return ad.constant(0.0)

    shift = ad.constant(sim.data.max(axis=1, keepdims=True))
    lse = ad.add(ad.log(ad.tsum(ad.exp(ad.sub(sim, shift)), axis=1, keepdims=True)),
                 shift)
    logprob = ad.sub(sim, lse)  # [N, N]

    inv = np.zeros(n)
    inv[anchors] = 1.0 / pos_count[anchors]
    weight = pos.astype(float) * inv[:, None]
    total = ad.tsum(ad.mul(logprob, ad.constant(weight)))
    return ad.mul(total, -1.0 / anchors.sum())


def total_loss(ce_losses, con_losses, contrastive_weight):
    """Sum of the three CE terms plus lambda times the contrastive terms."""
    if contrastive_weight < 0:
        raise LossError("contrastive weight must be >= 0")
    out = ce_losses[0]
    for term in ce_losses[1:]:
        out = ad.add(out, term)
    for term in con_losses:
        out = ad.add(out, ad.mul(term, contrastive_weight))
    return out

"""Loss oracles (hand-derived, frozen) and invariance properties."""
import numpy as np
import pytest

import swallowgraph.autodiff as ad
from swallowgraph import losses

LN2 = 0.6931471805599453
LN3 = 1.0986122886681098
LN_1P2E = 0.5514447139320511   # ln(1 + 2/e)


def test_smoothed_targets_hand_value():
    t = losses.smoothed_targets(np.array([0]), 3, 0.3)
    np.testing.assert_allclose(t, [[0.8, 0.1, 0.1]], atol=1e-12)


def test_smoothed_targets_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(10):
        k = int(rng.integers(2, 6))
        y = rng.integers(0, k, size=8)
        eps = float(rng.uniform(0, 0.5))
        t = losses.smoothed_targets(y, k, eps)
        np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-12)
        assert (t > 0).all() or eps == 0


def test_weighted_ce_ln2():
    targets = losses.smoothed_targets(np.array([0]), 2, 0.0)
    v = losses.weighted_ce(ad.constant(np.zeros((1, 2))), targets, np.array([1.0, 1.0]))
    assert abs(float(v.data) - LN2) < 1e-9


def test_weighted_ce_2ln2():
    targets = losses.smoothed_targets(np.array([0]), 2, 0.0)
    v = losses.weighted_ce(ad.constant(np.zeros((1, 2))), targets, np.array([2.0, 1.0]))
    assert abs(float(v.data) - 2 * LN2) < 1e-9


def test_weighted_ce_eps_zero_is_plain_ce():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((7, 4))
    y = rng.integers(0, 4, size=7)
    targets = losses.smoothed_targets(y, 4, 0.0)
    got = float(losses.weighted_ce(ad.constant(logits), targets, np.ones(4)).data)
    lse = np.log(np.exp(logits).sum(axis=1))
    want = float(np.mean(lse - logits[np.arange(7), y]))
    assert abs(got - want) < 1e-12


def test_supcon_identical_embeddings_ln3():
    z = ad.constant(np.ones((4, 3)))
    v = losses.supcon_loss(z, np.zeros(4, dtype=int), 1.0)
    assert abs(float(v.data) - LN3) < 1e-9


def test_supcon_two_orthogonal_pairs():
    z = ad.constant(np.array([[1.0, 0], [1, 0], [0, 1], [0, 1]]))
    v = losses.supcon_loss(z, np.array([0, 0, 1, 1]), 1.0)
    assert abs(float(v.data) - LN_1P2E) < 1e-9


def test_supcon_scale_invariance():
    # cosine similarity: rescaling embeddings must not change the loss
    rng = np.random.default_rng(2)
    z = rng.standard_normal((6, 5))
    y = np.array([0, 0, 1, 1, 2, 2])
    a = float(losses.supcon_loss(ad.constant(z), y, 0.5).data)
    b = float(losses.supcon_loss(ad.constant(z * 37.0), y, 0.5).data)
    assert abs(a - b) < 1e-9


def test_supcon_permutation_invariance():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((8, 4))
    y = np.array([0, 1, 0, 1, 2, 2, 0, 1])
    perm = rng.permutation(8)
    a = float(losses.supcon_loss(ad.constant(z), y, 0.3).data)
    b = float(losses.supcon_loss(ad.constant(z[perm]), y[perm], 0.3).data)
    assert abs(a - b) < 1e-9


def test_supcon_no_positive_anchors_gives_zero():
    # all labels distinct: no anchor has a positive; loss must be 0
    rng = np.random.default_rng(4)
    z = rng.standard_normal((4, 3))
    v = losses.supcon_loss(ad.constant(z), np.array([0, 1, 2, 3]), 0.5)
    assert abs(float(v.data)) < 1e-12


def test_total_loss_arithmetic():
    one = ad.constant(np.array(1.0))
    v = losses.total_loss([one] * 3, [one] * 3, 0.5)
    assert abs(float(v.data) - 4.5) < 1e-9


def test_total_loss_matches_summation_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        ces = [float(x) for x in rng.uniform(0, 3, size=3)]
        cons = [float(x) for x in rng.uniform(0, 3, size=3)]
        lam = float(rng.uniform(0, 1))
        got = float(losses.total_loss(
            [ad.constant(np.array(c)) for c in ces],
            [ad.constant(np.array(c)) for c in cons], lam).data)
        assert abs(got - (sum(ces) + lam * sum(cons))) < 1e-12


def test_class_weights_hand_value():
    # counts (6, 2, 2), N=10, K=3 -> N/(K n_k), frequency-weighted mean 1
    y = np.array([0] * 6 + [1] * 2 + [2] * 2)
    w = losses.compute_class_weights(y, 3)
    np.testing.assert_allclose(w, [10 / 18, 10 / 6, 10 / 6], atol=1e-12)
    freq = np.array([0.6, 0.2, 0.2])
    assert abs(float(freq @ w) - 1.0) < 1e-12


def test_class_weights_absent_class_warns():
    with pytest.warns(UserWarning):
        w = losses.compute_class_weights(np.array([0, 0, 1]), 3)
    assert np.isfinite(w).all()


def test_weighted_ce_gradient_direction():
    # gradient wrt the true-class logit must be negative (pushes it up)
    logits = ad.Tensor(np.zeros((1, 3)), requires_grad=True)
    targets = losses.smoothed_targets(np.array([1]), 3, 0.0)
    losses.weighted_ce(logits, targets, np.ones(3)).backward()
    assert logits.grad[0, 1] < 0
    assert logits.grad[0, 0] > 0 and logits.grad[0, 2] > 0


def test_supcon_gradcheck():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((6, 4))
    y = np.array([0, 0, 1, 1, 2, 2])
    rep = ad.grad_check(lambda x: losses.supcon_loss(x, y, 0.7), z, step=1e-5)
    assert rep.passed

import math

import numpy as np
import pytest

from onglab.errors import StructuralError
from onglab.model import (
    Batch,
    ModelParams,
    forward,
    grad_to_layer_matrices,
    init_kaiming,
    layer_matrices_to_grad,
    logit_gradient,
    logit_gradients,
    loss_and_backward,
    parameter_count,
    sample_labels,
    softmax,
)


def numeric_grad(f, w, eps=1e-6):
    g = np.empty_like(w)
    for i in range(w.size):
        old = w[i]
        w[i] = old + eps
        up = f()
        w[i] = old - eps
        down = f()
        w[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def test_parameter_count():
    assert parameter_count((784, 100, 100, 10)) == 89_610
    assert init_kaiming((784, 100, 100, 10), seed=0).flat.size == 89_610
    assert parameter_count((6, 4, 3)) == 6 * 4 + 4 + 4 * 3 + 3


def test_init_deterministic_and_distinct():
    a, b, c = (init_kaiming((6, 4, 3), seed=s) for s in (5, 5, 6))
    np.testing.assert_array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, c.flat)
    for bias in a.biases:
        np.testing.assert_array_equal(bias, 0.0)


def test_init_variance():
    w = init_kaiming((2, 100_000), seed=3).weights[0]
    # He-normal: variance 2 / fan_in = 1
    assert abs(w.var() - 1.0) < 0.02


def test_init_rejects_empty_dims():
    with pytest.raises(StructuralError):
        init_kaiming([], seed=0)
    with pytest.raises(StructuralError):
        init_kaiming((4,), seed=0)


def test_weights_are_views():
    p = init_kaiming((3, 2), seed=0)
    p.weights[0][1, 2] = 7.0
    assert p.flat[1 * 3 + 2] == 7.0
    p.biases[0][1] = -1.0
    assert p.flat[-1] == -1.0


def test_zero_weights_give_uniform_probs():
    p = ModelParams((784, 100, 100, 10), np.zeros(89_610))
    probs = forward(p, np.random.default_rng(0).random((4, 784))).probs
    np.testing.assert_allclose(probs, 0.1, atol=1e-15)


def test_softmax_stable():
    p = softmax(np.array([[1000.0, 1000.0, 999.0]]))
    e = math.e
    np.testing.assert_allclose(p[0], [e / (2 * e + 1), e / (2 * e + 1), 1 / (2 * e + 1)], rtol=1e-14)


def test_probability_rows_sum_to_one(small_net, rng):
    probs = forward(small_net, rng.normal(size=(50, 6)) * 30).probs
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs >= 0)


def test_uniform_loss_is_log_classes():
    p = ModelParams((5, 10), np.zeros(parameter_count((5, 10))))
    loss, _, _ = loss_and_backward(p, Batch(np.ones((3, 5)), [0, 4, 9]))
    assert abs(loss - math.log(10)) < 1e-14


def test_input_width_mismatch(small_net):
    with pytest.raises(StructuralError):
        forward(small_net, np.ones((2, 5)))


def test_empty_batch_rejected():
    with pytest.raises(StructuralError):
        Batch(np.empty((0, 6)), np.empty(0))


def test_finite_difference_gradient(small_net, small_batch):
    _, grad, _ = loss_and_backward(small_net, small_batch)
    num = numeric_grad(lambda: loss_and_backward(small_net, small_batch)[0], small_net.flat)
    assert np.all(np.abs(grad - num) <= np.maximum(1e-6, 1e-4 * np.abs(num)))


def test_duplicated_batch_has_same_gradient(small_net, small_batch):
    _, g1, _ = loss_and_backward(small_net, small_batch)
    doubled = Batch(np.vstack([small_batch.x] * 2), np.concatenate([small_batch.y] * 2))
    _, g2, _ = loss_and_backward(small_net, doubled)
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_stats_reassemble_gradient(small_net, small_batch):
    _, grad, stats = loss_and_backward(small_net, small_batch)
    n = len(small_batch)
    blocks = [s.delta.T @ s.a / n for s in stats]
    np.testing.assert_allclose(layer_matrices_to_grad(blocks), grad, atol=1e-14)
    for s in stats:
        np.testing.assert_array_equal(s.a[:, -1], 1.0)


def test_layer_matrix_round_trip(small_net, rng):
    g = rng.normal(size=small_net.flat.size)
    blocks = grad_to_layer_matrices(small_net.dims, g)
    assert [b.shape for b in blocks] == [(4, 7), (3, 5)]
    np.testing.assert_array_equal(layer_matrices_to_grad(blocks), g)


def test_logit_gradient_linear_model():
    # for z = W x + b, d z_c / d W = e_c x^T and d z_c / d b = e_c
    p = init_kaiming((3, 2), seed=1)
    x = np.array([1.0, -2.0, 0.5])
    g = logit_gradient(p, x, 1)
    np.testing.assert_array_equal(g, [0, 0, 0, 1.0, -2.0, 0.5, 0, 1])


def test_logit_gradient_finite_difference(small_net, rng):
    x = rng.normal(size=6)
    for c in range(3):
        g = logit_gradient(small_net, x, c)
        num = numeric_grad(lambda: forward(small_net, x).logits[0, c], small_net.flat)
        np.testing.assert_allclose(g, num, atol=1e-7)


def test_log_partition_gradient(small_net, rng):
    # grad log sum exp z = sum_c p_c grad z_c
    x = rng.normal(size=6)
    probs = forward(small_net, x).probs[0]
    combo = sum(probs[c] * logit_gradient(small_net, x, c) for c in range(3))

    def logz():
        z = forward(small_net, x).logits[0]
        return np.log(np.exp(z - z.max()).sum()) + z.max()

    np.testing.assert_allclose(combo, numeric_grad(logz, small_net.flat), atol=1e-7)


def test_logit_gradients_batched(small_net, rng):
    x = rng.normal(size=(5, 6))
    cls = np.array([0, 2, 1, 1, 0])
    rows = logit_gradients(small_net, x, cls)
    for i in range(5):
        np.testing.assert_allclose(rows[i], logit_gradient(small_net, x[i], cls[i]), atol=1e-15)


def test_logit_gradient_bad_class(small_net):
    with pytest.raises(StructuralError):
        logit_gradient(small_net, np.zeros(6), 3)


def test_sample_labels_one_hot():
    probs = np.eye(4)[[2, 0, 3, 3, 1]]
    np.testing.assert_array_equal(sample_labels(probs, seed=0), [2, 0, 3, 3, 1])


def test_sample_labels_frequencies():
    n = 200_000
    labels = sample_labels(np.full((n, 4), 0.25), seed=11)
    freq = np.bincount(labels, minlength=4) / n
    # 5 sigma for a binomial proportion at p = 0.25
    assert np.all(np.abs(freq - 0.25) < 5 * math.sqrt(0.25 * 0.75 / n))


def test_sample_labels_deterministic(rng):
    probs = softmax(rng.normal(size=(100, 5)))
    np.testing.assert_array_equal(sample_labels(probs, 3), sample_labels(probs, 3))

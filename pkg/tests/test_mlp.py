"""Coordinate-network building blocks: encodings, MLP gradients, Adam."""

from __future__ import annotations

import numpy as np

from bodyatlas.mlp import (
    Adam,
    Mlp,
    encoded_dim,
    positional_encoding,
    positional_encoding_backward,
)


def test_positional_encoding_layout():
    x = np.array([[0.3, -0.7]], dtype=np.float32)
    enc = positional_encoding(x, freqs=4)
    assert enc.shape == (1, encoded_dim(2, 4))
    # leading block is the raw input
    np.testing.assert_allclose(enc[0, :2], x[0], rtol=1e-6)
    # first frequency band is sin/cos of pi * x
    np.testing.assert_allclose(
        enc[0, 2:4], np.sin(np.pi * x[0]).astype(np.float32), rtol=1e-5
    )
    np.testing.assert_allclose(
        enc[0, 4:6], np.cos(np.pi * x[0]).astype(np.float32), rtol=1e-5
    )


def test_positional_encoding_backward_matches_fd():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 3)).astype(np.float64)
    d_out = rng.standard_normal((5, encoded_dim(3, 5)))
    grad = positional_encoding_backward(x, 5, d_out)

    h = 1e-6
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp = x.copy()
            xm = x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = np.sum(
                (positional_encoding(xp, 5) - positional_encoding(xm, 5)) * d_out
            ) / (2 * h)
            assert abs(grad[i, j] - fd) < 1e-5


def test_mlp_backward_matches_fd():
    rng = np.random.default_rng(1)
    net = Mlp([4, 8, 8, 2], rng, dtype=np.float64)
    x = rng.standard_normal((6, 4))
    d_out = rng.standard_normal((6, 2))

    out, cache = net.forward(x, want_cache=True)
    d_in, grads = net.backward(cache, d_out)

    h = 1e-6
    # input gradient
    for i in range(2):
        for j in range(4):
            xp = x.copy()
            xm = x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = np.sum((net.forward(xp) - net.forward(xm)) * d_out) / (2 * h)
            assert abs(d_in[i, j] - fd) < 1e-6

    # a few parameter gradients (first weight matrix)
    w0 = net.params[0]
    for idx in [(0, 0), (1, 3), (3, 7)]:
        orig = w0[idx]
        w0[idx] = orig + h
        fp = np.sum(net.forward(x) * d_out)
        w0[idx] = orig - h
        fm = np.sum(net.forward(x) * d_out)
        w0[idx] = orig
        assert abs(grads[0][idx] - (fp - fm) / (2 * h)) < 1e-5


def test_mlp_output_is_sigmoid_bounded():
    net = Mlp([3, 16, 2], np.random.default_rng(2))
    out = net.forward(np.random.default_rng(3).standard_normal((50, 3)).astype(np.float32))
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_mlp_state_roundtrip_bit_exact():
    rng = np.random.default_rng(4)
    net = Mlp([2, 8, 8, 3], rng)
    x = rng.standard_normal((7, 2)).astype(np.float32)
    before = net.forward(x)

    other = Mlp([2, 8, 8, 3], np.random.default_rng(99))
    other.load_state(net.state())
    after = other.forward(x)
    np.testing.assert_array_equal(before, after)


def test_adam_single_step_matches_reference():
    # one Adam step on a scalar with g=3: bias-corrected update is exactly -lr*sign
    net = Mlp([1, 1], np.random.default_rng(5), dtype=np.float64)
    w = net.params[0]
    w[...] = 1.0
    opt = Adam(net.params, lr=0.1)
    grads = [np.full_like(p, 3.0) for p in net.params]
    opt.step(grads)
    # m_hat = g, v_hat = g^2  ->  step = lr * g / (|g| + eps) ~ lr
    assert abs(w[0, 0] - (1.0 - 0.1)) < 1e-6


def test_adam_lr_is_mutable():
    net = Mlp([1, 1], np.random.default_rng(6), dtype=np.float64)
    for p in net.params:
        p[...] = 0.0
    opt = Adam(net.params, lr=1e-2)
    g = [np.ones_like(p) for p in net.params]
    opt.step(g)
    first = abs(float(net.params[0][0, 0]))
    opt.lr = 1e-3
    before = float(net.params[0][0, 0])
    opt.step(g)
    second = abs(float(net.params[0][0, 0]) - before)
    assert first > second * 5

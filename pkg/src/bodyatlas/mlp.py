"""Small fully-connected networks with hand-written forward/backward passes.

Backing machinery for the atlas coordinate networks. Kept dependency-free
(plain numpy, float32) so training trajectories are bit-reproducible from a
seed on a single thread.
"""

from __future__ import annotations

import numpy as np


def positional_encoding(x: np.ndarray, freqs: int) -> np.ndarray:
    """Map coordinates to [x, sin(2^k pi x), cos(2^k pi x)] for k < freqs.

    x: (N, D) array, roughly in [-1, 1]. Output: (N, D * (2 * freqs + 1)).
    """
    parts = [x]
    for k in range(freqs):
        f = (2.0**k) * np.pi
        parts.append(np.sin(f * x))
        parts.append(np.cos(f * x))
    return np.concatenate(parts, axis=1)


def positional_encoding_backward(x: np.ndarray, freqs: int, d_enc: np.ndarray) -> np.ndarray:
    """Pull a gradient on the encoding back to a gradient on the coordinates."""
    d = x.shape[1]
    d_x = d_enc[:, :d].copy()
    col = d
    for k in range(freqs):
        f = (2.0**k) * np.pi
        d_x += d_enc[:, col : col + d] * (f * np.cos(f * x))
        col += d
        d_x -= d_enc[:, col : col + d] * (f * np.sin(f * x))
        col += d
    return d_x


def encoded_dim(in_dim: int, freqs: int) -> int:
    return in_dim * (2 * freqs + 1)


class Mlp:
    """ReLU hidden layers, sigmoid output, He-initialized from a seeded rng."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float32):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.dtype = np.dtype(dtype)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Evaluate the net. With want_cache, also return activations for backward."""
        a = np.asarray(x, dtype=self.dtype)
        cache = [a] if want_cache else None
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if i < last:
                np.maximum(a, 0.0, out=a)
            else:
                # sigmoid squashing keeps outputs strictly inside (0, 1)
                a = 1.0 / (1.0 + np.exp(-a))
            if want_cache:
                cache.append(a)
        if want_cache:
            return a, cache
        return a

    def backward(self, cache: list[np.ndarray], d_out: np.ndarray):
        """Backprop d_out through a cached forward pass.

        Returns (d_input, grads) with grads ordered like `params`.
        """
        n = len(self.weights)
        d_ws = [None] * n
        d_bs = [None] * n
        y = cache[-1]
        delta = d_out.astype(self.dtype) * (y * (1.0 - y))
        for i in range(n - 1, -1, -1):
            a_prev = cache[i]
            d_ws[i] = a_prev.T @ delta
            d_bs[i] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.weights[i].T
                delta *= cache[i] > 0
            else:
                delta = delta @ self.weights[i].T
        grads: list[np.ndarray] = []
        for dw, db in zip(d_ws, d_bs):
            grads.append(dw)
            grads.append(db)
        return delta, grads

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(state[f"w{i}"], dtype=self.dtype)
            self.biases[i] = np.asarray(state[f"b{i}"], dtype=self.dtype)


class Adam:
    """Adam over a flat list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

"""Latent codec, DDPM noise schedule, and pluggable noise predictors.

Latents are (channels, h, w) float64 arrays.  The codec is a deliberately
simple, analytically differentiable stand-in for a learned autoencoder:
channelwise average pooling by a factor ``f`` with the affine map
``x -> 2x - 1`` on encode, and the inverse affine plus bilinear upsampling on
decode.  Noise predictors implement a single ``predict(z_t, t, prompt)``
method; the built-in oracle inverts the one-step denoiser exactly, which is
what makes the optimizer testable end to end.

Time steps are 1-indexed integers in [1, T].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-product schedule with alpha(t)^2 + sigma(t)^2 == 1."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) == 0:
            raise ValueError("alphaBar must be a nonempty vector")
        if not ((ab > 0.0) & (ab < 1.0)).all():
            raise ValueError("alphaBar values must lie in (0, 1)")
        if not (np.diff(ab) < 0.0).all():
            raise ValueError("alphaBar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def steps(self) -> int:
        return len(self.alpha_bar)

    def _check_t(self, t: int) -> int:
        ti = int(t)
        if ti != t or not 1 <= ti <= self.steps:
            raise ValueError(f"t must be an integer in [1, {self.steps}], got {t!r}")
        return ti

    def alpha(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[self._check_t(t) - 1]))

    def sigma(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[self._check_t(t) - 1]))


def linear_beta_schedule(
    steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> NoiseSchedule:
    """The standard linear-beta DDPM schedule (default T=1000)."""
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return NoiseSchedule(alpha_bar=np.cumprod(1.0 - betas))


# ---------------------------------------------------------------------------
# latent codec
# ---------------------------------------------------------------------------


def encode(image: np.ndarray, f: int = 8) -> np.ndarray:
    """Image (h, w, c) in [0, 1] -> latent (c, h/f, w/f), roughly centered."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if h % f or w % f:
        raise ValueError(f"image dims {(h, w)} not divisible by f={f}")
    pooled = img.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))
    return np.moveaxis(2.0 * pooled - 1.0, -1, 0)


def encode_adjoint(dL_dz: np.ndarray, f: int = 8) -> np.ndarray:
    """Adjoint of :func:`encode`: broadcast each latent cell over its f x f
    block, scaled by 2 / f^2 (affine gain times the pooling average)."""
    g = np.moveaxis(np.asarray(dL_dz, dtype=np.float64), 0, -1)
    gh, gw, c = g.shape
    up = np.repeat(np.repeat(g, f, axis=0), f, axis=1)
    return up * (2.0 / (f * f))


def decode(z: np.ndarray, f: int = 8) -> np.ndarray:
    """Latent (c, h, w) -> image (h*f, w*f, c) in [0, 1], bilinear upsample."""
    lat = np.moveaxis(np.asarray(z, dtype=np.float64), 0, -1)
    vals = (lat + 1.0) * 0.5
    lh, lw, _ = vals.shape
    oh, ow = lh * f, lw * f
    # half-pixel-center sampling grid with clamped borders
    ys = (np.arange(oh) + 0.5) / f - 0.5
    xs = (np.arange(ow) + 0.5) / f - 0.5
    y0 = np.clip(np.floor(ys), 0, max(lh - 2, 0)).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, max(lw - 2, 0)).astype(np.int64)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    y1 = np.minimum(y0 + 1, lh - 1)
    x1 = np.minimum(x0 + 1, lw - 1)
    out = (
        vals[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + vals[np.ix_(y0, x1)] * (1 - fy) * fx
        + vals[np.ix_(y1, x0)] * fy * (1 - fx)
        + vals[np.ix_(y1, x1)] * fy * fx
    )
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# forward process and one-step inversion
# ---------------------------------------------------------------------------


def add_noise(z: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """z_t = alpha(t) * z + sigma(t) * eps."""
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z.shape:
        raise ValueError(f"eps shape {eps.shape} != z shape {z.shape}")
    return schedule.alpha(t) * z + schedule.sigma(t) * eps


class NoisePredictor(Protocol):
    """Anything with ``predict(z_t, t, prompt) -> eps_hat`` (same shape)."""

    def predict(self, z_t: np.ndarray, t: int, prompt: str) -> np.ndarray: ...


def one_step_x0(
    z_t: np.ndarray,
    t: int,
    predictor: NoisePredictor,
    prompt: str,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Single-step denoised estimate: z_0 = (z_t - sigma(t) * eps_hat) / alpha(t)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(predictor.predict(z_t, t, prompt), dtype=np.float64)
    if eps_hat.shape != z_t.shape:
        raise ValueError(
            f"predictor returned shape {eps_hat.shape}, expected {z_t.shape}"
        )
    return (z_t - schedule.sigma(t) * eps_hat) / schedule.alpha(t)


# ---------------------------------------------------------------------------
# built-in predictors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OraclePredictor:
    """The unique predictor for which one_step_x0 returns ``target``:
    eps_hat = (z_t - alpha(t) * target) / sigma(t).  Ignores the prompt."""

    target: np.ndarray
    schedule: NoiseSchedule

    def predict(self, z_t: np.ndarray, t: int, prompt: str) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != self.target.shape:
            raise ValueError(
                f"z_t shape {z_t.shape} != oracle target shape {self.target.shape}"
            )
        return (z_t - self.schedule.alpha(t) * self.target) / self.schedule.sigma(t)


def oracle_predictor(target: np.ndarray, schedule: NoiseSchedule) -> OraclePredictor:
    return OraclePredictor(np.asarray(target, dtype=np.float64).copy(), schedule)


@dataclass(frozen=True)
class ConstantTargetPredictor:
    """Oracle whose target is a constant-color image's latent (value
    2c - 1 per channel), built lazily to match z_t's shape — handy where the
    working resolution changes during optimization."""

    color: tuple[float, float, float]
    schedule: NoiseSchedule

    def predict(self, z_t: np.ndarray, t: int, prompt: str) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        target = np.empty_like(z_t)
        for c in range(z_t.shape[0]):
            target[c] = 2.0 * self.color[c % len(self.color)] - 1.0
        return (z_t - self.schedule.alpha(t) * target) / self.schedule.sigma(t)


@dataclass(frozen=True)
class ZeroPredictor:
    """Predicts zero noise everywhere (z_0 = z_t / alpha(t))."""

    def predict(self, z_t: np.ndarray, t: int, prompt: str) -> np.ndarray:
        return np.zeros_like(np.asarray(z_t, dtype=np.float64))

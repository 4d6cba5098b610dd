"""Lighting-aware harmonization of a rendered foreground into a background.

The model is deliberately small: images factor into albedo times scalar
shading; the scene light is one directional source plus constant ambient
(s = a + i * max(0, n.l)); albedo adjustment is an exposure / white-balance /
gamma triple fitted by log-domain moment matching.  Each stage the source
method delegates to a pretrained network is a seam here — decomposition
accepts supplied ground-truth maps, shading refinement accepts a hook or an
HTTP endpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .imgio import depth16_png_bytes, encode_normal_image, image_png_bytes
from .remote import post_shading_refine

log = logging.getLogger(__name__)

_EPS = 1e-4  # shading floor for the albedo division

# Rec. 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class ShadingDecomposition:
    """albedo (h, w, 3) in [0, 1]; shading (h, w) nonnegative."""

    albedo: np.ndarray
    shading: np.ndarray

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.shading = np.asarray(self.shading, dtype=np.float64)
        if self.albedo.ndim != 3 or self.albedo.shape[-1] != 3:
            raise ValueError(f"albedo must be (h, w, 3), got {self.albedo.shape}")
        if self.shading.shape != self.albedo.shape[:2]:
            raise ValueError(
                f"shading {self.shading.shape} does not match albedo "
                f"{self.albedo.shape[:2]}"
            )
        if (self.shading < 0).any():
            raise ValueError("shading must be nonnegative")

    def reconstruct(self) -> np.ndarray:
        return np.clip(self.albedo * self.shading[..., None], 0.0, 1.0)


@dataclass
class LightModel:
    """One directional source plus constant ambient."""

    direction: np.ndarray
    intensity: float
    ambient: float

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"light direction must be unit length, |d| = {norm}")
        if self.intensity < 0 or self.ambient < 0:
            raise ValueError("intensity and ambient must be nonnegative")


@dataclass
class HarmonizeParams:
    """Pointwise albedo adjustment out = exposure * wb_c * in^gamma."""

    exposure: float = 1.0
    white_balance: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gamma: float = 1.0

    def __post_init__(self):
        wb = tuple(float(v) for v in self.white_balance)
        if self.exposure <= 0 or self.gamma <= 0 or any(v <= 0 for v in wb):
            raise ValueError("all harmonization gains must be > 0")
        self.white_balance = wb

    def apply(self, albedo: np.ndarray) -> np.ndarray:
        albedo = np.asarray(albedo, dtype=np.float64)
        out = self.exposure * np.asarray(self.white_balance) * np.power(
            np.maximum(albedo, 0.0), self.gamma
        )
        return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------


def decompose(
    image: np.ndarray,
    mode: str = "retinex",
    *,
    albedo: np.ndarray | None = None,
    shading: np.ndarray | None = None,
) -> ShadingDecomposition:
    """Split an image into albedo and scalar shading.

    ``groundTruth`` passes through supplied maps (synthetic scenes know
    them); ``retinex`` takes smoothed luminance as shading and divides it
    out, which is crude but self-consistent: albedo * shading ~= image.
    """
    image = np.asarray(image, dtype=np.float64)
    if mode == "groundTruth":
        if albedo is None or shading is None:
            raise ValueError("groundTruth mode needs albedo= and shading= maps")
        return ShadingDecomposition(albedo=albedo, shading=shading)
    if mode != "retinex":
        raise ValueError(f"mode must be groundTruth|retinex, got {mode!r}")
    h, w = image.shape[:2]
    sigma = 0.05 * float(np.hypot(h, w))
    luma = image @ _LUMA
    shading_est = np.maximum(gaussian_filter(luma, sigma=sigma), 0.0)
    floored = shading_est < _EPS
    if floored.mean() > 0.01:
        log.warning(
            "retinex shading floor hit on %.1f%% of pixels", 100.0 * floored.mean()
        )
    albedo_est = np.clip(image / np.maximum(shading_est, _EPS)[..., None], 0.0, 1.0)
    return ShadingDecomposition(albedo=albedo_est, shading=shading_est)


# ---------------------------------------------------------------------------
# light estimation
# ---------------------------------------------------------------------------


def _light_objective(
    normals: np.ndarray, shading: np.ndarray, d: np.ndarray, a: float, i: float
) -> float:
    pred = a + i * np.maximum(normals @ d, 0.0)
    return float(np.mean((shading - pred) ** 2))


def estimate_light(
    normals: np.ndarray,
    shading: np.ndarray,
    mask: np.ndarray | None = None,
    *,
    allow_degenerate: bool = False,
    max_alternations: int = 50,
    tol: float = 1e-8,
) -> LightModel:
    """Fit s ~= ambient + intensity * max(0, n.l) by alternating solves.

    Fixing the direction makes (ambient, intensity) a linear least-squares
    problem; fixing them, the direction moves by projected gradient with
    renormalization.  Collinear normals cannot pin down a direction and are
    rejected unless ``allow_degenerate`` (then only a+i is meaningful).
    """
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    shading = np.asarray(shading, dtype=np.float64).ravel()
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).ravel()
        normals, shading = normals[keep], shading[keep]
    if len(normals) < 4:
        raise ValueError(f"need >= 4 pixels to fit a light, got {len(normals)}")

    # degeneracy: all normals within a 1-D family leave the direction free
    spread = np.linalg.svd(normals - normals.mean(axis=0), compute_uv=False)
    if spread[1] < 1e-9 * max(spread[0], 1.0):
        if not allow_degenerate:
            raise ValueError(
                "normals are collinear (or constant); the light direction is "
                "unidentifiable — pass allow_degenerate=True to fit a+i only"
            )

    # init: unconstrained linear fit s ~= a + n.(i*l), ignoring the clamp
    design = np.concatenate([np.ones((len(normals), 1)), normals], axis=1)
    coef, *_ = np.linalg.lstsq(design, shading, rcond=None)
    il = coef[1:]
    norm_il = np.linalg.norm(il)
    if norm_il < 1e-12:
        d = np.array([0.0, 0.0, 1.0])
    else:
        d = il / norm_il

    a = float(coef[0])
    i = float(norm_il)
    prev = np.array([*d, a, i])
    for _ in range(max_alternations):
        # (a, i) linear solve at fixed direction
        lam = np.maximum(normals @ d, 0.0)
        design2 = np.stack([np.ones_like(lam), lam], axis=1)
        (a, i), *_ = np.linalg.lstsq(design2, shading, rcond=None)
        if i < 0.0:  # a pure-ambient fit explains it better
            a, i = float(np.mean(shading)), 0.0

        # projected gradient on the direction at fixed (a, i)
        if i > 0.0:
            for _ in range(5):
                ndot = normals @ d
                active = ndot > 0.0
                if not active.any():
                    break
                resid = shading[active] - a - i * ndot[active]
                grad = -2.0 * i * (resid[:, None] * normals[active]).sum(axis=0)
                step = 1.0 / (2.0 * i * i * active.sum() + 1e-12)
                d = d - step * grad
                norm_d = np.linalg.norm(d)
                if norm_d < 1e-12:
                    d = np.array([0.0, 0.0, 1.0])
                    break
                d = d / norm_d

        cur = np.array([*d, a, i])
        if np.max(np.abs(cur - prev)) < tol:
            break
        prev = cur

    return LightModel(direction=d, intensity=max(float(i), 0.0), ambient=max(float(a), 0.0))


def shade_foreground(fg_normals: np.ndarray, light: LightModel) -> np.ndarray:
    """s = ambient + intensity * max(0, n.direction), pixelwise."""
    normals = np.asarray(fg_normals, dtype=np.float64)
    lam = np.maximum(normals @ light.direction, 0.0)
    return light.ambient + light.intensity * lam


# ---------------------------------------------------------------------------
# albedo harmonization
# ---------------------------------------------------------------------------


@dataclass
class AlbedoStats:
    """Per-channel mean/std of log-albedo over the pixels of interest."""

    mean_log: np.ndarray
    std_log: np.ndarray


def albedo_stats(albedo: np.ndarray, mask: np.ndarray | None = None) -> AlbedoStats:
    albedo = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        albedo = albedo[np.asarray(mask, dtype=bool).ravel()]
    if len(albedo) == 0:
        raise ValueError("no pixels selected for albedo statistics")
    la = np.log(np.maximum(albedo, _EPS))
    return AlbedoStats(mean_log=la.mean(axis=0), std_log=la.std(axis=0))


def harmonize_albedo(
    fg_albedo: np.ndarray,
    bg: AlbedoStats | np.ndarray,
    params: HarmonizeParams | None = None,
    *,
    fg_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, HarmonizeParams]:
    """Match the foreground's albedo statistics to the background's.

    In log space the adjustment log out = gamma * log in + log(e * w_c) is
    affine, so moment matching is exact: gamma from the std ratio (pooled to
    a scalar), the per-channel offset split into a scalar exposure (its
    geometric mean) and white balance (the remainder).
    """
    fg_albedo = np.asarray(fg_albedo, dtype=np.float64)
    if params is None:
        fg_stats = albedo_stats(fg_albedo, fg_mask)
        bg_stats = bg if isinstance(bg, AlbedoStats) else albedo_stats(bg)
        ratios = []
        for c in range(3):
            if fg_stats.std_log[c] > 1e-8 and bg_stats.std_log[c] > 1e-8:
                ratios.append(bg_stats.std_log[c] / fg_stats.std_log[c])
        gamma = float(np.mean(ratios)) if ratios else 1.0
        offset = bg_stats.mean_log - gamma * fg_stats.mean_log
        log_e = float(np.mean(offset))
        wb = np.exp(offset - log_e)
        params = HarmonizeParams(
            exposure=float(np.exp(log_e)), white_balance=tuple(wb), gamma=gamma
        )
    return params.apply(fg_albedo), params


# ---------------------------------------------------------------------------
# shading refinement
# ---------------------------------------------------------------------------


def _joint_bilateral(
    shading: np.ndarray,
    guide: np.ndarray,
    mask: np.ndarray,
    sigma_spatial: float = 3.0,
    sigma_range: float = 0.1,
) -> np.ndarray:
    """Edge-aware smoothing of shading, guided by the composite's colors,
    confined to the mask.  Plain shifted-window accumulation."""
    h, w = shading.shape
    radius = int(np.ceil(2.0 * sigma_spatial))
    inside = np.asarray(mask, dtype=bool)
    acc = np.zeros((h, w))
    wsum = np.zeros((h, w))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            s_w = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma_spatial**2))
            ys = slice(max(0, dy), min(h, h + dy))
            yd = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, dx), min(w, w + dx))
            xd = slice(max(0, -dx), min(w, w - dx))
            diff = guide[yd, xd] - guide[ys, xs]
            r_w = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * sigma_range**2))
            weight = s_w * r_w * inside[ys, xs]
            acc[yd, xd] += weight * shading[ys, xs]
            wsum[yd, xd] += weight
    out = shading.copy()
    ok = inside & (wsum > 0)
    out[ok] = acc[ok] / wsum[ok]
    return out


def refine_shading(
    hook: str,
    composite: np.ndarray,
    init_shading: np.ndarray,
    fg_mask: np.ndarray,
    normals: np.ndarray,
    depth: np.ndarray,
    *,
    timeout: float = 30.0,
    retries: int = 3,
) -> np.ndarray:
    """Optionally polish the initial foreground shading.

    ``passthrough`` returns it untouched, ``bilateralSmooth`` runs a joint
    bilateral filter guided by the composite inside the mask, and an
    http(s) endpoint receives all five inputs and returns the refinement.
    """
    init_shading = np.asarray(init_shading, dtype=np.float64)
    if hook == "passthrough":
        return init_shading
    if hook == "bilateralSmooth":
        return _joint_bilateral(
            init_shading, np.asarray(composite, dtype=np.float64), fg_mask
        )
    if hook.startswith(("http://", "https://")):
        depth_png = depth16_png_bytes(np.asarray(depth, dtype=np.float64))
        return post_shading_refine(
            hook,
            image_png_bytes(composite),
            init_shading,
            image_png_bytes(np.asarray(fg_mask, dtype=np.float64)),
            image_png_bytes(encode_normal_image(normals, np.asarray(fg_mask, bool))),
            depth_png,
            timeout=timeout,
            retries=retries,
        )
    raise ValueError(
        f"hook must be passthrough|bilateralSmooth|http(s) endpoint, got {hook!r}"
    )


# ---------------------------------------------------------------------------
# compositing and temporal smoothing
# ---------------------------------------------------------------------------


def compose(
    fg_albedo: np.ndarray,
    fg_shading: np.ndarray,
    bg_frame: np.ndarray,
    fg_mask: np.ndarray,
) -> np.ndarray:
    """out = mask ? clamp(albedo * shading) : background."""
    fg_albedo = np.asarray(fg_albedo, dtype=np.float64)
    fg_shading = np.asarray(fg_shading, dtype=np.float64)
    bg_frame = np.asarray(bg_frame, dtype=np.float64)
    mask = np.asarray(fg_mask, dtype=bool)
    if fg_albedo.shape != bg_frame.shape or fg_shading.shape != bg_frame.shape[:2]:
        raise ValueError(
            f"dims disagree: albedo {fg_albedo.shape}, shading {fg_shading.shape}, "
            f"background {bg_frame.shape}"
        )
    fg = np.clip(fg_albedo * fg_shading[..., None], 0.0, 1.0)
    return np.where(mask[..., None], fg, bg_frame)


def temporal_ema(sequence: list, lambda_ema: float) -> list:
    """y_0 = x_0; y_i = lambda * y_{i-1} + (1 - lambda) * x_i.

    Works on scalars/arrays, HarmonizeParams, and LightModel (whose smoothed
    direction is renormalized).
    """
    if not 0.0 <= lambda_ema <= 1.0:
        raise ValueError(f"lambdaEma must lie in [0, 1], got {lambda_ema}")
    if not sequence:
        return []
    first = sequence[0]
    if isinstance(first, HarmonizeParams):
        vecs = [
            np.array([p.exposure, *p.white_balance, p.gamma]) for p in sequence
        ]
        smooth = temporal_ema(vecs, lambda_ema)
        return [
            HarmonizeParams(
                exposure=float(v[0]),
                white_balance=(float(v[1]), float(v[2]), float(v[3])),
                gamma=float(v[4]),
            )
            for v in smooth
        ]
    if isinstance(first, LightModel):
        dirs = temporal_ema([m.direction for m in sequence], lambda_ema)
        scal = temporal_ema(
            [np.array([m.intensity, m.ambient]) for m in sequence], lambda_ema
        )
        out = []
        for d, s in zip(dirs, scal):
            norm = np.linalg.norm(d)
            d = d / norm if norm > 1e-12 else np.array([0.0, 0.0, 1.0])
            out.append(LightModel(direction=d, intensity=float(s[0]), ambient=float(s[1])))
        return out
    smoothed = [np.asarray(first, dtype=np.float64)]
    for x in sequence[1:]:
        smoothed.append(
            lambda_ema * smoothed[-1] + (1.0 - lambda_ema) * np.asarray(x, dtype=np.float64)
        )
    if np.isscalar(first) or np.ndim(first) == 0:
        return [float(v) for v in smoothed]
    return smoothed

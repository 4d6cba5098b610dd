"""Shared synthetic fixtures: clips, templates, sampling helpers."""

from __future__ import annotations

import os

import numpy as np
import pytest

from bodyatlas import body, imgio
from bodyatlas.atlas import VideoClip


def smoothstep(e0: float, e1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def checkerboard_frames(h=64, w=64, n=16, cell=8.0, vel=(0.35, 0.7), aa=1.0):
    """Translating anti-aliased checkerboard; vel = (dx, dy) px/frame."""
    ys, xs = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    ca = np.array([0.15, 0.3, 0.75])
    cb = np.array([0.9, 0.75, 0.25])
    frames = []
    for i in range(n):
        wy = ys - vel[1] * i
        wx = xs - vel[0] * i
        fy = wy / cell - np.floor(wy / cell)
        fx = wx / cell - np.floor(wx / cell)
        py = np.floor(wy / cell).astype(int) % 2
        px = np.floor(wx / cell).astype(int) % 2
        parity = (px + py) % 2
        edge = np.minimum(np.minimum(fy, 1 - fy), np.minimum(fx, 1 - fx)) * cell
        blend = smoothstep(0.0, aa, edge)
        val = parity * blend + 0.5 * (1 - blend)
        frames.append(val[..., None] * cb + (1 - val[..., None]) * ca)
    return np.stack(frames)


def checkerboard_clip(h=64, w=64, n=16, cell=8.0, vel=(0.35, 0.7)) -> VideoClip:
    frames = checkerboard_frames(h, w, n, cell, vel)
    flow = np.tile(np.asarray(vel, dtype=np.float64), (n - 1, 1))
    return VideoClip(frames=frames, ground_truth_flow=flow)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse <= 0:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


def bilinear(img: np.ndarray, u, v) -> np.ndarray:
    """Sample img (H,W,C) at normalized (u, v) with half-texel centers."""
    hh, ww = img.shape[:2]
    x = np.asarray(u) * ww - 0.5
    y = np.asarray(v) * hh - 0.5
    x0 = np.clip(np.floor(x).astype(int), 0, ww - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, hh - 2)
    fx = np.clip(x - x0, 0.0, 1.0)[..., None]
    fy = np.clip(y - y0, 0.0, 1.0)[..., None]
    c00 = img[y0, x0]
    c01 = img[y0, x0 + 1]
    c10 = img[y0 + 1, x0]
    c11 = img[y0 + 1, x0 + 1]
    return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


def sphere_normals(size: int = 48):
    """Front-facing hemisphere normal map + coverage mask."""
    ys, xs = np.meshgrid(
        np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij"
    )
    r2 = xs**2 + ys**2
    mask = r2 < 0.92
    nz = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    normals = np.zeros((size, size, 3))
    normals[..., 0] = xs
    normals[..., 1] = -ys
    normals[..., 2] = nz
    normals[~mask] = 0.0
    return normals, mask


def write_frame_dir(path, frames) -> str:
    os.makedirs(path, exist_ok=True)
    imgio.save_frames(path, frames)
    return str(path)


def write_mask_dir(path, masks) -> str:
    os.makedirs(path, exist_ok=True)
    for i, m in enumerate(masks):
        imgio.save_mask(os.path.join(path, imgio.frame_name(i)), m)
    return str(path)


@pytest.fixture(scope="session")
def biped_small() -> body.BodyTemplate:
    # coarse instance: cheap to pose/render, same code paths as the default
    return body.make_biped_template(rings=4, segments=6, seed=3)


@pytest.fixture(scope="session")
def biped_default() -> body.BodyTemplate:
    return body.make_biped_template()

"""Image and frame-directory I/O.

All in-memory images are float arrays in [0, 1] (h, w, 3) or (h, w).  Files on
disk are 8-bit PNGs unless stated otherwise; depth maps use a 16-bit
inverse-depth encoding and normal maps the usual (n + 1) / 2 encoding.
"""

from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image

_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as an 8-bit PNG (grayscale or RGB)."""
    arr = np.asarray(image, dtype=np.float64)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(os.fspath(path))


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG into a float RGB image in [0, 1]."""
    with Image.open(os.fspath(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def image_png_bytes(image: np.ndarray) -> bytes:
    """Encode a float image in [0, 1] as PNG bytes (no file involved)."""
    from io import BytesIO

    arr = np.asarray(image, dtype=np.float64)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    buf = BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes) -> np.ndarray:
    from io import BytesIO

    with Image.open(BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG as a boolean mask (true where the stored value > 127)."""
    with Image.open(os.fspath(path)) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def save_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(
        os.fspath(path)
    )


def frame_name(index: int) -> str:
    return f"frame_{index:05d}.png"


def save_frames(directory: str | os.PathLike, frames) -> None:
    """Write a sequence of float images as zero-padded numbered PNGs."""
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(frames):
        save_image(os.path.join(os.fspath(directory), frame_name(i)), frame)


def list_frame_files(directory: str | os.PathLike):
    """Sorted frame file paths in a directory (frame_00000.png, ...)."""
    entries = []
    for name in os.listdir(directory):
        m = _FRAME_RE.match(name)
        if m:
            entries.append((int(m.group(1)), os.path.join(os.fspath(directory), name)))
    entries.sort()
    return [path for _, path in entries]


def load_frames(directory: str | os.PathLike) -> np.ndarray:
    """Read all numbered frames into an (n, h, w, 3) float array."""
    paths = list_frame_files(directory)
    if not paths:
        raise ValueError(f"no frame_*.png files in {os.fspath(directory)!r}")
    frames = [load_image(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames disagree on dimensions: {sorted(shapes)}")
    return np.stack(frames)


def load_masks(directory: str | os.PathLike) -> np.ndarray:
    paths = list_frame_files(directory)
    if not paths:
        raise ValueError(f"no frame_*.png files in {os.fspath(directory)!r}")
    return np.stack([load_mask(p) for p in paths])


# -- documented buffer encodings -------------------------------------------


def encode_normal_image(normal: np.ndarray, coverage: np.ndarray) -> np.ndarray:
    """Map unit normals to the (n + 1) / 2 color encoding; background 0.5."""
    img = np.full(normal.shape, 0.5)
    img[coverage] = (normal[coverage] + 1.0) * 0.5
    return np.clip(img, 0.0, 1.0)


def decode_normal_image(image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_normal_image` (no renormalization)."""
    return np.asarray(image, dtype=np.float64) * 2.0 - 1.0


def save_depth16(path: str | os.PathLike, depth: np.ndarray) -> None:
    """Write depth as 16-bit inverse depth: stored = 65535 / (1 + z), z=inf -> 0."""
    with open(os.fspath(path), "wb") as fh:
        fh.write(depth16_png_bytes(depth))


def depth16_png_bytes(depth: np.ndarray) -> bytes:
    """:func:`save_depth16`'s encoding, returned as PNG bytes."""
    from io import BytesIO

    z = np.asarray(depth, dtype=np.float64)
    inv = np.where(np.isfinite(z), 1.0 / (1.0 + np.maximum(z, 0.0)), 0.0)
    q = np.clip(np.rint(inv * 65535.0), 0, 65535).astype(np.uint16)
    buf = BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    return buf.getvalue()


def load_depth16(path: str | os.PathLike) -> np.ndarray:
    """Inverse of :func:`save_depth16`; zero-valued pixels decode to +inf."""
    with Image.open(os.fspath(path)) as im:
        q = np.asarray(im, dtype=np.float64)
    inv = q / 65535.0
    with np.errstate(divide="ignore"):
        z = np.where(inv > 0, 1.0 / np.maximum(inv, 1e-12) - 1.0, np.inf)
    return z


def save_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float RGB image as a binary PPM (P6)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[:2]
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())

"""Layered background atlas.

Two coordinate MLPs factor a clip: ``uvNet`` maps a positionally encoded
(x, y, frame) triple to a uv point in the unit square, ``atlasNet`` maps
encoded uv to RGB.  Training minimizes reconstruction error over background
pixels; because every frame pixel resolves to a point in one shared atlas,
painting that atlas once edits every frame consistently.

Coordinates are normalized to [-1, 1] at pixel centers ((i + 0.5)/size
rescaled); the frame index is normalized the same way.  uv membership in
[0, 1]^2 is guaranteed by the uvNet's sigmoid output, not by clipping.

Three regularizers keep the mapping usable (see the config docstring):
local rigidity on the spatial Jacobian, flow consistency when the clip
carries known flow, and a frame-0 gauge anchor that fixes the otherwise
arbitrary atlas parameterization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .imgio import load_image
from .mlp import (
    Adam,
    Mlp,
    encoded_dim,
    positional_encoding,
    positional_encoding_backward,
)
from .remote import ContractError, post_image_edit

DEFAULT_ATLAS_RESOLUTION = (768, 432)  # (width, height)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class VideoClip:
    """Frames (n, h, w, 3) in [0, 1]; optional per-frame foreground masks
    (true = foreground, excluded from the background fit); optional known
    per-step global translation flow (n-1, 2) in pixels (dx, dy)."""

    frames: np.ndarray
    foreground_masks: np.ndarray | None = None
    fps: float = 24.0
    ground_truth_flow: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (n, h, w, 3), got {self.frames.shape}")
        n, h, w, _ = self.frames.shape
        if self.foreground_masks is not None:
            self.foreground_masks = np.asarray(self.foreground_masks, dtype=bool)
            if self.foreground_masks.shape != (n, h, w):
                raise ValueError(
                    f"masks shape {self.foreground_masks.shape} != {(n, h, w)}"
                )
        if self.ground_truth_flow is not None:
            self.ground_truth_flow = np.asarray(self.ground_truth_flow, dtype=np.float64)
            if self.ground_truth_flow.shape != (max(n - 1, 0), 2):
                raise ValueError(
                    f"flow shape {self.ground_truth_flow.shape} != {(n - 1, 2)}"
                )

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self) -> tuple[int, int]:
        """(width, height)."""
        return self.frames.shape[2], self.frames.shape[1]


@dataclass
class AtlasConfig:
    """Training knobs.

    The rigidity term penalizes the uvNet spatial Jacobian J for deviating
    from a similarity of scale ``rigidity_scale`` ((|Jx|^2-s^2)^2 +
    (|Jy|^2-s^2)^2 + 2(Jx.Jy)^2, finite differences one pixel apart).  Flow
    consistency ties uv of corresponding pixels across arbitrary frame pairs
    using the clip's cumulative known translations.  The first
    ``warmup_fraction`` of iterations fit uvNet directly to the flow-implied
    scaled identity, and frame 0 stays softly pinned to that identity for the
    whole run — without the pin the rigidity term has a saddle at the
    collapsed (constant-uv) map and the flow term actively prefers it.
    """

    freqs: int = 6
    hidden: int = 128
    depth: int = 4
    batch: int = 512
    lr: float = 1e-3
    lr_decay_fraction: float = 0.6
    lr_decayed: float = 3e-4
    rigidity_weight: float = 1e-3
    rigidity_scale: float = 0.35
    rigidity_subsample: int = 128
    flow_weight: float = 2.0
    flow_subsample: int = 256
    anchor_weight: float = 1.0
    warmup_fraction: float = 0.1
    seed: int = 0


@dataclass
class AtlasModel:
    """Immutable after training; evaluation only."""

    uv_net: Mlp
    atlas_net: Mlp
    freqs: int
    frame_count: int
    frame_size: tuple[int, int]  # (width, height)

    def _frame_t(self, frame_index: int) -> float:
        n = self.frame_count
        if not 0 <= frame_index < n:
            raise ValueError(f"frame index {frame_index} outside [0, {n})")
        return 0.0 if n == 1 else frame_index / (n - 1) * 2.0 - 1.0

    def uv(self, xy: np.ndarray, frame_index: int) -> np.ndarray:
        """Map normalized (x, y) in [-1, 1]^2 to uv in [0, 1]^2."""
        xy = np.asarray(xy, dtype=np.float32).reshape(-1, 2)
        t = np.full((len(xy), 1), self._frame_t(frame_index), dtype=np.float32)
        coords = np.concatenate([xy, t], axis=1)
        return self.uv_net.forward(positional_encoding(coords, self.freqs))

    def uv_grid(self, frame_index: int) -> np.ndarray:
        """uv for every pixel of a frame, shape (h, w, 2)."""
        w, h = self.frame_size
        xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
        ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
        gx, gy = np.meshgrid(xs, ys)
        xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
        return self.uv(xy, frame_index).reshape(h, w, 2).astype(np.float64)

    def color(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float32).reshape(-1, 2)
        return self.atlas_net.forward(positional_encoding(uv, self.freqs))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _pixel_table(clip: VideoClip):
    """Flatten the clip to (coords, colors, frame_of) with fg pixels dropped."""
    n, h, w, _ = clip.frames.shape
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, ys)
    tvals = (
        np.zeros(1) if n == 1 else np.arange(n, dtype=np.float64) / (n - 1) * 2.0 - 1.0
    )
    coords, colors, frame_of = [], [], []
    for i in range(n):
        keep = (
            np.ones(h * w, dtype=bool)
            if clip.foreground_masks is None
            else ~clip.foreground_masks[i].ravel()
        )
        if not keep.any():
            continue
        c = np.stack(
            [gx.ravel()[keep], gy.ravel()[keep], np.full(keep.sum(), tvals[i])], axis=1
        )
        coords.append(c)
        colors.append(clip.frames[i].reshape(-1, 3)[keep])
        frame_of.append(np.full(keep.sum(), i, dtype=np.int64))
    if not coords:
        raise ValueError("every pixel is foreground-masked; nothing to fit")
    return (
        np.concatenate(coords).astype(np.float32),
        np.concatenate(colors).astype(np.float32),
        np.concatenate(frame_of),
        tvals.astype(np.float32),
    )


def train_atlas(clip: VideoClip, iters: int, cfg: AtlasConfig | None = None) -> AtlasModel:
    cfg = cfg or AtlasConfig()
    if clip.frame_count < 1:
        raise ValueError("clip has no frames")
    n, h, w, _ = clip.frames.shape
    rng = np.random.default_rng(cfg.seed)

    layers_uv = [encoded_dim(3, cfg.freqs)] + [cfg.hidden] * cfg.depth + [2]
    layers_at = [encoded_dim(2, cfg.freqs)] + [cfg.hidden] * cfg.depth + [3]
    uv_net = Mlp(layers_uv, rng)
    atlas_net = Mlp(layers_at, rng)
    opt = Adam(uv_net.params + atlas_net.params, lr=cfg.lr)

    coords, colors, frame_of, tvals = _pixel_table(clip)

    flow = clip.ground_truth_flow
    # cumulative translation from frame 0, in normalized units
    if flow is not None and n > 1:
        cum = np.concatenate([[(0.0, 0.0)], np.cumsum(flow, axis=0)])
        cum_x = (cum[:, 0] * 2.0 / w).astype(np.float32)
        cum_y = (cum[:, 1] * 2.0 / h).astype(np.float32)
    else:
        cum_x = np.zeros(n, dtype=np.float32)
        cum_y = np.zeros(n, dtype=np.float32)

    s = cfg.rigidity_scale
    warmup = int(round(cfg.warmup_fraction * iters))
    decay_at = int(round(cfg.lr_decay_fraction * iters))
    delta = 2.0 / w

    for it in range(iters):
        if it == decay_at:
            opt.lr = cfg.lr_decayed
        idx = rng.integers(0, len(coords), size=cfg.batch)
        x, target = coords[idx], colors[idx]
        enc = positional_encoding(x, cfg.freqs)
        uv, uv_cache = uv_net.forward(enc, want_cache=True)
        rgb, at_cache = atlas_net.forward(
            positional_encoding(uv, cfg.freqs), want_cache=True
        )
        resid = rgb - target
        d_enc_uv, at_grads = atlas_net.backward(at_cache, (2.0 / resid.size) * resid)

        if it < warmup:
            # fit uvNet toward the flow-implied scaled identity; the atlas
            # net already trains against real colors through the frozen map
            fr = frame_of[idx]
            ax = x[:, 0] - cum_x[fr]
            ay = x[:, 1] - cum_y[fr]
            anchor = np.stack([s * ax + 0.5, s * ay + 0.5], axis=1)
            da = uv - anchor
            _, uv_grads = uv_net.backward(uv_cache, (2.0 / da.size) * da)
            opt.step(uv_grads + at_grads)
            continue

        d_uv = positional_encoding_backward(uv, cfg.freqs, d_enc_uv)
        _, uv_grads = uv_net.backward(uv_cache, d_uv)

        # frame-0 gauge anchor (persistent)
        sub = min(cfg.rigidity_subsample, cfg.batch)
        xa0 = x[:sub].copy()
        xa0[:, 2] = tvals[0]
        ua0, ca0 = uv_net.forward(positional_encoding(xa0, cfg.freqs), want_cache=True)
        anchor = np.stack([s * xa0[:, 0] + 0.5, s * xa0[:, 1] + 0.5], axis=1)
        da0 = ua0 - anchor
        _, g_anchor = uv_net.backward(
            ca0, (2.0 * cfg.anchor_weight / da0.size) * da0
        )
        for k in range(len(uv_grads)):
            uv_grads[k] += g_anchor[k]

        # rigidity on the spatial Jacobian (one-pixel finite differences)
        xr = x[:sub]
        ex, ey = xr.copy(), xr.copy()
        ex[:, 0] += delta
        ey[:, 1] += delta
        u0, c0 = uv_net.forward(positional_encoding(xr, cfg.freqs), want_cache=True)
        ux, cx = uv_net.forward(positional_encoding(ex, cfg.freqs), want_cache=True)
        uy, cy = uv_net.forward(positional_encoding(ey, cfg.freqs), want_cache=True)
        jx, jy = (ux - u0) / delta, (uy - u0) / delta
        a = (jx * jx).sum(1) - s * s
        b = (jy * jy).sum(1) - s * s
        c = (jx * jy).sum(1)
        m = cfg.rigidity_weight / sub
        d_jx = m * (4.0 * a[:, None] * jx + 4.0 * c[:, None] * jy)
        d_jy = m * (4.0 * b[:, None] * jy + 4.0 * c[:, None] * jx)
        _, g0 = uv_net.backward(c0, -(d_jx + d_jy) / delta)
        _, gx = uv_net.backward(cx, d_jx / delta)
        _, gy = uv_net.backward(cy, d_jy / delta)
        for k in range(len(uv_grads)):
            uv_grads[k] += g0[k] + gx[k] + gy[k]

        # flow consistency across arbitrary frame pairs
        if flow is not None and n > 1 and cfg.flow_weight > 0.0:
            fi = rng.integers(0, len(coords), size=cfg.flow_subsample)
            tgt = rng.integers(0, n, size=cfg.flow_subsample)
            src = frame_of[fi]
            keep = tgt != src
            fi, tgt, src = fi[keep], tgt[keep], src[keep]
            xa = coords[fi]
            xb = xa.copy()
            xb[:, 0] += cum_x[tgt] - cum_x[src]
            xb[:, 1] += cum_y[tgt] - cum_y[src]
            xb[:, 2] = tvals[tgt]
            inb = (np.abs(xb[:, 0]) <= 1.0) & (np.abs(xb[:, 1]) <= 1.0)
            xa, xb = xa[inb], xb[inb]
            if len(xa):
                ua, ca = uv_net.forward(
                    positional_encoding(xa, cfg.freqs), want_cache=True
                )
                ub, cb = uv_net.forward(
                    positional_encoding(xb, cfg.freqs), want_cache=True
                )
                dd = ub - ua
                gdd = (2.0 * cfg.flow_weight / dd.size) * dd
                _, ga = uv_net.backward(ca, -gdd)
                _, gb = uv_net.backward(cb, gdd)
                for k in range(len(uv_grads)):
                    uv_grads[k] += ga[k] + gb[k]

        opt.step(uv_grads + at_grads)

    return AtlasModel(
        uv_net=uv_net,
        atlas_net=atlas_net,
        freqs=cfg.freqs,
        frame_count=n,
        frame_size=(w, h),
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def reconstruct(model: AtlasModel, frame_index: int) -> np.ndarray:
    """atlasNet(uvNet(pixel, frame)) for every pixel."""
    w, h = model.frame_size
    uv = model.uv_grid(frame_index).reshape(-1, 2)
    return model.color(uv).reshape(h, w, 3).astype(np.float64)


def discretize_atlas(
    model: AtlasModel, resolution: tuple[int, int] = DEFAULT_ATLAS_RESOLUTION
) -> np.ndarray:
    """Evaluate atlasNet on the regular uv grid; (width, height) -> image."""
    aw, ah = resolution
    us = (np.arange(aw) + 0.5) / aw
    vs = (np.arange(ah) + 0.5) / ah
    gu, gv = np.meshgrid(us, vs)
    uv = np.stack([gu.ravel(), gv.ravel()], axis=1)
    return model.color(uv).reshape(ah, aw, 3).astype(np.float64)


def _bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample image at uv in [0,1]^2 (u across width), clamp addressing."""
    h, w = image.shape[:2]
    px = np.clip(u * w - 0.5, 0.0, w - 1.0)
    py = np.clip(v * h - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(h - 2, 0))
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (
        image[y0, x0] * (1 - fy) * (1 - fx)
        + image[y0, x1] * (1 - fy) * fx
        + image[y1, x0] * fy * (1 - fx)
        + image[y1, x1] * fy * fx
    )


def propagate_edit(
    model: AtlasModel, edited_atlas: np.ndarray, frame_index: int
) -> np.ndarray:
    """Sample the edited atlas at each pixel's uv — one edit, every frame."""
    edited_atlas = np.asarray(edited_atlas, dtype=np.float64)
    if edited_atlas.ndim != 3 or min(edited_atlas.shape[:2]) < 2:
        raise ValueError(f"edited atlas must be at least 2x2x3, got {edited_atlas.shape}")
    w, h = model.frame_size
    uv = model.uv_grid(frame_index).reshape(-1, 2)
    return _bilinear(edited_atlas, uv[:, 0], uv[:, 1]).reshape(h, w, 3)


def request_atlas_edit(
    source: str,
    atlas_image: np.ndarray,
    *,
    prompt: str = "",
    depth_png: bytes | None = None,
    timeout: float = 30.0,
    retries: int = 3,
) -> np.ndarray:
    """Fetch an edited atlas from a file path or a remote editor endpoint.

    The edit itself happens elsewhere; this seam only moves bytes and checks
    that what came back still has the atlas's dimensions.
    """
    expected = np.asarray(atlas_image).shape[:2]
    if source.startswith(("http://", "https://")):
        from io import BytesIO

        from PIL import Image

        buf = BytesIO()
        arr = (np.clip(atlas_image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(buf, format="PNG")
        out_bytes = post_image_edit(
            source, buf.getvalue(), prompt, depth_png, timeout=timeout, retries=retries
        )
        try:
            edited = np.asarray(
                Image.open(BytesIO(out_bytes)).convert("RGB"), dtype=np.float64
            ) / 255.0
        except Exception as exc:
            raise ContractError(f"editor returned undecodable image data: {exc}") from exc
    else:
        if not os.path.exists(source):
            raise FileNotFoundError(f"edited atlas file not found: {source}")
        edited = load_image(source)
    if edited.shape[:2] != expected:
        raise ContractError(
            f"edited atlas is {edited.shape[:2]}, expected {expected}"
        )
    return edited


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MODEL_FORMAT_VERSION = 1


def save_model(path: str | os.PathLike, model: AtlasModel) -> None:
    blob = {
        "format_version": np.int64(MODEL_FORMAT_VERSION),
        "freqs": np.int64(model.freqs),
        "frame_count": np.int64(model.frame_count),
        "frame_size": np.array(model.frame_size, dtype=np.int64),
    }
    for prefix, net in (("uv", model.uv_net), ("atlas", model.atlas_net)):
        for key, value in net.state().items():
            blob[f"{prefix}_{key}"] = value
    np.savez(path, **blob)


def load_model(path: str | os.PathLike) -> AtlasModel:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != MODEL_FORMAT_VERSION:
            raise ValueError(
                f"atlas model format {version} unsupported (expected {MODEL_FORMAT_VERSION})"
            )
        freqs = int(data["freqs"])
        states: dict[str, dict[str, np.ndarray]] = {"uv": {}, "atlas": {}}
        for key in data.files:
            for prefix in ("uv_", "atlas_"):
                if key.startswith(prefix):
                    states[prefix[:-1]][key[len(prefix):]] = data[key]
        rng = np.random.default_rng(0)
        nets = {}
        for name, state in states.items():
            weights = [state[k] for k in sorted(state) if k.startswith("w")]
            sizes = [weights[0].shape[0]] + [w_.shape[1] for w_ in weights]
            net = Mlp(sizes, rng)
            net.load_state(state)
            nets[name] = net
        return AtlasModel(
            uv_net=nets["uv"],
            atlas_net=nets["atlas"],
            freqs=freqs,
            frame_count=int(data["frame_count"]),
            frame_size=tuple(int(v) for v in data["frame_size"]),
        )

"""End-to-end orchestration: ingest, background edit, human edit, harmonize.

Stage order: (1) background — fit or load the atlas, optionally ingest an
edited atlas and propagate it to every frame; (2) human — optimize or load
body parameters, animate them along the pose track, render per frame;
(3) harmonize the rendered human into each background frame and write the
result.  A disabled stage passes its input through untouched; with both edit
stages disabled the input frame files are byte-copied so the output is
bit-identical.

Intermediate artifacts live under ``<output>/partial/`` while the run is in
flight; final frames appear in the output directory only once every stage
succeeded, so an aborted run leaves its partials behind for inspection.
Expensive stages cache by content hash: same inputs, same artifact, no rerun.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field

import numpy as np

from . import atlas as atlas_mod
from . import body as body_mod
from . import harmonize as harm_mod
from . import imgio
from . import sds as sds_mod
from .diffusion import ConstantTargetPredictor, NoisePredictor, linear_beta_schedule
from .remote import (
    EDITOR_ENDPOINT_VAR,
    PREDICTOR_ENDPOINT_VAR,
    remote_predictor,
    resolve_endpoint,
)
from .render import perspective_camera, render

log = logging.getLogger(__name__)

CACHE_DIR_VAR = "BODYATLAS_CACHE_DIR"


class PipelineError(RuntimeError):
    """A stage failed; the message is tagged with the stage name."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class CameraConfig:
    """Static camera, or ``mode: file`` with one eye/target per frame."""

    mode: str = "static"
    eye: tuple[float, float, float] = (2.1, 0.4, 0.5)
    target: tuple[float, float, float] = (0.0, 0.0, 0.42)
    fov_deg: float = 45.0
    path: str = ""

    def per_frame(self, n: int, resolution: tuple[int, int]):
        if self.mode == "static":
            cam = perspective_camera(self.eye, self.target, resolution, self.fov_deg)
            return [cam] * n
        if self.mode == "file":
            with open(self.path, encoding="utf-8") as fh:
                rows = json.load(fh)
            if len(rows) != n:
                raise ValueError(f"camera file has {len(rows)} entries for {n} frames")
            return [
                perspective_camera(
                    tuple(r["eye"]), tuple(r["target"]), resolution,
                    float(r.get("fov_deg", self.fov_deg)),
                )
                for r in rows
            ]
        raise ValueError(f"camera mode must be static|file, got {self.mode!r}")


@dataclass
class HarmonizeConfig:
    mode: str = "retinex"  # decomposition for background frames
    hook: str = "passthrough"
    lambda_ema: float = 0.5
    bg_normals_dir: str = ""  # optional known background normal maps
    albedo_dir: str = ""  # groundTruth decomposition inputs
    shading_dir: str = ""


@dataclass
class PipelineConfig:
    frames_dir: str = ""
    output_dir: str = ""
    masks_dir: str = ""
    poses_path: str = ""
    template_path: str = ""
    edit_human: bool = True
    edit_background: bool = True
    prompt_human: str = ""
    prompt_background: str = ""
    fps: float = 24.0
    flow: list | None = None  # per-step global (dx, dy), synthetic clips
    atlas_iters: int = 20000
    atlas: atlas_mod.AtlasConfig = field(default_factory=atlas_mod.AtlasConfig)
    atlas_resolution: tuple[int, int] = atlas_mod.DEFAULT_ATLAS_RESOLUTION
    edited_atlas_path: str = ""
    editor_endpoint: str = ""
    atlas_model_path: str = ""
    optimizer: sds_mod.OptimizerConfig = field(default_factory=sds_mod.OptimizerConfig)
    checkpoint_path: str = ""
    predictor_endpoint: str = ""
    constant_color_human: tuple[float, float, float] = (0.55, 0.45, 0.4)
    texture_size: int = 64
    camera: CameraConfig = field(default_factory=CameraConfig)
    harmonize: HarmonizeConfig = field(default_factory=HarmonizeConfig)
    cache_dir: str = ""
    seed: int = 0

    def validate(self) -> None:
        if not self.frames_dir or not self.output_dir:
            raise ValueError("frames_dir and output_dir are required")
        if not os.path.isdir(self.frames_dir):
            raise ValueError(f"frames_dir does not exist: {self.frames_dir}")
        for name in ("masks_dir", "poses_path", "template_path", "edited_atlas_path",
                     "atlas_model_path", "checkpoint_path"):
            value = getattr(self, name)
            if value and not os.path.exists(value):
                raise ValueError(f"{name} does not exist: {value}")
        if not (self.edit_human or self.edit_background):
            log.warning(
                "both edit stages disabled; the run degenerates to a byte copy"
            )

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in self.__dataclass_fields__
            if k not in ("atlas", "optimizer", "camera", "harmonize")
        }
        d["atlas"] = vars(self.atlas).copy()
        d["optimizer"] = self.optimizer.to_dict()
        d["camera"] = vars(self.camera).copy()
        d["harmonize"] = vars(self.harmonize).copy()
        d["atlas_resolution"] = list(self.atlas_resolution)
        d["constant_color_human"] = list(self.constant_color_human)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "atlas" in d and isinstance(d["atlas"], dict):
            bad = set(d["atlas"]) - set(atlas_mod.AtlasConfig.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown atlas config keys: {sorted(bad)}")
            d["atlas"] = atlas_mod.AtlasConfig(**d["atlas"])
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = sds_mod.OptimizerConfig.from_dict(d["optimizer"])
        if "camera" in d and isinstance(d["camera"], dict):
            cam = dict(d["camera"])
            for key in ("eye", "target"):
                if key in cam:
                    cam[key] = tuple(cam[key])
            d["camera"] = CameraConfig(**cam)
        if "harmonize" in d and isinstance(d["harmonize"], dict):
            d["harmonize"] = HarmonizeConfig(**d["harmonize"])
        if "atlas_resolution" in d:
            d["atlas_resolution"] = tuple(d["atlas_resolution"])
        if "constant_color_human" in d:
            d["constant_color_human"] = tuple(d["constant_color_human"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


@dataclass
class MetricsReport:
    psnr_per_frame: list[float] = field(default_factory=list)
    psnr_mean: float | None = None
    warp_error_per_pair: list[float] = field(default_factory=list)
    warp_error_mean: float | None = None
    stage_seconds: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        vals = list(self.psnr_per_frame) + list(self.warp_error_per_pair)
        vals += [v for v in (self.psnr_mean, self.warp_error_mean) if v is not None]
        vals += list(self.stage_seconds.values())
        if vals and not np.isfinite(vals).all():
            raise FloatingPointError("metrics contain non-finite values")

    def to_dict(self) -> dict:
        return {
            "psnr_per_frame": self.psnr_per_frame,
            "psnr_mean": self.psnr_mean,
            "warp_error_per_pair": self.warp_error_per_pair,
            "warp_error_mean": self.warp_error_mean,
            "stage_seconds": self.stage_seconds,
        }

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def _warp_translate(frame: np.ndarray, dx: float, dy: float) -> tuple[np.ndarray, np.ndarray]:
    """Shift a frame by a global translation (bilinear); also return the
    validity mask of pixels whose source lies inside the frame."""
    h, w = frame.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    sx, sy = xs - dx, ys - dy
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, h - 2).astype(np.int64)
    fx = np.clip(sx - x0, 0.0, 1.0)[..., None]
    fy = np.clip(sy - y0, 0.0, 1.0)[..., None]
    out = (
        frame[y0, x0] * (1 - fy) * (1 - fx)
        + frame[y0, x0 + 1] * (1 - fy) * fx
        + frame[y0 + 1, x0] * fy * (1 - fx)
        + frame[y0 + 1, x0 + 1] * fy * fx
    )
    return out, valid


def metrics(
    outputs: np.ndarray,
    references: np.ndarray | None = None,
    flow: np.ndarray | None = None,
    stage_seconds: dict[str, float] | None = None,
) -> MetricsReport:
    """Per-frame PSNR against references and translation warp error."""
    outputs = np.asarray(outputs, dtype=np.float64)
    report = MetricsReport(stage_seconds=dict(stage_seconds or {}))
    if references is not None:
        references = np.asarray(references, dtype=np.float64)
        if references.shape != outputs.shape:
            raise ValueError(
                f"references shape {references.shape} != outputs {outputs.shape}"
            )
        report.psnr_per_frame = [
            psnr(o, r) for o, r in zip(outputs, references)
        ]
        report.psnr_mean = float(np.mean(report.psnr_per_frame))
    if flow is not None:
        flow = np.asarray(flow, dtype=np.float64)
        for i in range(len(outputs) - 1):
            warped, valid = _warp_translate(outputs[i], flow[i, 0], flow[i, 1])
            diff = (warped - outputs[i + 1])[valid]
            report.warp_error_per_pair.append(float(np.mean(diff**2)))
        if report.warp_error_per_pair:
            report.warp_error_mean = float(np.mean(report.warp_error_per_pair))
    report.validate()
    return report


# ---------------------------------------------------------------------------
# pose ingestion
# ---------------------------------------------------------------------------


def ingest_poses(
    path: str | os.PathLike,
    template: body_mod.BodyTemplate,
    resample_to: int | None = None,
):
    """Load and validate a pose track against a template.

    Returns (thetas (N, J, 3), translations (N, 3) or None).  When
    ``resample_to`` is given and differs from the stored count, frames are
    picked by nearest index.
    """
    thetas, trans = body_mod.load_pose_sequence(path)
    if thetas.shape[1] != template.joint_count:
        raise ValueError(
            f"pose file has {thetas.shape[1]} joints, template has "
            f"{template.joint_count}"
        )
    if resample_to is not None and resample_to != len(thetas):
        idx = np.rint(np.linspace(0, len(thetas) - 1, resample_to)).astype(int)
        thetas = thetas[idx]
        trans = trans[idx] if trans is not None else None
    return thetas, trans


# ---------------------------------------------------------------------------
# caching
# ---------------------------------------------------------------------------


def _content_hash(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(part)
        elif isinstance(part, np.ndarray):
            h.update(np.ascontiguousarray(part).tobytes())
            h.update(str(part.shape).encode())
        else:
            h.update(json.dumps(part, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# the run
# ---------------------------------------------------------------------------


def _stage(name: str):
    """Decorator tagging stage failures with the stage name."""

    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(f"[stage:{name}] {exc}") from exc

        return run

    return wrap


@_stage("background")
def _run_background(cfg: PipelineConfig, clip: atlas_mod.VideoClip, partial: str,
                    cache: str | None, seconds: dict) -> np.ndarray:
    t0 = time.monotonic()
    if not cfg.edit_background:
        seconds["background"] = time.monotonic() - t0
        return clip.frames
    if cfg.atlas_model_path:
        model = atlas_mod.load_model(cfg.atlas_model_path)
    else:
        model = None
        key = None
        if cache:
            key = os.path.join(
                cache,
                f"atlas_{_content_hash(clip.frames, clip.foreground_masks, vars(cfg.atlas), cfg.atlas_iters)}.npz",
            )
            if os.path.exists(key):
                log.info("atlas cache hit: %s", key)
                model = atlas_mod.load_model(key)
        if model is None:
            model = atlas_mod.train_atlas(clip, cfg.atlas_iters, cfg.atlas)
            if key:
                atlas_mod.save_model(key, model)
    base = atlas_mod.discretize_atlas(model, cfg.atlas_resolution)
    imgio.save_image(os.path.join(partial, "atlas.png"), base)

    editor = resolve_endpoint(cfg.editor_endpoint, EDITOR_ENDPOINT_VAR)
    if cfg.edited_atlas_path:
        edited = atlas_mod.request_atlas_edit(cfg.edited_atlas_path, base)
    elif editor:
        edited = atlas_mod.request_atlas_edit(
            editor, base, prompt=cfg.prompt_background
        )
    else:
        edited = base  # fit/propagate only; nothing asked for an edit
    imgio.save_image(os.path.join(partial, "atlas_edited.png"), edited)

    bg_dir = os.path.join(partial, "background")
    frames = np.stack(
        [atlas_mod.propagate_edit(model, edited, i) for i in range(clip.frame_count)]
    )
    imgio.save_frames(bg_dir, frames)
    seconds["background"] = time.monotonic() - t0
    return frames


def _human_predictors(cfg: PipelineConfig) -> tuple[NoisePredictor, NoisePredictor]:
    endpoint = resolve_endpoint(cfg.predictor_endpoint, PREDICTOR_ENDPOINT_VAR)
    schedule = linear_beta_schedule()
    if endpoint:
        p = remote_predictor(endpoint, seed=cfg.seed)
        return p, p
    fallback = ConstantTargetPredictor(tuple(cfg.constant_color_human), schedule)
    return fallback, fallback


@_stage("human")
def _run_human(cfg: PipelineConfig, clip: atlas_mod.VideoClip, partial: str,
               cache: str | None, seconds: dict,
               predictors: tuple[NoisePredictor, NoisePredictor] | None):
    """Returns per-frame (rgb, normal buffer, coverage) renders, or None."""
    t0 = time.monotonic()
    if not cfg.edit_human:
        seconds["human"] = time.monotonic() - t0
        return None
    template = (
        body_mod.load_template(cfg.template_path)
        if cfg.template_path
        else body_mod.make_biped_template()
    )
    template.validate()
    opt_cfg = cfg.optimizer
    if cfg.checkpoint_path:
        params = sds_mod.load_checkpoint(cfg.checkpoint_path)
    else:
        params = None
        key = None
        if cache:
            key = os.path.join(
                cache, f"human_{_content_hash(opt_cfg.to_dict(), cfg.prompt_human, cfg.texture_size, cfg.seed)}.npz"
            )
            if os.path.exists(key):
                log.info("checkpoint cache hit: %s", key)
                params = sds_mod.load_checkpoint(key)
        if params is None:
            pred_n, pred_r = predictors or _human_predictors(cfg)
            init = body_mod.BodyParams.zeros(
                template, opt_cfg.subdivision_levels, cfg.texture_size
            )
            params, _ = sds_mod.optimize(
                template, init, pred_n, pred_r,
                cfg.prompt_human, cfg.prompt_human, opt_cfg,
                telemetry_path=os.path.join(partial, "telemetry.csv"),
            )
            if key:
                sds_mod.save_checkpoint(key, params)
    sds_mod.save_checkpoint(os.path.join(partial, "human.npz"), params)

    mesh = body_mod.canonical_human(template, params, opt_cfg.subdivision_levels)
    joints = body_mod.regress_joints(template, params.beta)
    n = clip.frame_count
    if cfg.poses_path:
        thetas, trans = ingest_poses(cfg.poses_path, template, resample_to=n)
    else:
        thetas = np.zeros((n, template.joint_count, 3))
        trans = None
    posed = body_mod.animate_sequence(mesh, thetas, joints, template.kinematic_tree)
    if trans is not None:
        for m, tvec in zip(posed, trans):
            m.vertices = m.vertices + np.asarray(tvec, dtype=np.float64)

    w, h = clip.frame_size
    cams = cfg.camera.per_frame(n, (w, h))
    renders = []
    render_dir = os.path.join(partial, "render")
    os.makedirs(render_dir, exist_ok=True)
    for i, (m, cam) in enumerate(zip(posed, cams)):
        fb = render(m, params.texture, cam)
        renders.append((fb.rgb, fb.normal, fb.coverage))
        imgio.save_image(os.path.join(render_dir, imgio.frame_name(i)), fb.rgb)
        imgio.save_mask(
            os.path.join(render_dir, f"mask_{i:05d}.png"), fb.coverage
        )
    seconds["human"] = time.monotonic() - t0
    return renders


@_stage("harmonize")
def _run_harmonize(cfg: PipelineConfig, clip: atlas_mod.VideoClip,
                   bg_frames: np.ndarray, renders, partial: str,
                   seconds: dict) -> np.ndarray:
    t0 = time.monotonic()
    n = clip.frame_count
    hcfg = cfg.harmonize

    if renders is None:
        # background-only edit: original foreground pixels stay put
        if clip.foreground_masks is not None:
            out = np.where(
                clip.foreground_masks[..., None], clip.frames, bg_frames
            )
        else:
            out = bg_frames
        seconds["harmonize"] = time.monotonic() - t0
        return out

    # per-frame light fit on the background, then smoothed over time
    lights = []
    albedos, shadings = [], []
    bg_normals = (
        imgio.load_frames(hcfg.bg_normals_dir) if hcfg.bg_normals_dir else None
    )
    for i in range(n):
        if hcfg.mode == "groundTruth":
            alb = imgio.load_image(
                os.path.join(hcfg.albedo_dir, imgio.frame_name(i))
            )
            sha = imgio.load_image(
                os.path.join(hcfg.shading_dir, imgio.frame_name(i))
            )[..., 0]
            dec = harm_mod.decompose(
                bg_frames[i], "groundTruth", albedo=alb, shading=sha
            )
        else:
            dec = harm_mod.decompose(bg_frames[i], "retinex")
        albedos.append(dec.albedo)
        shadings.append(dec.shading)
        if bg_normals is not None:
            normals_i = imgio.decode_normal_image(bg_normals[i])
            lights.append(harm_mod.estimate_light(normals_i, dec.shading))
        else:
            # no geometry for the background: ambient-only model
            lights.append(
                harm_mod.LightModel(
                    direction=np.array([0.0, 0.0, 1.0]),
                    intensity=0.0,
                    ambient=float(np.mean(dec.shading)),
                )
            )
    lights = harm_mod.temporal_ema(lights, hcfg.lambda_ema)

    out = np.empty_like(bg_frames)
    for i in range(n):
        rgb, normal, coverage = renders[i]
        init_shading = harm_mod.shade_foreground(normal, lights[i])
        composite = harm_mod.compose(rgb, init_shading, bg_frames[i], coverage)
        refined = harm_mod.refine_shading(
            hcfg.hook, composite, init_shading, coverage, normal,
            np.where(coverage, 1.0, np.inf),
        )
        adjusted, _ = harm_mod.harmonize_albedo(
            rgb, harm_mod.albedo_stats(albedos[i]), fg_mask=coverage
        )
        out[i] = harm_mod.compose(adjusted, refined, bg_frames[i], coverage)
    seconds["harmonize"] = time.monotonic() - t0
    return out


def run(
    cfg: PipelineConfig,
    *,
    predictors: tuple[NoisePredictor, NoisePredictor] | None = None,
) -> tuple[str, MetricsReport]:
    """Execute the full pipeline; returns (output directory, metrics)."""
    cfg.validate()
    seconds: dict[str, float] = {}
    t_start = time.monotonic()

    frames = imgio.load_frames(cfg.frames_dir)
    masks = imgio.load_masks(cfg.masks_dir) if cfg.masks_dir else None
    flow = np.asarray(cfg.flow, dtype=np.float64) if cfg.flow else None
    clip = atlas_mod.VideoClip(
        frames=frames, foreground_masks=masks, fps=cfg.fps, ground_truth_flow=flow
    )

    os.makedirs(cfg.output_dir, exist_ok=True)
    partial = os.path.join(cfg.output_dir, "partial")
    os.makedirs(partial, exist_ok=True)
    cache = resolve_endpoint(cfg.cache_dir, CACHE_DIR_VAR)
    if cache:
        os.makedirs(cache, exist_ok=True)

    if not (cfg.edit_human or cfg.edit_background):
        # byte-exact pass-through
        for i, src in enumerate(imgio.list_frame_files(cfg.frames_dir)):
            shutil.copyfile(src, os.path.join(cfg.output_dir, imgio.frame_name(i)))
        seconds["total"] = time.monotonic() - t_start
        report = metrics(frames, flow=flow, stage_seconds=seconds)
        report.save(os.path.join(cfg.output_dir, "metrics.json"))
        return cfg.output_dir, report

    bg_frames = _run_background(cfg, clip, partial, cache, seconds)
    renders = _run_human(cfg, clip, partial, cache, seconds, predictors)
    final = _run_harmonize(cfg, clip, bg_frames, renders, partial, seconds)

    for i in range(clip.frame_count):
        imgio.save_image(os.path.join(cfg.output_dir, imgio.frame_name(i)), final[i])
    seconds["total"] = time.monotonic() - t_start
    report = metrics(final, flow=flow, stage_seconds=seconds)
    report.save(os.path.join(cfg.output_dir, "metrics.json"))
    return cfg.output_dir, report

"""Score-distillation optimizer over body parameters.

Gradients flow from latent-space residuals back to (beta, psi, displacement)
through the normal-map render, and to the texture through the RGB render:

    geometry:  dL/dz = w(t) * (alpha/sigma) * (z^n - z0^n)  pulled back through
               encode -> normal image -> frozen-coverage renderer -> body
               linear maps, plus 2*lambda_n*(I_n - decode(z0^n)) on the image.
    texture:   same shape of chain on the RGB render, ending at the bilinear
               texture-fetch adjoint, plus the lambda_r image term.

``z0`` (the one-step denoised estimate) and the decoded images are treated as
constants with respect to the parameters — the residual multiplies the
render Jacobian only.  That choice makes each step the exact gradient of the
surrogate  w*(a/s)*0.5*||z - z0*||^2 + lambda*||I - I0*||^2  at the point
where z0*, I0* were produced, which is what the finite-difference tests pin.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .body import (
    BodyParams,
    BodyTemplate,
    Mesh,
    canonical_human,
    fold_to_base,
    subdivide_with_maps,
    template_rest_mesh,
)
from .diffusion import (
    NoisePredictor,
    NoiseSchedule,
    add_noise,
    decode,
    encode,
    encode_adjoint,
    linear_beta_schedule,
    one_step_x0,
)
from .render import (
    Camera,
    grad_geometry,
    grad_texture,
    hierarchical_schedule,
    perspective_camera,
    render,
    render_frozen,
    sample_camera,
)

WEIGHT_FNS: dict[str, Callable[[float, float], float]] = {
    # (alpha, sigma) -> w(t).  sigma2 keeps w*(alpha/sigma) = sigma*alpha bounded.
    "sigma2": lambda a, s: s * s,
    "uniform": lambda a, s: 1.0,
    "sigma_alpha": lambda a, s: s * a,
}

# reconstruction-weight presets: "strong" leans on the rendered image staying
# close to the denoised estimate; "weak" lets the latent term dominate
LAMBDA_PRESETS: dict[str, float] = {"strong": 1.0, "weak": 0.01}


def apply_lambda_preset(cfg: "OptimizerConfig", name: str) -> "OptimizerConfig":
    if name not in LAMBDA_PRESETS:
        raise ValueError(f"preset must be one of {sorted(LAMBDA_PRESETS)}, got {name!r}")
    cfg.lambda_n = cfg.lambda_r = LAMBDA_PRESETS[name]
    return cfg


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class CameraSpec:
    """Where iteration views come from.

    ``orbit`` samples azimuth uniformly inside an elevation band around the
    body (or, with probability ``head_prob``, a closer orbit around the head);
    ``fixed`` always uses eye/target, which keeps tests deterministic in view.
    """

    mode: str = "orbit"
    distance: float = 2.4
    fov_deg: float = 45.0
    elevation_range_deg: tuple[float, float] = (-15.0, 30.0)
    head_prob: float = 0.0
    head_distance: float = 0.9
    eye: tuple[float, float, float] = (2.4, 0.0, 0.4)
    target: tuple[float, float, float] = (0.0, 0.0, 0.4)

    def validate(self) -> None:
        if self.mode not in ("orbit", "fixed"):
            raise ValueError(f"camera mode must be orbit|fixed, got {self.mode!r}")
        if not 0.0 <= self.head_prob <= 1.0:
            raise ValueError("head_prob must lie in [0, 1]")


@dataclass
class OptimizerConfig:
    lambda_n: float = 1.0
    lambda_r: float = 1.0
    lambda_geo: float = 1.0
    lambda_tex: float = 1.0
    geo_freeze_iter: int = 50
    tex_iters: int = 150
    lr_shape: float = 1e-2
    lr_expr: float = 1e-2
    lr_displacement: float = 1e-3
    lr_texture: float = 5e-2
    weight_fn: str = "sigma2"
    latent_factor: int = 8
    subdivision_levels: int = 1
    resolution_ladder: tuple[tuple[int, int], ...] = (
        (0, 32),
        (50, 64),
        (100, 128),
        (150, 256),
    )
    t_fraction_range: tuple[float, float] = (0.02, 0.98)
    grad_ceiling: float = 1e6
    camera: CameraSpec = field(default_factory=CameraSpec)
    seed: int = 0

    def validate(self) -> None:
        for name in ("lambda_n", "lambda_r", "lambda_geo", "lambda_tex"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.geo_freeze_iter > self.tex_iters:
            raise ValueError("geo_freeze_iter must not exceed tex_iters")
        if self.weight_fn not in WEIGHT_FNS:
            raise ValueError(
                f"weight_fn must be one of {sorted(WEIGHT_FNS)}, got {self.weight_fn!r}"
            )
        lo, hi = self.t_fraction_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("t_fraction_range must satisfy 0 <= lo <= hi <= 1")
        sizes = [s for _, s in self.resolution_ladder]
        steps = [i for i, _ in self.resolution_ladder]
        if not sizes or steps != sorted(steps) or steps[0] != 0:
            raise ValueError("resolution_ladder must start at iteration 0, ascending")
        self.camera.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution_ladder"] = [list(r) for r in self.resolution_ladder]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "camera" in d and isinstance(d["camera"], dict):
            cam = dict(d["camera"])
            bad = set(cam) - set(CameraSpec.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown camera keys: {sorted(bad)}")
            for key in ("elevation_range_deg", "eye", "target"):
                if key in cam:
                    cam[key] = tuple(cam[key])
            d["camera"] = CameraSpec(**cam)
        if "resolution_ladder" in d:
            d["resolution_ladder"] = tuple(tuple(r) for r in d["resolution_ladder"])
        if "t_fraction_range" in d:
            d["t_fraction_range"] = tuple(d["t_fraction_range"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "OptimizerConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SDSGradReport:
    """One optimization step's telemetry row."""

    iteration: int
    t: int
    resolution: int
    grad_norm_geo_latent: float = 0.0
    grad_norm_tex_latent: float = 0.0
    grad_norm_recon_n: float = 0.0
    grad_norm_recon_r: float = 0.0
    loss_recon_n: float = 0.0
    loss_recon_r: float = 0.0
    skipped: str = ""

    def validate(self) -> None:
        vals = [
            self.grad_norm_geo_latent,
            self.grad_norm_tex_latent,
            self.grad_norm_recon_n,
            self.grad_norm_recon_r,
            self.loss_recon_n,
            self.loss_recon_r,
        ]
        if not np.isfinite(vals).all():
            raise FloatingPointError(f"non-finite telemetry at iteration {self.iteration}")


TELEMETRY_FIELDS = [f for f in SDSGradReport.__dataclass_fields__]


def write_telemetry(path: str | os.PathLike, rows: list[SDSGradReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TELEMETRY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


# ---------------------------------------------------------------------------
# core gradient pieces
# ---------------------------------------------------------------------------


def latent_residual_grad(
    z: np.ndarray,
    z0: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    weight_fn: str = "sigma2",
) -> np.ndarray:
    """dL/dz = w(t) * (alpha(t)/sigma(t)) * (z - z0), z0 held constant."""
    z = np.asarray(z, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z.shape != z0.shape:
        raise ValueError(f"z shape {z.shape} != z0 shape {z0.shape}")
    a, s = schedule.alpha(t), schedule.sigma(t)
    if s == 0.0:
        raise ValueError(f"sigma({t}) is zero; t carries no noise to remove")
    w = WEIGHT_FNS[weight_fn](a, s)
    return w * (a / s) * (z - z0)


@dataclass
class StepResult:
    """Gradients plus the intermediates tests need to rebuild the surrogate."""

    grads: dict[str, np.ndarray]
    report: SDSGradReport
    image: np.ndarray  # the rendered map the step differentiated
    z: np.ndarray  # its latent
    z0: np.ndarray  # one-step denoised estimate (stop-grad)
    decoded: np.ndarray  # decode(z0)


def _pull_back_to_body(
    grad_vertices: np.ndarray,
    template: BodyTemplate,
    maps: list[np.ndarray],
) -> dict[str, np.ndarray]:
    """Chain dL/d(subdivided vertices) to the parameter groups."""
    grad_base = fold_to_base(grad_vertices, maps)
    return {
        "beta": np.einsum("vds,vd->s", template.shape_basis, grad_base),
        "psi": np.einsum("vde,vd->e", template.expr_basis, grad_base),
        "displacement": grad_vertices,
    }


def geo_step(
    params: BodyParams,
    template: BodyTemplate,
    camera: Camera,
    predictor_n: NoisePredictor,
    prompt: str,
    t: int,
    cfg: OptimizerConfig,
    schedule: NoiseSchedule,
    *,
    eps: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    maps: list[np.ndarray] | None = None,
) -> StepResult:
    """Gradient of the normal-space objective on (beta, psi, displacement)."""
    if maps is None:
        _, maps = subdivide_with_maps(
            template_rest_mesh(template), cfg.subdivision_levels
        )
    mesh = canonical_human(template, params, cfg.subdivision_levels)
    fb = render(mesh, params.texture, camera)
    normal_img = fb.normal_image()

    z = encode(normal_img, cfg.latent_factor)
    if eps is None:
        eps = (rng or np.random.default_rng()).standard_normal(z.shape)
    z_t = add_noise(z, t, eps, schedule)
    z0 = one_step_x0(z_t, t, predictor_n, prompt, schedule)
    decoded = decode(z0, cfg.latent_factor)

    dL_dz = latent_residual_grad(z, z0, t, schedule, cfg.weight_fn)
    dL_dimg = encode_adjoint(dL_dz, cfg.latent_factor)
    recon = normal_img - decoded
    dL_dimg = dL_dimg + 2.0 * cfg.lambda_n * recon

    # encoded image is (n+1)/2 at covered pixels, constant elsewhere
    grad_vertices = grad_geometry(fb, mesh, 0.5 * dL_dimg)
    grads = _pull_back_to_body(grad_vertices, template, maps)

    report = SDSGradReport(
        iteration=-1,
        t=t,
        resolution=camera.resolution[0],
        grad_norm_geo_latent=float(np.linalg.norm(dL_dz)),
        grad_norm_recon_n=float(np.linalg.norm(2.0 * cfg.lambda_n * recon)),
        loss_recon_n=float(np.sum(recon * recon)),
    )
    report.validate()
    return StepResult(
        grads=grads, report=report, image=normal_img, z=z, z0=z0, decoded=decoded
    )


def tex_step(
    params: BodyParams,
    template: BodyTemplate,
    camera: Camera,
    predictor_r: NoisePredictor,
    prompt: str,
    t: int,
    cfg: OptimizerConfig,
    schedule: NoiseSchedule,
    *,
    eps: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> StepResult:
    """Gradient of the image-space objective on the texture (geometry frozen)."""
    mesh = canonical_human(template, params, cfg.subdivision_levels)
    fb = render(mesh, params.texture, camera)
    rgb = fb.rgb

    z = encode(rgb, cfg.latent_factor)
    if eps is None:
        eps = (rng or np.random.default_rng()).standard_normal(z.shape)
    z_t = add_noise(z, t, eps, schedule)
    z0 = one_step_x0(z_t, t, predictor_r, prompt, schedule)
    decoded = decode(z0, cfg.latent_factor)

    dL_dz = latent_residual_grad(z, z0, t, schedule, cfg.weight_fn)
    dL_dimg = encode_adjoint(dL_dz, cfg.latent_factor)
    recon = rgb - decoded
    dL_dimg = dL_dimg + 2.0 * cfg.lambda_r * recon

    grad_tex = grad_texture(fb, mesh, dL_dimg)

    report = SDSGradReport(
        iteration=-1,
        t=t,
        resolution=camera.resolution[0],
        grad_norm_tex_latent=float(np.linalg.norm(dL_dz)),
        grad_norm_recon_r=float(np.linalg.norm(2.0 * cfg.lambda_r * recon)),
        loss_recon_r=float(np.sum(recon * recon)),
    )
    report.validate()
    return StepResult(
        grads={"texture": grad_tex}, report=report, image=rgb, z=z, z0=z0, decoded=decoded
    )


# ---------------------------------------------------------------------------
# first-order updates
# ---------------------------------------------------------------------------


class _Adam:
    """Float64 Adam for a named set of arrays, one learning rate each."""

    def __init__(self, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def update(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if name not in self.m:
            self.m[name] = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)
            self.steps[name] = 0
        self.steps[name] += 1
        k = self.steps[name]
        self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
        mhat = self.m[name] / (1 - self.beta1**k)
        vhat = self.v[name] / (1 - self.beta2**k)
        return value - self.lrs[name] * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# joint loop
# ---------------------------------------------------------------------------


def _frame_targets(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Body center and an approximate head center (top of the longest axis)."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    up = int(np.argmax(hi - lo))
    cut = hi[up] - 0.18 * (hi[up] - lo[up])
    crown = mesh.vertices[mesh.vertices[:, up] >= cut]
    head = crown.mean(axis=0) if len(crown) else center
    return center, head


def _iteration_camera(
    spec: CameraSpec,
    rng: np.random.Generator,
    mesh: Mesh,
    resolution: tuple[int, int],
) -> Camera:
    if spec.mode == "fixed":
        return perspective_camera(spec.eye, spec.target, resolution, spec.fov_deg)
    center, head = _frame_targets(mesh)
    # consume the head/body coin even when head_prob is 0 or 1 so toggling it
    # does not shift every later random draw
    pick_head = rng.uniform() < spec.head_prob
    target = head if pick_head else center
    dist = spec.head_distance if pick_head else spec.distance
    return sample_camera(
        rng, target, dist, resolution, spec.fov_deg, spec.elevation_range_deg
    )


def optimize(
    template: BodyTemplate,
    init_params: BodyParams,
    predictor_n: NoisePredictor,
    predictor_r: NoisePredictor,
    prompt_n: str,
    prompt_r: str,
    cfg: OptimizerConfig,
    schedule: NoiseSchedule | None = None,
    *,
    telemetry_path: str | os.PathLike | None = None,
    callback: Callable[[int, BodyParams, SDSGradReport], None] | None = None,
) -> tuple[BodyParams, list[SDSGradReport]]:
    """Joint geometry+texture loop.

    Geometry groups update until ``geo_freeze_iter``; the texture updates on
    every one of ``tex_iters`` iterations.  The normal branch always renders
    at the ladder's final size; the RGB branch climbs the ladder.  The whole
    trajectory is a pure function of (inputs, cfg.seed).
    """
    cfg.validate()
    schedule = schedule or linear_beta_schedule()
    rng = np.random.default_rng(cfg.seed)
    params = init_params.copy()
    _, maps = subdivide_with_maps(template_rest_mesh(template), cfg.subdivision_levels)

    top = cfg.resolution_ladder[-1][1]
    lo_f, hi_f = cfg.t_fraction_range
    t_lo = max(1, int(round(lo_f * schedule.steps)))
    t_hi = max(t_lo, int(round(hi_f * schedule.steps)))

    adam = _Adam(
        {
            "beta": cfg.lr_shape,
            "psi": cfg.lr_expr,
            "displacement": cfg.lr_displacement,
            "texture": cfg.lr_texture,
        }
    )
    log: list[SDSGradReport] = []

    for it in range(cfg.tex_iters):
        res = hierarchical_schedule(it, cfg.resolution_ladder)
        mesh_now = canonical_human(template, params, cfg.subdivision_levels)
        camera = _iteration_camera(cfg.camera, rng, mesh_now, (top, top))
        t = int(rng.integers(t_lo, t_hi + 1))
        skipped: list[str] = []

        report = SDSGradReport(iteration=it, t=t, resolution=res)

        if it < cfg.geo_freeze_iter:
            geo = geo_step(
                params, template, camera, predictor_n, prompt_n, t, cfg, schedule,
                rng=rng, maps=maps,
            )
            report.grad_norm_geo_latent = geo.report.grad_norm_geo_latent
            report.grad_norm_recon_n = geo.report.grad_norm_recon_n
            report.loss_recon_n = geo.report.loss_recon_n
            norms = {k: float(np.linalg.norm(g)) for k, g in geo.grads.items()}
            if max(norms.values()) * cfg.lambda_geo > cfg.grad_ceiling:
                skipped.append("geo")
            else:
                for name in ("beta", "psi", "displacement"):
                    new = adam.update(
                        name, getattr(params, name), cfg.lambda_geo * geo.grads[name]
                    )
                    setattr(params, name, new)

        tex = tex_step(
            params, template, camera.with_resolution((res, res)),
            predictor_r, prompt_r, t, cfg, schedule, rng=rng,
        )
        report.grad_norm_tex_latent = tex.report.grad_norm_tex_latent
        report.grad_norm_recon_r = tex.report.grad_norm_recon_r
        report.loss_recon_r = tex.report.loss_recon_r
        if float(np.linalg.norm(tex.grads["texture"])) * cfg.lambda_tex > cfg.grad_ceiling:
            skipped.append("tex")
        else:
            params.texture = np.clip(
                adam.update("texture", params.texture, cfg.lambda_tex * tex.grads["texture"]),
                0.0,
                1.0,
            )

        report.skipped = "+".join(skipped)
        report.validate()
        log.append(report)
        if callback is not None:
            callback(it, params, report)

    if telemetry_path is not None:
        write_telemetry(telemetry_path, log)
    return params, log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, params: BodyParams) -> None:
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_FORMAT_VERSION),
        dims=np.array(
            [
                params.beta.shape[0],
                params.theta.shape[0],
                params.psi.shape[0],
                params.displacement.shape[0],
                params.texture.shape[0],
                params.texture.shape[1],
            ],
            dtype=np.int64,
        ),
        beta=params.beta,
        theta=params.theta,
        psi=params.psi,
        displacement=params.displacement,
        texture=params.texture,
    )


def load_checkpoint(path: str | os.PathLike) -> BodyParams:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"checkpoint format {version} unsupported "
                f"(expected {CHECKPOINT_FORMAT_VERSION})"
            )
        dims = data["dims"]
        params = BodyParams(
            beta=data["beta"].astype(np.float64),
            theta=data["theta"].astype(np.float64),
            psi=data["psi"].astype(np.float64),
            displacement=data["displacement"].astype(np.float64),
            texture=data["texture"].astype(np.float64),
        )
    expect = [
        params.beta.shape[0],
        params.theta.shape[0],
        params.psi.shape[0],
        params.displacement.shape[0],
        params.texture.shape[0],
        params.texture.shape[1],
    ]
    if list(dims) != expect:
        raise ValueError(f"checkpoint dims header {list(dims)} != payload dims {expect}")
    return params

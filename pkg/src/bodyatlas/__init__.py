"""Decoupled human-centered video editing.

The clip is split into a background atlas and a parametric human; each half
is edited independently (atlas image edit, score-distillation body fit) and
the result is recomposed with lighting-aware harmonization.
"""

from .atlas import (
    AtlasConfig,
    AtlasModel,
    VideoClip,
    discretize_atlas,
    propagate_edit,
    reconstruct,
    train_atlas,
)
from .body import (
    BodyParams,
    BodyTemplate,
    Mesh,
    animate_sequence,
    canonical_human,
    make_biped_template,
    regress_joints,
    skin,
)
from .diffusion import (
    NoiseSchedule,
    add_noise,
    decode,
    encode,
    linear_beta_schedule,
    one_step_x0,
)
from .harmonize import (
    HarmonizeParams,
    LightModel,
    ShadingDecomposition,
    compose,
    decompose,
    estimate_light,
    harmonize_albedo,
    shade_foreground,
    temporal_ema,
)
from .pipeline import MetricsReport, PipelineConfig, PipelineError, metrics, run
from .remote import ContractError, RemotePredictor, TransportError
from .render import Camera, FrameBuffer, perspective_camera, render
from .sds import OptimizerConfig, latent_residual_grad, optimize

__all__ = [
    "AtlasConfig",
    "AtlasModel",
    "BodyParams",
    "BodyTemplate",
    "Camera",
    "ContractError",
    "FrameBuffer",
    "HarmonizeParams",
    "LightModel",
    "Mesh",
    "MetricsReport",
    "NoiseSchedule",
    "OptimizerConfig",
    "PipelineConfig",
    "PipelineError",
    "RemotePredictor",
    "ShadingDecomposition",
    "TransportError",
    "VideoClip",
    "add_noise",
    "animate_sequence",
    "canonical_human",
    "compose",
    "decode",
    "decompose",
    "discretize_atlas",
    "encode",
    "estimate_light",
    "harmonize_albedo",
    "latent_residual_grad",
    "linear_beta_schedule",
    "make_biped_template",
    "metrics",
    "one_step_x0",
    "optimize",
    "perspective_camera",
    "propagate_edit",
    "reconstruct",
    "regress_joints",
    "render",
    "run",
    "shade_foreground",
    "skin",
    "temporal_ema",
    "train_atlas",
]

__version__ = "0.1.0"

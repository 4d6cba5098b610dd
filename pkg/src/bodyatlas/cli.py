"""Command-line surface.

One subcommand per stage plus ``run`` for the whole pipeline.  Every flag
maps onto a config field; precedence is explicit flag > config file >
built-in default.  Failures print a single JSON object to stderr (machine
readable) and exit nonzero; argparse usage errors keep their synopsis and
exit 2.

Environment: BODYATLAS_PREDICTOR_ENDPOINT / BODYATLAS_EDITOR_ENDPOINT /
BODYATLAS_REFINER_ENDPOINT override service endpoints, BODYATLAS_CACHE_DIR
sets the artifact cache, BODYATLAS_LOG_LEVEL the logging level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import atlas as atlas_mod
from . import body as body_mod
from . import harmonize as harm_mod
from . import imgio
from . import pipeline as pipe_mod
from . import sds as sds_mod
from .diffusion import ConstantTargetPredictor, linear_beta_schedule
from .remote import PREDICTOR_ENDPOINT_VAR, remote_predictor, resolve_endpoint
from .render import perspective_camera, render

log = logging.getLogger(__name__)


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z — got {text!r}")
    return tuple(parts)


def _pair(text: str) -> tuple[int, int]:
    parts = [int(v) for v in text.lower().split("x")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected WxH — got {text!r}")
    return tuple(parts)


def _load_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _merge(flag, config_value, default):
    """flag > config file > default."""
    if flag is not None:
        return flag
    if config_value is not None:
        return config_value
    return default


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_atlas_fit(args) -> int:
    conf = _load_json(args.config) if args.config else {}
    cfg_dict = dict(conf.get("atlas", {}))
    seed = _merge(args.seed, conf.get("seed"), 0)
    cfg_dict["seed"] = seed
    cfg = atlas_mod.AtlasConfig(**cfg_dict)
    iters = _merge(args.iters, conf.get("atlas_iters"), 20000)

    frames = imgio.load_frames(_merge(args.frames, conf.get("frames_dir"), None))
    masks_dir = _merge(args.masks, conf.get("masks_dir"), "")
    masks = imgio.load_masks(masks_dir) if masks_dir else None
    flow = None
    flow_path = _merge(args.flow, conf.get("flow_path"), "")
    if flow_path:
        flow = np.asarray(_load_json(flow_path), dtype=np.float64)
    clip = atlas_mod.VideoClip(frames=frames, foreground_masks=masks,
                               ground_truth_flow=flow)
    model = atlas_mod.train_atlas(clip, iters, cfg)
    atlas_mod.save_model(args.out, model)
    rec = np.stack([atlas_mod.reconstruct(model, i) for i in range(clip.frame_count)])
    print(json.dumps({
        "model": args.out,
        "psnr": pipe_mod.psnr(rec, frames),
        "frames": clip.frame_count,
    }))
    return 0


def _cmd_atlas_edit(args) -> int:
    model = atlas_mod.load_model(args.model)
    base = atlas_mod.discretize_atlas(model, args.atlas_resolution)
    if args.save_atlas:
        imgio.save_image(args.save_atlas, base)
    source = args.edited or resolve_endpoint(None, "BODYATLAS_EDITOR_ENDPOINT")
    if source:
        edited = atlas_mod.request_atlas_edit(source, base, prompt=args.prompt)
    else:
        edited = base
    frames = [
        atlas_mod.propagate_edit(model, edited, i) for i in range(model.frame_count)
    ]
    imgio.save_frames(args.out, frames)
    print(json.dumps({"out": args.out, "frames": len(frames)}))
    return 0


def _cmd_human_optimize(args) -> int:
    conf = _load_json(args.config) if args.config else {}
    opt_conf = conf.get("optimizer", conf if "lambda_n" in conf else {})
    cfg = sds_mod.OptimizerConfig.from_dict(opt_conf) if opt_conf else sds_mod.OptimizerConfig()
    if args.lambda_preset:
        sds_mod.apply_lambda_preset(cfg, args.lambda_preset)
    cfg.seed = _merge(args.seed, conf.get("seed"), cfg.seed)
    cfg.validate()

    template = (
        body_mod.load_template(args.template)
        if args.template
        else body_mod.make_biped_template()
    )
    texture_size = _merge(args.texture_size, conf.get("texture_size"), 64)
    prompt = _merge(args.prompt, conf.get("prompt_human"), "")

    endpoint = resolve_endpoint(args.predictor_endpoint, PREDICTOR_ENDPOINT_VAR)
    if endpoint:
        pred = remote_predictor(endpoint, seed=cfg.seed)
        pred_n = pred_r = pred
    else:
        color = _merge(args.constant_color, conf.get("constant_color_human"),
                       (0.55, 0.45, 0.4))
        pred_n = pred_r = ConstantTargetPredictor(tuple(color), linear_beta_schedule())

    init = body_mod.BodyParams.zeros(template, cfg.subdivision_levels, texture_size)
    params, report_log = sds_mod.optimize(
        template, init, pred_n, pred_r, prompt, prompt, cfg,
        telemetry_path=args.telemetry,
    )
    sds_mod.save_checkpoint(args.out, params)
    print(json.dumps({
        "checkpoint": args.out,
        "iterations": len(report_log),
        "skipped": sum(1 for r in report_log if r.skipped),
    }))
    return 0


def _cmd_animate(args) -> int:
    template = (
        body_mod.load_template(args.template)
        if args.template
        else body_mod.make_biped_template()
    )
    params = sds_mod.load_checkpoint(args.checkpoint)
    mesh = body_mod.canonical_human(template, params, args.levels)
    joints = body_mod.regress_joints(template, params.beta)
    thetas, trans = pipe_mod.ingest_poses(args.poses, template)
    posed = body_mod.animate_sequence(mesh, thetas, joints, template.kinematic_tree)
    if trans is not None:
        for m, tvec in zip(posed, trans):
            m.vertices = m.vertices + np.asarray(tvec, dtype=np.float64)
    cam = perspective_camera(args.camera_eye, args.camera_target,
                             args.resolution, args.fov)
    os.makedirs(args.out, exist_ok=True)
    for i, m in enumerate(posed):
        fb = render(m, params.texture, cam)
        imgio.save_image(os.path.join(args.out, imgio.frame_name(i)), fb.rgb)
        imgio.save_mask(os.path.join(args.out, f"mask_{i:05d}.png"), fb.coverage)
        if args.normals:
            imgio.save_image(
                os.path.join(args.out, f"normal_{i:05d}.png"), fb.normal_image()
            )
    print(json.dumps({"out": args.out, "frames": len(posed)}))
    return 0


def _cmd_harmonize(args) -> int:
    bg = imgio.load_frames(args.bg)
    fg = imgio.load_frames(args.fg)
    masks = imgio.load_masks(args.masks)
    n = len(bg)
    lights, decs = [], []
    for i in range(n):
        dec = harm_mod.decompose(bg[i], args.mode)
        decs.append(dec)
        if args.bg_normals:
            normals = imgio.decode_normal_image(
                imgio.load_image(os.path.join(args.bg_normals, imgio.frame_name(i)))
            )
            lights.append(harm_mod.estimate_light(normals, dec.shading))
        else:
            lights.append(harm_mod.LightModel(
                direction=np.array([0.0, 0.0, 1.0]), intensity=0.0,
                ambient=float(np.mean(dec.shading)),
            ))
    lights = harm_mod.temporal_ema(lights, args.lambda_ema)
    os.makedirs(args.out, exist_ok=True)
    for i in range(n):
        normals = imgio.decode_normal_image(
            imgio.load_image(os.path.join(args.fg_normals, imgio.frame_name(i)))
        ) if args.fg_normals else np.zeros_like(fg[i])
        shading = harm_mod.shade_foreground(normals, lights[i])
        composite = harm_mod.compose(fg[i], shading, bg[i], masks[i])
        refined = harm_mod.refine_shading(
            args.hook, composite, shading, masks[i], normals,
            np.where(masks[i], 1.0, np.inf),
        )
        adjusted, _ = harm_mod.harmonize_albedo(
            fg[i], harm_mod.albedo_stats(decs[i].albedo), fg_mask=masks[i]
        )
        out = harm_mod.compose(adjusted, refined, bg[i], masks[i])
        imgio.save_image(os.path.join(args.out, imgio.frame_name(i)), out)
    print(json.dumps({"out": args.out, "frames": n}))
    return 0


def _cmd_compose(args) -> int:
    albedo = imgio.load_frames(args.albedo)
    bg = imgio.load_frames(args.bg)
    masks = imgio.load_masks(args.masks)
    os.makedirs(args.out, exist_ok=True)
    for i in range(len(bg)):
        if args.shading:
            shading = imgio.load_image(
                os.path.join(args.shading, imgio.frame_name(i))
            )[..., 0]
        else:
            shading = np.ones(bg[i].shape[:2])
        out = harm_mod.compose(albedo[i], shading, bg[i], masks[i])
        imgio.save_image(os.path.join(args.out, imgio.frame_name(i)), out)
    print(json.dumps({"out": args.out, "frames": len(bg)}))
    return 0


def _cmd_run(args) -> int:
    cfg = pipe_mod.PipelineConfig.load(args.config) if args.config else pipe_mod.PipelineConfig()
    if args.frames is not None:
        cfg.frames_dir = args.frames
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.atlas.seed = args.seed
        cfg.optimizer.seed = args.seed
    if args.edit_human is not None:
        cfg.edit_human = args.edit_human
    if args.edit_background is not None:
        cfg.edit_background = args.edit_background
    out_dir, report = pipe_mod.run(cfg)
    print(json.dumps({"out": out_dir, **report.to_dict()}))
    return 0


def _cmd_metrics(args) -> int:
    outputs = imgio.load_frames(args.out_dir)
    references = imgio.load_frames(args.ref) if args.ref else None
    flow = np.asarray(_load_json(args.flow), dtype=np.float64) if args.flow else None
    report = pipe_mod.metrics(outputs, references, flow)
    if args.report:
        report.save(args.report)
    print(json.dumps(report.to_dict()))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bodyatlas",
        description="Decoupled video editing: atlas background, parametric "
        "human, lighting-aware compositing.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("atlas-fit", help="train a background atlas on a clip")
    fit.add_argument("--frames", help="input frame directory")
    fit.add_argument("--masks", help="foreground mask directory")
    fit.add_argument("--flow", help="JSON file of per-step global (dx, dy)")
    fit.add_argument("--iters", type=int, help="training iterations")
    fit.add_argument("--out", required=True, help="output model .npz")
    fit.add_argument("--config", help="JSON config file")
    fit.add_argument("--seed", type=int)
    fit.set_defaults(fn=_cmd_atlas_fit)

    ed = sub.add_parser("atlas-edit", help="propagate an edited atlas to frames")
    ed.add_argument("--model", required=True, help="trained atlas model .npz")
    ed.add_argument("--edited", help="edited atlas: file path or http(s) endpoint")
    ed.add_argument("--prompt", default="", help="edit prompt for a remote editor")
    ed.add_argument("--atlas-resolution", type=_pair,
                    default=atlas_mod.DEFAULT_ATLAS_RESOLUTION, help="WxH")
    ed.add_argument("--save-atlas", help="also write the unedited atlas PNG here")
    ed.add_argument("--out", required=True, help="output frame directory")
    ed.set_defaults(fn=_cmd_atlas_edit)

    ho = sub.add_parser("human-optimize", help="score-distillation body fit")
    ho.add_argument("--out", required=True, help="output checkpoint .npz")
    ho.add_argument("--config", help="optimizer JSON config")
    ho.add_argument("--template", help="body template .npz (default: built-in biped)")
    ho.add_argument("--texture-size", type=int)
    ho.add_argument("--prompt")
    ho.add_argument("--lambda-preset", choices=sorted(sds_mod.LAMBDA_PRESETS))
    ho.add_argument("--predictor-endpoint", help="remote noise predictor URL")
    ho.add_argument("--constant-color", type=_triple,
                    help="r,g,b target for the built-in oracle predictor")
    ho.add_argument("--telemetry", help="per-iteration CSV path")
    ho.add_argument("--seed", type=int)
    ho.set_defaults(fn=_cmd_human_optimize)

    an = sub.add_parser("animate", help="pose a checkpoint along a track and render")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--poses", required=True, help="pose sequence file")
    an.add_argument("--template", help="body template .npz")
    an.add_argument("--levels", type=int, default=1, help="subdivision levels")
    an.add_argument("--camera-eye", type=_triple, default=(2.1, 0.4, 0.5))
    an.add_argument("--camera-target", type=_triple, default=(0.0, 0.0, 0.42))
    an.add_argument("--fov", type=float, default=45.0)
    an.add_argument("--resolution", type=_pair, default=(256, 256), help="WxH")
    an.add_argument("--normals", action="store_true", help="also write normal maps")
    an.add_argument("--out", required=True, help="output frame directory")
    an.set_defaults(fn=_cmd_animate)

    hz = sub.add_parser("harmonize", help="relight rendered frames into a background")
    hz.add_argument("--bg", required=True, help="background frame directory")
    hz.add_argument("--fg", required=True, help="foreground (albedo) frame directory")
    hz.add_argument("--masks", required=True, help="foreground mask directory")
    hz.add_argument("--fg-normals", help="foreground normal-map directory")
    hz.add_argument("--bg-normals", help="background normal-map directory")
    hz.add_argument("--mode", default="retinex", choices=["retinex", "groundTruth"])
    hz.add_argument("--hook", default="passthrough",
                    help="passthrough | bilateralSmooth | http(s) endpoint")
    hz.add_argument("--lambda-ema", type=float, default=0.5)
    hz.add_argument("--out", required=True)
    hz.set_defaults(fn=_cmd_harmonize)

    co = sub.add_parser("compose", help="albedo x shading over background by mask")
    co.add_argument("--albedo", required=True, help="foreground albedo directory")
    co.add_argument("--shading", help="grayscale shading directory (default: ones)")
    co.add_argument("--bg", required=True)
    co.add_argument("--masks", required=True)
    co.add_argument("--out", required=True)
    co.set_defaults(fn=_cmd_compose)

    rn = sub.add_parser("run", help="full pipeline from a config file")
    rn.add_argument("--config", help="pipeline JSON config")
    rn.add_argument("--frames", help="override frames_dir")
    rn.add_argument("--out", help="override output_dir")
    rn.add_argument("--seed", type=int, help="thread one seed through every module")
    rn.add_argument("--edit-human", dest="edit_human", action="store_true", default=None)
    rn.add_argument("--no-edit-human", dest="edit_human", action="store_false")
    rn.add_argument("--edit-background", dest="edit_background", action="store_true",
                    default=None)
    rn.add_argument("--no-edit-background", dest="edit_background", action="store_false")
    rn.set_defaults(fn=_cmd_run)

    me = sub.add_parser("metrics", help="PSNR / warp-error report")
    me.add_argument("--out", dest="out_dir", required=True, help="output frames")
    me.add_argument("--ref", help="reference frames")
    me.add_argument("--flow", help="JSON per-step global flow")
    me.add_argument("--report", help="write the report JSON here")
    me.set_defaults(fn=_cmd_metrics)

    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("BODYATLAS_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 — boundary: everything becomes JSON
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())

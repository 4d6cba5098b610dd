"""Command-line behavior: stdout contracts, error JSON, exit codes."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest

from bodyatlas import body, imgio
from bodyatlas.cli import main

from conftest import write_frame_dir, write_mask_dir


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def _frames(tmp_path, name="frames", n=3, h=12, w=16):
    rng = np.random.default_rng(0)
    frames = [np.clip(rng.random((h, w, 3)), 0, 1) for _ in range(n)]
    return write_frame_dir(tmp_path / name, frames), frames


def test_usage_error_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["definitely-not-a-command"])
    assert exc.value.code == 2


def test_errors_become_json_on_stderr(tmp_path, capsys):
    code, out, err = _run(
        capsys, "metrics", "--out", str(tmp_path / "missing")
    )
    assert code == 1
    payload = json.loads(err)
    assert payload["error"] == "ValueError" or payload["error"] == "FileNotFoundError"
    assert "message" in payload


def test_metrics_self_comparison(tmp_path, capsys):
    fdir, _ = _frames(tmp_path)
    report_path = tmp_path / "rep.json"
    code, out, _ = _run(
        capsys, "metrics", "--out", fdir, "--ref", fdir, "--report", str(report_path)
    )
    assert code == 0
    payload = json.loads(out)
    assert payload["psnr_mean"] == 99.0
    assert json.loads(report_path.read_text())["psnr_mean"] == 99.0


def test_compose_writes_frames(tmp_path, capsys):
    fdir, frames = _frames(tmp_path, "albedo")
    bdir, _ = _frames(tmp_path, "bg")
    masks = [np.zeros((12, 16), bool) for _ in range(3)]
    for m in masks:
        m[4:8, 6:12] = True
    mdir = write_mask_dir(tmp_path / "masks", masks)
    out_dir = tmp_path / "composed"
    code, out, _ = _run(
        capsys, "compose", "--albedo", fdir, "--bg", bdir,
        "--masks", mdir, "--out", str(out_dir),
    )
    assert code == 0
    assert json.loads(out)["frames"] == 3
    got = imgio.load_frames(out_dir)
    assert got.shape == (3, 12, 16, 3)


def test_atlas_fit_and_edit(tmp_path, capsys):
    img = np.zeros((10, 12, 3))
    img[...] = np.linspace(0.2, 0.8, 12)[None, :, None]
    fdir = write_frame_dir(tmp_path / "clip", [img] * 2)
    model_path = tmp_path / "atlas.npz"
    code, out, _ = _run(
        capsys, "atlas-fit", "--frames", fdir, "--iters", "120",
        "--out", str(model_path), "--seed", "1",
    )
    assert code == 0
    assert json.loads(out)["frames"] == 2
    assert model_path.exists()

    out_dir = tmp_path / "propagated"
    atlas_png = tmp_path / "atlas.png"
    code, out, _ = _run(
        capsys, "atlas-edit", "--model", str(model_path),
        "--atlas-resolution", "24x20", "--save-atlas", str(atlas_png),
        "--out", str(out_dir),
    )
    assert code == 0
    assert atlas_png.exists()
    assert imgio.load_frames(out_dir).shape == (2, 10, 12, 3)


def test_human_optimize_then_animate(tmp_path, capsys, biped_small):
    tpl_path = tmp_path / "tpl.npz"
    body.save_template(tpl_path, biped_small)
    cfg_path = tmp_path / "opt.json"
    cfg_path.write_text(json.dumps({
        "optimizer": {
            "geo_freeze_iter": 1,
            "tex_iters": 2,
            "resolution_ladder": [[0, 24]],
            "latent_factor": 2,
            "camera": {
                "mode": "fixed", "eye": [1.75, 0.42, 0.5], "target": [0, 0, 0.42],
            },
        },
        "texture_size": 16,
    }))
    ckpt = tmp_path / "human.npz"
    telem = tmp_path / "telemetry.csv"
    code, out, _ = _run(
        capsys, "human-optimize", "--out", str(ckpt), "--config", str(cfg_path),
        "--template", str(tpl_path), "--lambda-preset", "weak",
        "--constant-color", "0.6,0.4,0.3", "--telemetry", str(telem), "--seed", "2",
    )
    assert code == 0
    assert json.loads(out)["iterations"] == 2
    assert ckpt.exists() and telem.exists()

    poses = tmp_path / "poses.txt"
    thetas = np.zeros((2, biped_small.joint_count, 3))
    thetas[1, 2, 1] = 0.3
    body.save_pose_sequence(poses, thetas, None)
    render_dir = tmp_path / "rendered"
    code, out, _ = _run(
        capsys, "animate", "--checkpoint", str(ckpt), "--poses", str(poses),
        "--template", str(tpl_path), "--resolution", "32x32",
        "--out", str(render_dir), "--normals",
    )
    assert code == 0
    assert json.loads(out)["frames"] == 2
    assert imgio.load_frames(render_dir).shape == (2, 32, 32, 3)
    assert (render_dir / "mask_00000.png").exists()
    assert (render_dir / "normal_00001.png").exists()


def test_run_pass_through_flags(tmp_path, capsys):
    fdir, _ = _frames(tmp_path)
    out_dir = tmp_path / "copied"
    code, out, _ = _run(
        capsys, "run", "--frames", fdir, "--out", str(out_dir),
        "--no-edit-human", "--no-edit-background",
    )
    assert code == 0
    for i in range(3):
        src = open(os.path.join(fdir, imgio.frame_name(i)), "rb").read()
        dst = open(out_dir / imgio.frame_name(i), "rb").read()
        assert src == dst


def test_harmonize_command(tmp_path, capsys):
    rng = np.random.default_rng(3)
    bg = [np.clip(0.3 + 0.4 * rng.random((16, 16, 3)), 0, 1) for _ in range(2)]
    fg = [np.full((16, 16, 3), 0.6) for _ in range(2)]
    masks = [np.zeros((16, 16), bool) for _ in range(2)]
    for m in masks:
        m[5:11, 5:11] = True
    bdir = write_frame_dir(tmp_path / "bg", bg)
    fdir = write_frame_dir(tmp_path / "fg", fg)
    mdir = write_mask_dir(tmp_path / "m", masks)
    out_dir = tmp_path / "harmonized"
    code, out, _ = _run(
        capsys, "harmonize", "--bg", bdir, "--fg", fdir, "--masks", mdir,
        "--out", str(out_dir), "--lambda-ema", "0.5",
    )
    assert code == 0
    got = imgio.load_frames(out_dir)
    assert got.shape == (2, 16, 16, 3)
    # background pixels pass through untouched
    np.testing.assert_allclose(got[0][~masks[0]], _q(bg[0])[~masks[0]], atol=1e-12)


def _q(img):
    return np.round(np.asarray(img) * 255) / 255

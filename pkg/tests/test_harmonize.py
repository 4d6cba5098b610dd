"""Lighting-aware compositing: decomposition, light fits, statistics matching."""

from __future__ import annotations

import numpy as np
import pytest

from bodyatlas.harmonize import (
    AlbedoStats,
    HarmonizeParams,
    LightModel,
    ShadingDecomposition,
    albedo_stats,
    compose,
    decompose,
    estimate_light,
    harmonize_albedo,
    refine_shading,
    shade_foreground,
    temporal_ema,
)

from conftest import sphere_normals


def test_shading_decomposition_validates():
    with pytest.raises(ValueError):
        ShadingDecomposition(
            albedo=np.zeros((4, 4, 3)), shading=-np.ones((4, 4))
        ).validate()
    dec = ShadingDecomposition(albedo=np.full((2, 2, 3), 0.5), shading=np.full((2, 2), 3.0))
    np.testing.assert_allclose(dec.reconstruct(), 1.0)  # clipped product


def test_decompose_ground_truth_passthrough():
    albedo = np.random.default_rng(0).random((6, 6, 3))
    shading = np.random.default_rng(1).random((6, 6)) + 0.2
    dec = decompose(None, "groundTruth", albedo=albedo, shading=shading)
    np.testing.assert_array_equal(dec.albedo, albedo)
    np.testing.assert_array_equal(dec.shading, shading)


def test_decompose_retinex_reconstructs():
    rng = np.random.default_rng(2)
    img = np.clip(0.25 + 0.5 * rng.random((24, 24, 3)), 0, 1)
    dec = decompose(img, "retinex")
    assert np.all(dec.shading >= 0)
    assert np.all(dec.albedo >= 0) and np.all(dec.albedo <= 1)
    # self-consistent wherever the albedo ratio was not clipped at 1
    recon = dec.albedo * dec.shading[..., None]
    unclipped = dec.albedo < 1.0 - 1e-9
    np.testing.assert_allclose(recon[unclipped], img[unclipped], atol=1e-9)
    assert unclipped.mean() > 0.3


def test_decompose_rejects_unknown_mode():
    with pytest.raises(ValueError):
        decompose(np.zeros((4, 4, 3)), "magic")


def test_estimate_light_recovers_directional_source():
    normals, mask = sphere_normals(48)
    true = LightModel(
        direction=np.array([0.3, -0.2, 0.93]) / np.linalg.norm([0.3, -0.2, 0.93]),
        intensity=0.8,
        ambient=0.25,
    )
    shading = shade_foreground(normals, true)
    fit = estimate_light(normals, shading, mask)
    assert float(fit.direction @ true.direction) > 0.999
    assert abs(fit.intensity - true.intensity) < 1e-3
    assert abs(fit.ambient - true.ambient) < 1e-3


def test_estimate_light_flat_normals_raise_unless_allowed():
    normals = np.zeros((8, 8, 3))
    normals[..., 2] = 1.0
    shading = np.full((8, 8), 0.7)
    with pytest.raises(ValueError, match="allow_degenerate"):
        estimate_light(normals, shading)
    fit = estimate_light(normals, shading, allow_degenerate=True)
    assert np.isfinite(fit.intensity) and np.isfinite(fit.ambient)


def test_shade_foreground_clamps_backfacing():
    light = LightModel(direction=np.array([0.0, 0.0, 1.0]), intensity=1.0, ambient=0.1)
    normals = np.zeros((1, 2, 3))
    normals[0, 0] = [0, 0, 1.0]
    normals[0, 1] = [0, 0, -1.0]
    s = shade_foreground(normals, light)
    np.testing.assert_allclose(s[0, 0], 1.1)
    np.testing.assert_allclose(s[0, 1], 0.1)  # facing away: ambient only


def test_harmonize_albedo_identity_on_matched_stats():
    rng = np.random.default_rng(3)
    fg = np.clip(0.2 + 0.5 * rng.random((10, 10, 3)), 0, 1)
    # background albedo = permutation of the same pixels -> identical stats
    perm = rng.permutation(100)
    bg = fg.reshape(-1, 3)[perm].reshape(10, 10, 3)
    out, params = harmonize_albedo(fg, albedo_stats(bg))
    assert params.exposure == pytest.approx(1.0, abs=1e-9)
    assert params.gamma == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(params.white_balance, 1.0, atol=1e-9)
    np.testing.assert_allclose(out, fg, atol=1e-9)


def test_harmonize_albedo_matches_log_moments():
    rng = np.random.default_rng(4)
    fg = np.clip(0.15 + 0.6 * rng.random((16, 16, 3)), 0.02, 1)
    bg = np.clip(0.4 + 0.4 * rng.random((16, 16, 3)), 0.02, 1)
    out, _ = harmonize_albedo(fg, albedo_stats(bg))
    got = albedo_stats(np.clip(out, 1e-4, 1))
    want = albedo_stats(bg)
    # per-channel means match; stds match up to the pooled-gamma compromise
    np.testing.assert_allclose(got.mean_log, want.mean_log, atol=5e-3)
    assert abs(got.std_log.mean() - want.std_log.mean()) < 5e-3


def test_harmonize_albedo_with_explicit_params():
    fg = np.full((4, 4, 3), 0.5)
    params = HarmonizeParams(
        exposure=2.0, white_balance=np.array([1.0, 0.5, 1.0]), gamma=1.0
    )
    out, back = harmonize_albedo(fg, AlbedoStats(np.zeros(3), np.ones(3)), params)
    assert back is params
    np.testing.assert_allclose(out[0, 0], [1.0, 0.5, 1.0])  # e*w*0.5, clipped at 1


def test_harmonize_params_validate():
    with pytest.raises(ValueError):
        HarmonizeParams(exposure=-1.0, white_balance=np.ones(3), gamma=1.0).validate()
    with pytest.raises(ValueError):
        HarmonizeParams(exposure=1.0, white_balance=np.zeros(3), gamma=1.0).validate()


def test_refine_shading_passthrough_and_smooth():
    rng = np.random.default_rng(5)
    shading = 0.6 + 0.05 * rng.standard_normal((20, 20))
    shading[8:12, 8:12] += 0.5  # a real edge the filter should keep
    mask = np.ones((20, 20), bool)
    normals = np.zeros((20, 20, 3))
    normals[..., 2] = 1.0
    composite = np.clip(np.repeat(shading[..., None], 3, axis=-1), 0, 1)
    depth = np.ones((20, 20))

    kept = refine_shading("passthrough", composite, shading, mask, normals, depth)
    np.testing.assert_array_equal(kept, shading)

    smooth = refine_shading("bilateralSmooth", composite, shading, mask, normals, depth)
    flat = np.s_[2:6, 2:6]
    assert smooth[flat].std() < shading[flat].std()
    # the bright plateau survives
    assert smooth[9:11, 9:11].mean() > smooth[flat].mean() + 0.3


def test_refine_shading_unknown_hook():
    z = np.zeros((4, 4))
    with pytest.raises(ValueError):
        refine_shading("polish", np.zeros((4, 4, 3)), z, np.ones((4, 4), bool),
                       np.zeros((4, 4, 3)), z)


def test_compose_selects_by_mask():
    fg = np.full((4, 4, 3), 0.8)
    shading = np.full((4, 4), 0.5)
    bg = np.zeros((4, 4, 3))
    mask = np.zeros((4, 4), bool)
    mask[1:3, 1:3] = True
    out = compose(fg, shading, bg, mask)
    np.testing.assert_allclose(out[1, 1], 0.4)
    np.testing.assert_allclose(out[0, 0], 0.0)
    with pytest.raises(ValueError):
        compose(fg, shading, np.zeros((5, 4, 3)), mask)


def test_temporal_ema_scalar_sequence():
    out = temporal_ema([0.0, 1.0, 1.0, 1.0], 0.5)
    np.testing.assert_allclose(out, [0.0, 0.5, 0.75, 0.875])
    np.testing.assert_allclose(temporal_ema([3.0, 9.0], 0.0), [3.0, 9.0])


def test_temporal_ema_arrays_and_params():
    seq = [np.array([0.0, 2.0]), np.array([2.0, 0.0])]
    out = temporal_ema(seq, 0.5)
    np.testing.assert_allclose(out[1], [1.0, 1.0])

    p0 = HarmonizeParams(exposure=1.0, white_balance=np.ones(3), gamma=1.0)
    p1 = HarmonizeParams(exposure=3.0, white_balance=np.full(3, 2.0), gamma=2.0)
    smoothed = temporal_ema([p0, p1], 0.5)
    assert smoothed[1].exposure == pytest.approx(2.0)
    assert smoothed[1].gamma == pytest.approx(1.5)


def test_temporal_ema_lights_keep_unit_direction():
    l0 = LightModel(direction=np.array([1.0, 0, 0]), intensity=1.0, ambient=0.0)
    l1 = LightModel(direction=np.array([0.0, 1.0, 0]), intensity=3.0, ambient=0.2)
    out = temporal_ema([l0, l1], 0.5)
    assert np.linalg.norm(out[1].direction) == pytest.approx(1.0)
    assert out[1].intensity == pytest.approx(2.0)
    np.testing.assert_allclose(
        out[1].direction, np.array([1.0, 1.0, 0]) / np.sqrt(2), atol=1e-12
    )

"""Software rasterizer with frozen-coverage analytic gradients.

The forward pass projects a triangle mesh through a pinhole camera, resolves
visibility with a z-buffer, and shades every covered pixel by bilinear
texture lookup at perspective-correct barycentric uv, alongside an
interpolated-vertex-normal buffer.  The per-pixel triangle assignment and
barycentric weights are retained (``tri_id`` / ``bary``), which makes the
shading a closed-form function of vertex positions and texture; the backward
pass differentiates exactly that function with coverage held fixed, so the
gradients are verifiable against finite differences of the frozen re-shading
(:func:`render_frozen`).

Camera convention: camera space has +x right, +y down, +z forward; a point
``p`` maps to pixel ``(focal * x / z + cx, focal * y / z + cy)`` where pixel
centers sit at integer + 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import Mesh

# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera rigid
    transform ``p_cam = rotation @ p_world + translation``."""

    focal: float
    principal: tuple[float, float]
    rotation: np.ndarray
    translation: np.ndarray
    resolution: tuple[int, int]  # (width, height)

    def validate(self) -> None:
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be orthonormal")

    def with_resolution(self, resolution: tuple[int, int]) -> "Camera":
        """Same view at another resolution (intrinsics scaled along)."""
        sx = resolution[0] / self.resolution[0]
        sy = resolution[1] / self.resolution[1]
        return Camera(
            focal=self.focal * sx,
            principal=(self.principal[0] * sx, self.principal[1] * sy),
            rotation=np.asarray(self.rotation, dtype=np.float64).copy(),
            translation=np.asarray(self.translation, dtype=np.float64).copy(),
            resolution=(int(resolution[0]), int(resolution[1])),
        )


def look_at(
    eye, target, up=(0.0, 0.0, 1.0)
) -> tuple[np.ndarray, np.ndarray]:
    """Rotation/translation for a camera at ``eye`` looking at ``target``.

    The image y axis points against world ``up`` (rows grow downward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("view direction parallel to up vector")
    right /= nr
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ eye
    return rotation, translation


def perspective_camera(
    eye, target, resolution: tuple[int, int], fov_deg: float = 45.0, up=(0.0, 0.0, 1.0)
) -> Camera:
    w, h = int(resolution[0]), int(resolution[1])
    focal = 0.5 * w / np.tan(np.deg2rad(fov_deg) * 0.5)
    rotation, translation = look_at(eye, target, up)
    cam = Camera(
        focal=focal,
        principal=(w * 0.5, h * 0.5),
        rotation=rotation,
        translation=translation,
        resolution=(w, h),
    )
    cam.validate()
    return cam


def sample_camera(
    rng: np.random.Generator,
    center,
    distance: float,
    resolution: tuple[int, int],
    fov_deg: float = 45.0,
    elevation_range_deg: tuple[float, float] = (-15.0, 30.0),
) -> Camera:
    """Uniform-azimuth orbit camera inside an elevation band, aimed at
    ``center`` from ``distance`` away."""
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = np.deg2rad(rng.uniform(*elevation_range_deg))
    center = np.asarray(center, dtype=np.float64)
    offset = distance * np.array(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ]
    )
    return perspective_camera(center + offset, center, resolution, fov_deg)


# ---------------------------------------------------------------------------
# frame buffer
# ---------------------------------------------------------------------------


@dataclass
class FrameBuffer:
    """Rasterization output plus the aux data the gradient ops need.

    ``normal`` holds unit camera-space normals on covered pixels (zeros
    elsewhere); :meth:`normal_image` gives the (n+1)/2-encoded color map with
    0.5 background.  ``depth`` is camera-space z, +inf where uncovered.
    """

    rgb: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    coverage: np.ndarray
    tri_id: np.ndarray
    bary: np.ndarray
    camera: Camera
    texture_shape: tuple[int, int]
    background: np.ndarray
    degenerate_skipped: int = 0
    clipped_skipped: int = 0

    def normal_image(self) -> np.ndarray:
        img = np.full(self.normal.shape, 0.5)
        img[self.coverage] = (self.normal[self.coverage] + 1.0) * 0.5
        return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

_Z_NEAR = 1e-6


def _camera_space(mesh_vertices: np.ndarray, camera: Camera) -> np.ndarray:
    r = np.asarray(camera.rotation, dtype=np.float64)
    t = np.asarray(camera.translation, dtype=np.float64)
    return mesh_vertices @ r.T + t


def _vertex_normals(verts_cam: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unit rows) in camera space."""
    v0 = verts_cam[faces[:, 0]]
    e1 = verts_cam[faces[:, 1]] - v0
    e2 = verts_cam[faces[:, 2]] - v0
    fn = np.cross(e1, e2)  # length = 2 * area: area weighting for free
    vn = np.zeros_like(verts_cam)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.maximum(norm, 1e-30)


def _bilinear_read(texture: np.ndarray, uv: np.ndarray):
    """Clamp-addressed bilinear fetch; returns colors and the scatter aux
    (corner indices and weights) shared with the adjoint."""
    th, tw = texture.shape[0], texture.shape[1]
    x = uv[:, 0] * tw - 0.5
    y = uv[:, 1] * th - 0.5
    x0 = np.clip(np.floor(x), 0, max(tw - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, max(th - 2, 0)).astype(np.int64)
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    colors = (
        texture[y0, x0] * w00[:, None]
        + texture[y0, x1] * w01[:, None]
        + texture[y1, x0] * w10[:, None]
        + texture[y1, x1] * w11[:, None]
    )
    aux = (y0, x0, y1, x1, w00, w01, w10, w11)
    return colors, aux


def _rasterize(verts_cam: np.ndarray, faces: np.ndarray, camera: Camera):
    """Z-buffered triangle assignment: per-pixel tri id and perspective-
    correct barycentrics.  Deterministic: triangles processed in order,
    strict depth comparison."""
    w, h = camera.resolution
    fx = camera.focal
    cx, cy = camera.principal
    z = verts_cam[:, 2]
    sx = fx * verts_cam[:, 0] / np.where(z > _Z_NEAR, z, 1.0) + cx
    sy = fx * verts_cam[:, 1] / np.where(z > _Z_NEAR, z, 1.0) + cy

    depth = np.full((h, w), np.inf)
    tri_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    degenerate = 0
    clipped = 0

    for f in range(len(faces)):
        i0, i1, i2 = faces[f]
        if z[i0] <= _Z_NEAR or z[i1] <= _Z_NEAR or z[i2] <= _Z_NEAR:
            clipped += 1
            continue
        x0, y0 = sx[i0], sy[i0]
        x1, y1 = sx[i1], sy[i1]
        x2, y2 = sx[i2], sy[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            degenerate += 1
            continue
        lo_c = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        hi_c = min(int(np.ceil(max(x0, x1, x2) - 0.5)), w - 1)
        lo_r = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        hi_r = min(int(np.ceil(max(y0, y1, y2) - 0.5)), h - 1)
        if lo_c > hi_c or lo_r > hi_r:
            continue
        cols = np.arange(lo_c, hi_c + 1) + 0.5
        rows = np.arange(lo_r, hi_r + 1) + 0.5
        px, py = np.meshgrid(cols, rows)
        # signed edge functions, normalized so inside means all >= 0
        e0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        e1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        e2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        l0, l1, l2 = e0 / area, e1 / area, e2 / area
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        # perspective-correct barycentrics and depth
        w0 = l0 / z[i0]
        w1 = l1 / z[i1]
        w2 = l2 / z[i2]
        denom = w0 + w1 + w2
        z_pix = 1.0 / np.maximum(denom, 1e-300)
        sub_depth = depth[lo_r : hi_r + 1, lo_c : hi_c + 1]
        win = inside & (z_pix < sub_depth)
        if not win.any():
            continue
        sub_depth[win] = z_pix[win]
        tri_id[lo_r : hi_r + 1, lo_c : hi_c + 1][win] = f
        b = np.stack([w0 * z_pix, w1 * z_pix, w2 * z_pix], axis=-1)
        bary[lo_r : hi_r + 1, lo_c : hi_c + 1][win] = b[win]
    return tri_id, bary, depth, degenerate, clipped


def _shade(
    mesh: Mesh,
    texture: np.ndarray,
    camera: Camera,
    tri_id: np.ndarray,
    bary: np.ndarray,
):
    """Re-shade pixels from fixed triangle assignments and barycentrics.

    Returns (rgb_covered (P, 3), normal_covered (P, 3) unit camera-space,
    covered index arrays) — the differentiable part of the render.
    """
    coverage = tri_id >= 0
    rows, cols = np.nonzero(coverage)
    tids = tri_id[rows, cols]
    b = bary[rows, cols]

    verts_cam = _camera_space(mesh.vertices, camera)
    tri = mesh.faces[tids]

    uv_pix = np.einsum("pk,pkd->pd", b, mesh.uv[tri])
    rgb, _ = _bilinear_read(texture, uv_pix)

    vn = _vertex_normals(verts_cam, mesh.faces)
    n_raw = np.einsum("pk,pkd->pd", b, vn[tri])
    n_len = np.linalg.norm(n_raw, axis=1, keepdims=True)
    n_unit = n_raw / np.maximum(n_len, 1e-30)
    return rgb, n_unit, rows, cols


def render(
    mesh: Mesh,
    texture: np.ndarray,
    camera: Camera,
    background: float | np.ndarray = 0.5,
) -> FrameBuffer:
    """Rasterize and shade a textured mesh.

    ``texture`` is (H, W, 3) in [0, 1]; uncovered pixels take the constant
    ``background`` color.  Degenerate (zero-area) and behind-camera triangles
    are skipped and tallied on the returned buffer.
    """
    if len(mesh.vertices) == 0 or len(mesh.faces) == 0:
        raise ValueError("mesh is empty")
    camera.validate()
    texture = np.asarray(texture, dtype=np.float64)
    w, h = camera.resolution
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()

    verts_cam = _camera_space(mesh.vertices, camera)
    tri_id, bary, depth, degenerate, clipped = _rasterize(verts_cam, mesh.faces, camera)
    coverage = tri_id >= 0

    rgb = np.tile(bg, (h, w, 1))
    normal = np.zeros((h, w, 3))
    if coverage.any():
        rgb_c, n_c, rows, cols = _shade(mesh, texture, camera, tri_id, bary)
        rgb[rows, cols] = rgb_c
        normal[rows, cols] = n_c
    return FrameBuffer(
        rgb=np.clip(rgb, 0.0, 1.0),
        normal=normal,
        depth=depth,
        coverage=coverage,
        tri_id=tri_id,
        bary=bary,
        camera=camera,
        texture_shape=(texture.shape[0], texture.shape[1]),
        background=bg,
        degenerate_skipped=degenerate,
        clipped_skipped=clipped,
    )


def render_frozen(
    mesh: Mesh, texture: np.ndarray, fb: FrameBuffer
) -> tuple[np.ndarray, np.ndarray]:
    """Re-shade with ``fb``'s frozen pixel-to-triangle assignment.

    Returns (rgb image, encoded normal image).  This is the exact forward
    model the gradient operators differentiate, so finite differences of
    this function validate them.
    """
    texture = np.asarray(texture, dtype=np.float64)
    h, w = fb.coverage.shape
    rgb = np.tile(fb.background, (h, w, 1))
    normal_img = np.full((h, w, 3), 0.5)
    if fb.coverage.any():
        rgb_c, n_c, rows, cols = _shade(mesh, texture, fb.camera, fb.tri_id, fb.bary)
        rgb[rows, cols] = rgb_c
        normal_img[rows, cols] = (n_c + 1.0) * 0.5
    return np.clip(rgb, 0.0, 1.0), np.clip(normal_img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# backward (frozen coverage)
# ---------------------------------------------------------------------------


def grad_texture(fb: FrameBuffer, mesh: Mesh, dL_dRGB: np.ndarray) -> np.ndarray:
    """Exact adjoint of the bilinear texture fetch.

    ``dL_dRGB`` is (h, w, 3); the result has the texture's shape.  Uncovered
    pixels contribute nothing (their color is a constant).
    """
    th, tw = fb.texture_shape
    grad = np.zeros((th, tw, 3))
    if not fb.coverage.any():
        return grad
    rows, cols = np.nonzero(fb.coverage)
    tids = fb.tri_id[rows, cols]
    b = fb.bary[rows, cols]
    uv_pix = np.einsum("pk,pkd->pd", b, mesh.uv[mesh.faces[tids]])
    _, (y0, x0, y1, x1, w00, w01, w10, w11) = _bilinear_read(grad, uv_pix)
    g = np.asarray(dL_dRGB, dtype=np.float64)[rows, cols]
    np.add.at(grad, (y0, x0), g * w00[:, None])
    np.add.at(grad, (y0, x1), g * w01[:, None])
    np.add.at(grad, (y1, x0), g * w10[:, None])
    np.add.at(grad, (y1, x1), g * w11[:, None])
    return grad


def grad_geometry(
    fb: FrameBuffer,
    mesh: Mesh,
    dL_dNormal: np.ndarray,
    dL_dRGB: np.ndarray | None = None,
) -> np.ndarray:
    """Frozen-coverage gradient of the normal buffer w.r.t. world vertices.

    ``dL_dNormal`` is (h, w, 3) against the unit camera-space normal buffer.
    Under frozen coverage the texture lookup does not depend on vertex
    positions (uv comes from frozen barycentrics), so ``dL_dRGB`` contributes
    zero and is accepted only for signature compatibility.

    The chain runs: pixel normal normalization -> barycentric blend ->
    vertex-normal normalization -> face-normal accumulation -> cross
    products -> camera rotation transpose.
    """
    del dL_dRGB  # no geometry path to RGB with frozen barycentric uv
    grad_world = np.zeros_like(mesh.vertices, dtype=np.float64)
    if not fb.coverage.any():
        return grad_world
    rows, cols = np.nonzero(fb.coverage)
    tids = fb.tri_id[rows, cols]
    b = fb.bary[rows, cols]
    faces = mesh.faces
    tri = faces[tids]

    verts_cam = _camera_space(mesh.vertices, fb.camera)

    # recompute the forward normal chain (cheap, keeps fb small)
    v0 = verts_cam[faces[:, 0]]
    e1 = verts_cam[faces[:, 1]] - v0
    e2 = verts_cam[faces[:, 2]] - v0
    fn = np.cross(e1, e2)
    vn_raw = np.zeros_like(verts_cam)
    for k in range(3):
        np.add.at(vn_raw, faces[:, k], fn)
    vn_len = np.linalg.norm(vn_raw, axis=1, keepdims=True)
    vn_len = np.maximum(vn_len, 1e-30)
    vn_hat = vn_raw / vn_len

    n_raw = np.einsum("pk,pkd->pd", b, vn_hat[tri])
    n_len = np.maximum(np.linalg.norm(n_raw, axis=1, keepdims=True), 1e-30)
    n_hat = n_raw / n_len

    # backward through pixel-normal normalization
    g_pix = np.asarray(dL_dNormal, dtype=np.float64)[rows, cols]
    g_n_raw = (g_pix - n_hat * np.sum(n_hat * g_pix, axis=1, keepdims=True)) / n_len

    # scatter to vertex normals via barycentric weights
    g_vn_hat = np.zeros_like(vn_hat)
    for k in range(3):
        np.add.at(g_vn_hat, tri[:, k], b[:, k : k + 1] * g_n_raw)

    # backward through vertex-normal normalization
    g_vn_raw = (
        g_vn_hat - vn_hat * np.sum(vn_hat * g_vn_hat, axis=1, keepdims=True)
    ) / vn_len

    # face normal gradient: each face's fn feeds its three vertices' sums
    g_fn = g_vn_raw[faces[:, 0]] + g_vn_raw[faces[:, 1]] + g_vn_raw[faces[:, 2]]

    # cross-product backward: fn = e1 x e2
    g_e1 = np.cross(e2, g_fn)
    g_e2 = np.cross(g_fn, e1)
    g_cam = np.zeros_like(verts_cam)
    np.add.at(g_cam, faces[:, 0], -(g_e1 + g_e2))
    np.add.at(g_cam, faces[:, 1], g_e1)
    np.add.at(g_cam, faces[:, 2], g_e2)

    # world frame
    grad_world = g_cam @ np.asarray(fb.camera.rotation, dtype=np.float64)
    return grad_world


# ---------------------------------------------------------------------------
# resolution ladder
# ---------------------------------------------------------------------------

DEFAULT_RESOLUTION_LADDER = ((0, 32), (50, 64), (100, 128), (150, 256), (200, 512))


def hierarchical_schedule(step: int, ladder=DEFAULT_RESOLUTION_LADDER) -> int:
    """Resolution for an optimization step on a monotone rung ladder."""
    if step < 0:
        raise ValueError("step must be >= 0")
    rungs = sorted(ladder)
    res = rungs[0][1]
    prev = res
    for start, r in rungs:
        if r < prev:
            raise ValueError("resolution ladder must be nondecreasing")
        prev = r
        if step >= start:
            res = r
    return res

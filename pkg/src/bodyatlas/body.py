"""Parametric body model.

A body is a canonical template mesh plus linear blend-shape bases (shape,
pose-corrective, expression), per-vertex displacements on a subdivided copy,
and linear blend skinning driven by a kinematic tree of axis-angle joint
rotations.  Templates at full scale follow the usual SMPL-X-like layout
(V = 10475, J = 54); the module also ships procedurally generated desk-scale
biped templates so everything is runnable and testable without licensed
assets.

Conventions: vertices are (V, 3) float64 in canonical units, faces are (F, 3)
int vertex indices, rotations are axis-angle (radians), the kinematic tree is
a parent-index array with -1 marking the root.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class BodyTemplate:
    """Canonical rest-pose template with all linear bases.

    Fields
    ------
    mean_shape : (V, 3) rest-pose vertex positions
    faces : (F, 3) triangle vertex indices
    shape_basis : (V, 3, S) linear shape basis
    pose_basis : (V, 3, P) pose-corrective basis, P = 9 * (J - 1)
    expr_basis : (V, 3, E) expression basis
    joint_regressor : (J, V) rows summing to 1
    skin_weights : (V, J) rows nonnegative, summing to 1
    uv : (V, 2) texture coordinates in [0, 1]^2
    kinematic_tree : (J,) parent index per joint, -1 for the root
    """

    mean_shape: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    pose_basis: np.ndarray
    expr_basis: np.ndarray
    joint_regressor: np.ndarray
    skin_weights: np.ndarray
    uv: np.ndarray
    kinematic_tree: np.ndarray

    @property
    def vertex_count(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def expr_dim(self) -> int:
        return self.expr_basis.shape[2]

    def validate(self) -> None:
        v = self.vertex_count
        j = self.joint_count
        if self.faces.min() < 0 or self.faces.max() >= v:
            raise ValueError("faces reference invalid vertex indices")
        _check_rows_sum_to_one(self.skin_weights, "skinWeights")
        if (self.skin_weights < -1e-9).any():
            raise ValueError("skinWeights must be nonnegative")
        _check_rows_sum_to_one(self.joint_regressor, "jointRegressor")
        if self.skin_weights.shape != (v, j):
            raise ValueError("skinWeights dims do not match vertices/joints")
        if self.pose_basis.shape[2] != 9 * (j - 1):
            raise ValueError(
                f"poseBasis must have 9*(J-1)={9 * (j - 1)} columns, "
                f"got {self.pose_basis.shape[2]}"
            )
        if (self.kinematic_tree < 0).sum() != 1:
            raise ValueError("kinematic tree must have exactly one root")
        _toposort_joints(self.kinematic_tree)  # raises on cycles
        _manifold_edges(self.faces)  # raises on >2 faces per edge


@dataclass
class BodyParams:
    """Optimizable parameters: shape, pose, expression, displacement, texture.

    ``displacement`` lives on the subdivided mesh, so its vertex count must
    match the template subdivided at the level the params are used with.
    ``texture`` is an (H, W, 3) map in [0, 1].
    """

    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    displacement: np.ndarray
    texture: np.ndarray

    @classmethod
    def zeros(
        cls, template: BodyTemplate, levels: int = 1, texture_size: int = 64
    ) -> "BodyParams":
        sub = subdivide(template_rest_mesh(template), levels)
        return cls(
            beta=np.zeros(template.shape_dim),
            theta=np.zeros((template.joint_count, 3)),
            psi=np.zeros(template.expr_dim),
            displacement=np.zeros((sub.vertices.shape[0], 3)),
            texture=np.full((texture_size, texture_size, 3), 0.5),
        )

    def copy(self) -> "BodyParams":
        return BodyParams(
            self.beta.copy(),
            self.theta.copy(),
            self.psi.copy(),
            self.displacement.copy(),
            self.texture.copy(),
        )


@dataclass
class Mesh:
    """A triangulated surface with per-vertex uv and skinning weights."""

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    skin_weights: np.ndarray

    def copy(self) -> "Mesh":
        return Mesh(
            self.vertices.copy(),
            self.faces.copy(),
            self.uv.copy(),
            self.skin_weights.copy(),
        )


def template_rest_mesh(template: BodyTemplate) -> Mesh:
    """The template's own geometry as a Mesh (no blend shapes applied)."""
    return Mesh(
        vertices=template.mean_shape.copy(),
        faces=template.faces.copy(),
        uv=template.uv.copy(),
        skin_weights=template.skin_weights.copy(),
    )


def _check_rows_sum_to_one(matrix: np.ndarray, name: str, tol: float = 1e-6) -> None:
    sums = matrix.sum(axis=1)
    worst = float(np.abs(sums - 1.0).max()) if len(sums) else 0.0
    if worst > tol:
        raise ValueError(f"{name} rows must sum to 1 (worst deviation {worst:.3g})")


def _toposort_joints(parents: np.ndarray) -> list[int]:
    """Joint evaluation order (parents first); raises on cycles."""
    n = len(parents)
    order: list[int] = []
    placed = np.zeros(n, dtype=bool)
    while len(order) < n:
        progressed = False
        for j in range(n):
            if placed[j]:
                continue
            p = int(parents[j])
            if p < 0 or placed[p]:
                order.append(j)
                placed[j] = True
                progressed = True
        if not progressed:
            raise ValueError("kinematic tree contains a cycle")
    return order


def _manifold_edges(faces: np.ndarray) -> dict:
    """Map undirected edge -> incident face count; rejects >2 incidences."""
    counts: dict[tuple[int, int], int] = {}
    for tri in np.asarray(faces):
        a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            counts[key] = counts.get(key, 0) + 1
            if counts[key] > 2:
                raise ValueError(f"non-manifold edge {key} shared by >2 faces")
    return counts


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    flat = aa.reshape(-1, 3)
    angle = np.linalg.norm(flat, axis=1)
    out = np.zeros((flat.shape[0], 3, 3))
    small = angle < 1e-12
    out[small] = np.eye(3)
    if (~small).any():
        a = angle[~small]
        axis = flat[~small] / a[:, None]
        x, y, z = axis[:, 0], axis[:, 1], axis[:, 2]
        zeros = np.zeros_like(x)
        k = np.stack(
            [zeros, -z, y, z, zeros, -x, -y, x, zeros], axis=1
        ).reshape(-1, 3, 3)
        sin = np.sin(a)[:, None, None]
        cos = np.cos(a)[:, None, None]
        out[~small] = np.eye(3) + sin * k + (1.0 - cos) * (k @ k)
    return out.reshape(aa.shape[:-1] + (3, 3))


def pose_feature(theta: np.ndarray) -> np.ndarray:
    """Flattened (R(theta_j) - I) over non-root joints: the pose-basis input."""
    rots = rodrigues(np.asarray(theta, dtype=np.float64))
    return (rots[1:] - np.eye(3)).reshape(-1)


# ---------------------------------------------------------------------------
# blend shapes and subdivision
# ---------------------------------------------------------------------------


def canonical_shape(
    template: BodyTemplate, beta: np.ndarray, theta: np.ndarray, psi: np.ndarray
) -> Mesh:
    """Rest-pose surface: meanShape + B_s(beta) + B_p(theta) + B_e(psi)."""
    beta = np.asarray(beta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if beta.shape != (template.shape_dim,):
        raise ValueError(
            f"beta has length {beta.shape}, template expects ({template.shape_dim},)"
        )
    if psi.shape != (template.expr_dim,):
        raise ValueError(
            f"psi has length {psi.shape}, template expects ({template.expr_dim},)"
        )
    if theta.shape != (template.joint_count, 3):
        raise ValueError(
            f"theta has shape {theta.shape}, template expects "
            f"({template.joint_count}, 3)"
        )
    verts = (
        template.mean_shape
        + template.shape_basis @ beta
        + template.pose_basis @ pose_feature(theta)
        + template.expr_basis @ psi
    )
    return Mesh(
        vertices=verts,
        faces=template.faces.copy(),
        uv=template.uv.copy(),
        skin_weights=template.skin_weights.copy(),
    )


def subdivide(mesh: Mesh, levels: int) -> Mesh:
    """Midpoint 1-to-4 triangle subdivision.

    New vertices sit at edge midpoints; their uv and skinning weights are the
    averages of the edge endpoints' values (weight rows renormalized).
    """
    out, _ = subdivide_with_maps(mesh, levels)
    return out


def subdivide_with_maps(mesh: Mesh, levels: int) -> tuple[Mesh, list[np.ndarray]]:
    """Like :func:`subdivide` but also returns per-level parent maps.

    Each map is an (V_new, 2) int array: row k holds the parent vertex pair
    of output vertex k (both entries equal for vertices carried over).  The
    maps make the subdivision's linear dependence explicit so gradients can
    be folded back to the base mesh (see :func:`fold_to_base`).
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    current = mesh.copy()
    maps: list[np.ndarray] = []
    for _ in range(levels):
        current, parents = _subdivide_once(current)
        maps.append(parents)
    return current, maps


def _subdivide_once(mesh: Mesh) -> tuple[Mesh, np.ndarray]:
    edge_counts = _manifold_edges(mesh.faces)
    n = mesh.vertices.shape[0]
    edge_index: dict[tuple[int, int], int] = {}
    parents = [(i, i) for i in range(n)]
    for edge in sorted(edge_counts):
        edge_index[edge] = n + len(edge_index)
        parents.append(edge)
    parents_arr = np.asarray(parents, dtype=np.int64)

    a_idx = parents_arr[:, 0]
    b_idx = parents_arr[:, 1]
    verts = 0.5 * (mesh.vertices[a_idx] + mesh.vertices[b_idx])
    uv = 0.5 * (mesh.uv[a_idx] + mesh.uv[b_idx])
    weights = 0.5 * (mesh.skin_weights[a_idx] + mesh.skin_weights[b_idx])
    weights = weights / weights.sum(axis=1, keepdims=True)

    faces = []
    for tri in mesh.faces:
        a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
        ab = edge_index[(min(a, b), max(a, b))]
        bc = edge_index[(min(b, c), max(b, c))]
        ca = edge_index[(min(c, a), max(c, a))]
        faces.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
    out = Mesh(
        vertices=verts,
        faces=np.asarray(faces, dtype=np.int64),
        uv=uv,
        skin_weights=weights,
    )
    return out, parents_arr


def fold_to_base(grad_vertices: np.ndarray, maps: list[np.ndarray]) -> np.ndarray:
    """Adjoint of the subdivision maps: fold a per-vertex gradient on the
    subdivided mesh back onto the base mesh vertices."""
    g = np.asarray(grad_vertices, dtype=np.float64)
    for parents in reversed(maps):
        n_parent = int(parents[:, 0][parents[:, 0] == parents[:, 1]].max()) + 1
        out = np.zeros((n_parent, g.shape[1]))
        np.add.at(out, parents[:, 0], 0.5 * g)
        np.add.at(out, parents[:, 1], 0.5 * g)
        g = out
    return g


def canonical_human(template: BodyTemplate, params: BodyParams, levels: int = 1) -> Mesh:
    """Subdivided canonical shape plus per-vertex displacement (rest pose)."""
    base = canonical_shape(template, params.beta, params.theta, params.psi)
    mesh = subdivide(base, levels)
    disp = np.asarray(params.displacement, dtype=np.float64)
    if disp.shape != mesh.vertices.shape:
        raise ValueError(
            f"displacement count {disp.shape[0]} does not match subdivided "
            f"vertex count {mesh.vertices.shape[0]}"
        )
    mesh.vertices = mesh.vertices + disp
    return mesh


# ---------------------------------------------------------------------------
# joints and skinning
# ---------------------------------------------------------------------------


def regress_joints(template: BodyTemplate, beta: np.ndarray) -> np.ndarray:
    """Joint positions of the (un-subdivided) shaped template."""
    beta = np.asarray(beta, dtype=np.float64)
    verts = template.mean_shape + template.shape_basis @ beta
    return template.joint_regressor @ verts


def _world_transforms(
    theta: np.ndarray, joints: np.ndarray, tree: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint world rotation and the image of the rest joint location.

    Joint j maps a point x to ``rot[j] @ (x - joints[j]) + pos[j]``.
    """
    rots_local = rodrigues(np.asarray(theta, dtype=np.float64))
    j_count = len(tree)
    rot = np.zeros((j_count, 3, 3))
    pos = np.zeros((j_count, 3))
    for j in _toposort_joints(tree):
        p = int(tree[j])
        if p < 0:
            rot[j] = rots_local[j]
            pos[j] = joints[j]
        else:
            rot[j] = rot[p] @ rots_local[j]
            pos[j] = rot[p] @ (joints[j] - joints[p]) + pos[p]
    return rot, pos


def skin(
    canonical_mesh: Mesh, theta: np.ndarray, joints: np.ndarray, tree: np.ndarray
) -> Mesh:
    """Linear blend skinning: v' = sum_j w_ij (R_j (v - j_j) + t_j)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (len(tree), 3):
        raise ValueError(f"theta shape {theta.shape} != ({len(tree)}, 3)")
    rot, pos = _world_transforms(theta, np.asarray(joints, dtype=np.float64), tree)
    v = canonical_mesh.vertices
    w = canonical_mesh.skin_weights
    # per-joint transformed copies, blended by weights
    local = v[None, :, :] - np.asarray(joints)[:, None, :]
    moved = np.einsum("jab,jvb->jva", rot, local) + pos[:, None, :]
    out_verts = np.einsum("vj,jva->va", w, moved)
    out = canonical_mesh.copy()
    out.vertices = out_verts
    return out


def animate_sequence(
    canonical_human_mesh: Mesh,
    pose_seq,
    joints: np.ndarray,
    tree: np.ndarray,
) -> list[Mesh]:
    """One skinned mesh per pose; order matches the input sequence."""
    return [skin(canonical_human_mesh, theta, joints, tree) for theta in pose_seq]


# ---------------------------------------------------------------------------
# desk-scale templates
# ---------------------------------------------------------------------------


def _capsule(
    p0: np.ndarray,
    p1: np.ndarray,
    radius: float,
    rings: int,
    segments: int,
    uv_tile: tuple[float, float, float, float],
):
    """A closed capsule from p0 to p1: tube rings plus two cap apex fans.

    Returns (vertices, faces, uv).  The uv unwrap fills the given tile
    (u0, v0, u1, v1) with the tube; apexes sit on the tile's v edges.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    az = axis / length
    # any vector not parallel to the axis
    helper = np.array([1.0, 0.0, 0.0])
    if abs(az @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    ax = np.cross(az, helper)
    ax /= np.linalg.norm(ax)
    ay = np.cross(az, ax)

    u0, v0, u1, v1 = uv_tile
    verts = []
    uvs = []
    for r in range(rings):
        t = r / (rings - 1)
        center = p0 + t * axis
        for s in range(segments):
            ang = 2.0 * np.pi * s / segments
            verts.append(center + radius * (np.cos(ang) * ax + np.sin(ang) * ay))
            uvs.append(
                (
                    u0 + (u1 - u0) * (s + 0.5) / segments,
                    v0 + (v1 - v0) * (0.1 + 0.8 * t),
                )
            )
    bottom = len(verts)
    verts.append(p0 - radius * az)
    uvs.append((0.5 * (u0 + u1), v0 + (v1 - v0) * 0.02))
    top = len(verts)
    verts.append(p1 + radius * az)
    uvs.append((0.5 * (u0 + u1), v0 + (v1 - v0) * 0.98))

    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = (r + 1) * segments + s
            d = (r + 1) * segments + (s + 1) % segments
            faces.append((a, b, d))
            faces.append((a, d, c))
    for s in range(segments):
        a = s
        b = (s + 1) % segments
        faces.append((b, a, bottom))
        a = (rings - 1) * segments + s
        b = (rings - 1) * segments + (s + 1) % segments
        faces.append((a, b, top))
    return (
        np.asarray(verts),
        np.asarray(faces, dtype=np.int64),
        np.asarray(uvs, dtype=np.float64),
    )


def make_biped_template(
    joints: int = 12,
    rings: int = 8,
    segments: int = 10,
    shape_dim: int = 4,
    expr_dim: int = 2,
    seed: int = 0,
) -> BodyTemplate:
    """Procedural desk-scale biped: six capsules, a small skeleton, smooth
    structured shape/expression bases, and a small seeded pose basis.

    ``joints`` must be one of {4, 6, 8, 12, 16, 20, 24}; extra joints beyond
    the core skeleton are chained along the spine and limbs.
    """
    if joints < 4 or joints > 24:
        raise ValueError("joints must be within [4, 24]")
    rng = np.random.default_rng(seed)

    # capsule layout (numbers in meters, origin at pelvis)
    specs = [
        ("torso", (0.0, 0.0, 0.0), (0.0, 0.0, 0.55), 0.16),
        ("head", (0.0, 0.0, 0.62), (0.0, 0.0, 0.82), 0.11),
        ("arm_l", (-0.20, 0.0, 0.52), (-0.62, 0.0, 0.50), 0.055),
        ("arm_r", (0.20, 0.0, 0.52), (0.62, 0.0, 0.50), 0.055),
        ("leg_l", (-0.10, 0.0, -0.04), (-0.12, 0.0, -0.85), 0.075),
        ("leg_r", (0.10, 0.0, -0.04), (0.12, 0.0, -0.85), 0.075),
    ]
    tiles = {
        "torso": (0.02, 0.02, 0.48, 0.48),
        "head": (0.52, 0.02, 0.98, 0.48),
        "arm_l": (0.02, 0.52, 0.23, 0.98),
        "arm_r": (0.27, 0.52, 0.48, 0.98),
        "leg_l": (0.52, 0.52, 0.73, 0.98),
        "leg_r": (0.77, 0.52, 0.98, 0.98),
    }
    verts_all, faces_all, uv_all, part_of = [], [], [], []
    offset = 0
    for idx, (name, a, b, radius) in enumerate(specs):
        v, f, u = _capsule(np.array(a), np.array(b), radius, rings, segments, tiles[name])
        verts_all.append(v)
        faces_all.append(f + offset)
        uv_all.append(u)
        part_of.extend([idx] * len(v))
        offset += len(v)
    vertices = np.concatenate(verts_all)
    faces = np.concatenate(faces_all)
    uv = np.concatenate(uv_all)
    part_of = np.asarray(part_of)

    # skeleton: pelvis root, then chains along spine/head and the four limbs
    core = [
        ("pelvis", -1, (0.0, 0.0, 0.0)),
        ("spine", 0, (0.0, 0.0, 0.35)),
        ("head", 1, (0.0, 0.0, 0.62)),
        ("shoulder_l", 1, (-0.20, 0.0, 0.52)),
        ("shoulder_r", 1, (0.20, 0.0, 0.52)),
        ("hip_l", 0, (-0.10, 0.0, -0.04)),
        ("hip_r", 0, (0.10, 0.0, -0.04)),
        ("elbow_l", 3, (-0.42, 0.0, 0.51)),
        ("elbow_r", 4, (0.42, 0.0, 0.51)),
        ("knee_l", 5, (-0.11, 0.0, -0.45)),
        ("knee_r", 6, (0.11, 0.0, -0.45)),
        ("head_top", 2, (0.0, 0.0, 0.80)),
    ]
    extras = [
        ("wrist_l", 7, (-0.62, 0.0, 0.50)),
        ("wrist_r", 8, (0.62, 0.0, 0.50)),
        ("ankle_l", 9, (-0.12, 0.0, -0.85)),
        ("ankle_r", 10, (0.12, 0.0, -0.85)),
        ("chest", 1, (0.0, 0.0, 0.45)),
        ("neck", 2, (0.0, 0.0, 0.58)),
        ("jaw", 2, (0.0, -0.06, 0.64)),
        ("toe_l", 9, (-0.12, -0.08, -0.88)),
        ("toe_r", 10, (0.12, -0.08, -0.88)),
        ("hand_l", 7, (-0.66, 0.0, 0.50)),
        ("hand_r", 8, (0.66, 0.0, 0.50)),
        ("spine2", 1, (0.0, 0.0, 0.50)),
    ]
    chain = core + extras
    chain = chain[:joints]
    tree = np.asarray([p for _, p, _ in chain], dtype=np.int64)
    joint_pos = np.asarray([p for _, _, p in chain], dtype=np.float64)

    # joint regressor: inverse-distance over the 8 nearest vertices
    regressor = np.zeros((len(chain), len(vertices)))
    for j, pos in enumerate(joint_pos):
        d = np.linalg.norm(vertices - pos, axis=1)
        nearest = np.argsort(d)[:8]
        w = 1.0 / (d[nearest] + 1e-6)
        regressor[j, nearest] = w / w.sum()

    # skin weights: inverse-quartic distance to the 3 nearest joints
    d = np.linalg.norm(vertices[:, None, :] - joint_pos[None, :, :], axis=2)
    w = 1.0 / (d**4 + 1e-9)
    keep = np.argsort(-w, axis=1)[:, :3]
    skin_w = np.zeros_like(w)
    rows = np.arange(len(vertices))[:, None]
    skin_w[rows, keep] = w[rows, keep]
    skin_w /= skin_w.sum(axis=1, keepdims=True)

    # smooth structured shape basis: scale, height, girth, arm reach, ...
    fields = [
        vertices * 0.05,
        np.stack([np.zeros(len(vertices))] * 2 + [vertices[:, 2] * 0.08], axis=1),
        np.stack(
            [vertices[:, 0] * 0.10, vertices[:, 1] * 0.10, np.zeros(len(vertices))],
            axis=1,
        ),
        np.stack(
            [
                np.sign(vertices[:, 0]) * np.clip(np.abs(vertices[:, 0]) - 0.2, 0, None) * 0.2,
                np.zeros(len(vertices)),
                np.zeros(len(vertices)),
            ],
            axis=1,
        ),
    ]
    while len(fields) < shape_dim:
        k = len(fields)
        fields.append(0.03 * np.sin(vertices * (1.0 + 0.7 * k) + 0.3 * k))
    shape_basis = np.stack(fields[:shape_dim], axis=2)

    # expression basis: smooth bumps on the head capsule only
    head_mask = (part_of == 1).astype(np.float64)
    head_center = np.array([0.0, 0.0, 0.72])
    rel = vertices - head_center
    bump1 = head_mask[:, None] * np.exp(-(rel**2).sum(1) / 0.01)[:, None] * np.array(
        [0.0, -0.04, 0.0]
    )
    bump2 = head_mask[:, None] * np.exp(
        -((rel - [0, -0.08, 0.0]) ** 2).sum(1) / 0.006
    )[:, None] * np.array([0.0, 0.0, 0.03])
    expr_fields = [bump1, bump2]
    while len(expr_fields) < expr_dim:
        k = len(expr_fields)
        expr_fields.append(
            head_mask[:, None]
            * 0.02
            * np.sin(rel * (3.0 + k) + k)
        )
    expr_basis = np.stack(expr_fields[:expr_dim], axis=2)

    # small seeded pose-corrective basis (zero at rest by construction)
    pose_basis = 0.002 * rng.standard_normal((len(vertices), 3, 9 * (len(chain) - 1)))

    template = BodyTemplate(
        mean_shape=vertices,
        faces=faces,
        shape_basis=shape_basis,
        pose_basis=pose_basis,
        expr_basis=expr_basis,
        joint_regressor=regressor,
        skin_weights=skin_w,
        uv=uv,
        kinematic_tree=tree,
    )
    template.validate()
    return template


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

TEMPLATE_FORMAT_VERSION = 1
_TEMPLATE_KEYS = (
    "mean_shape",
    "faces",
    "shape_basis",
    "pose_basis",
    "expr_basis",
    "joint_regressor",
    "skin_weights",
    "uv",
    "kinematic_tree",
)


def save_template(path: str | os.PathLike, template: BodyTemplate) -> None:
    """Write a template as a versioned npz container (documented layout:
    one array per BodyTemplate field plus a ``version`` scalar)."""
    np.savez(
        os.fspath(path),
        version=np.int64(TEMPLATE_FORMAT_VERSION),
        **{k: getattr(template, k) for k in _TEMPLATE_KEYS},
    )


def load_template(path: str | os.PathLike) -> BodyTemplate:
    with np.load(os.fspath(path)) as data:
        version = int(data["version"])
        if version != TEMPLATE_FORMAT_VERSION:
            raise ValueError(f"unsupported template version {version}")
        template = BodyTemplate(**{k: data[k] for k in _TEMPLATE_KEYS})
    template.validate()
    return template


def save_pose_sequence(
    path: str | os.PathLike,
    thetas: np.ndarray,
    translations: np.ndarray | None = None,
) -> None:
    """Write poses as line-oriented text.

    Layout: ``poses v1`` header, then ``frames N joints J translation {0,1}``,
    then one line per frame of J axis-angle triples (plus a leading
    translation triple when enabled), all whitespace-separated floats.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    n, j = thetas.shape[0], thetas.shape[1]
    with open(os.fspath(path), "w", encoding="ascii") as fh:
        fh.write("poses v1\n")
        fh.write(f"frames {n} joints {j} translation {int(translations is not None)}\n")
        for i in range(n):
            row = []
            if translations is not None:
                row.extend(f"{x:.17g}" for x in translations[i])
            row.extend(f"{x:.17g}" for x in thetas[i].reshape(-1))
            fh.write(" ".join(row) + "\n")


def load_pose_sequence(path: str | os.PathLike):
    """Read a pose file; returns (thetas (N, J, 3), translations or None)."""
    with open(os.fspath(path), "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "poses v1":
        raise ValueError(f"{os.fspath(path)}: line 1: not a 'poses v1' file")
    try:
        fields = dict(zip(lines[1].split()[0::2], lines[1].split()[1::2]))
        n = int(fields["frames"])
        j = int(fields["joints"])
        has_trans = bool(int(fields["translation"]))
    except (KeyError, ValueError, IndexError) as exc:
        raise ValueError(f"{os.fspath(path)}: line 2: malformed header") from exc
    expected = j * 3 + (3 if has_trans else 0)
    thetas = np.zeros((n, j, 3))
    trans = np.zeros((n, 3)) if has_trans else None
    for i in range(n):
        lineno = i + 3
        try:
            vals = [float(x) for x in lines[i + 2].split()]
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{os.fspath(path)}: line {lineno}: malformed record") from exc
        if len(vals) != expected:
            raise ValueError(
                f"{os.fspath(path)}: line {lineno}: expected {expected} floats, "
                f"got {len(vals)}"
            )
        if has_trans:
            trans[i] = vals[:3]
            vals = vals[3:]
        thetas[i] = np.asarray(vals).reshape(j, 3)
    return thetas, trans


def export_obj(path: str | os.PathLike, mesh: Mesh) -> None:
    """Write v/vt/f records (inspection only; texture reference omitted)."""
    with open(os.fspath(path), "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.uv:
            fh.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        for f in mesh.faces:
            a, b, c = (int(x) + 1 for x in f)
            fh.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")

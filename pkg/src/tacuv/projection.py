"""Stage 1: put glove and robot-hand readings onto the canonical UV map.

Human side: every glove sensor owns a quadrilateral patch of mesh vertices
(its four annotated corners span a parametric square in UV space); the
sensor's reading is written across the member vertices through bilinear
interpolation of the corner values and rasterized. Robot side: the hand
shape is fitted once (Chamfer + decaying keypoint loss over the shape
coefficients), each frame is retargeted to pose parameters, and taxel
quads hand their readings to the nearest mesh vertices with normalized
inverse-distance weights. Both maps are then Gaussian-smoothed, masked,
and optionally normalized by a dataset constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve as nd_convolve
from scipy.spatial import cKDTree

from . import engine as eg
from . import hand as hm
from .errors import DataError, FitError
from .layouts import GloveLayout
from .optim import AdamState, adam_step
from .robot import RobotHandModel, RobotState, robot_keypoints, sample_surface, taxel_world_quads
from .uvmap import UVMap

TAXEL_CUTOFF = 0.03  # meters; farther taxels are reported, not projected


# ---------------------------------------------------------------------
# bilinear patches
# ---------------------------------------------------------------------

def bilinear(u, v, c00, c10, c01, c11):
    """Interpolate corner values over the unit square."""
    return ((1 - u) * (1 - v) * c00 + u * (1 - v) * c10
            + (1 - u) * v * c01 + u * v * c11)


def _inverse_bilinear(pts, p00, p10, p01, p11, iters=12):
    """Parametric (u, v) of 2-D points inside a bilinear quad via Newton."""
    n = len(pts)
    uv = np.full((n, 2), 0.5)
    a, b = p00, p10 - p00
    c, d = p01 - p00, p11 - p10 - p01 + p00
    for _ in range(iters):
        u, v = uv[:, 0], uv[:, 1]
        f = (a + np.outer(u, b) + np.outer(v, c) + np.outer(u * v, d)) - pts
        ju = b[None, :] + np.outer(v, d)
        jv = c[None, :] + np.outer(u, d)
        det = ju[:, 0] * jv[:, 1] - ju[:, 1] * jv[:, 0]
        det = np.where(np.abs(det) < 1e-18, 1e-18, det)
        du = (f[:, 0] * jv[:, 1] - f[:, 1] * jv[:, 0]) / det
        dv = (ju[:, 0] * f[:, 1] - ju[:, 1] * f[:, 0]) / det
        uv[:, 0] -= du
        uv[:, 1] -= dv
    return uv


def patch_members(vertex_uvs, corners_uv, sensor_id=None, eps=1e-6):
    """Vertex ids inside the quad spanned by the 4 corner UVs, with their
    parametric coordinates. Raises on degenerate quads."""
    p00, p10, p01, p11 = (np.asarray(c, dtype=np.float64) for c in corners_uv)

    def _cross2(a, b):
        return a[0] * b[1] - a[1] * b[0]

    area = 0.5 * abs(_cross2(p10 - p00, p01 - p00)) + 0.5 * abs(_cross2(p10 - p11, p01 - p11))
    if area < 1e-12:
        who = f"sensor {sensor_id}" if sensor_id is not None else "patch"
        raise DataError(f"{who}: degenerate corner quad in UV space")
    lo = np.minimum.reduce([p00, p10, p01, p11]) - eps
    hi = np.maximum.reduce([p00, p10, p01, p11]) + eps
    cand = np.nonzero((vertex_uvs[:, 0] >= lo[0]) & (vertex_uvs[:, 0] <= hi[0])
                      & (vertex_uvs[:, 1] >= lo[1]) & (vertex_uvs[:, 1] <= hi[1]))[0]
    if len(cand) == 0:
        return cand, np.zeros((0, 2))
    uv = _inverse_bilinear(vertex_uvs[cand].astype(np.float64), p00, p10, p01, p11)
    ok = ((uv[:, 0] >= -eps) & (uv[:, 0] <= 1 + eps)
          & (uv[:, 1] >= -eps) & (uv[:, 1] <= 1 + eps))
    # reject fold-overs: the forward map must actually land on the vertex
    u, vv = uv[:, 0], uv[:, 1]
    back = (np.outer((1 - u) * (1 - vv), p00) + np.outer(u * (1 - vv), p10)
            + np.outer((1 - u) * vv, p01) + np.outer(u * vv, p11))
    ok &= np.linalg.norm(back - vertex_uvs[cand], axis=1) < 1e-5
    return cand[ok], np.clip(uv[ok], 0.0, 1.0)


def glove_members(layout: GloveLayout, template: hm.HandTemplate, vertex_uvs=None):
    """Per-sensor (member vertex ids, parametric coords), computed once."""
    if vertex_uvs is None:
        vertex_uvs = template.vertex_uvs()
    out = []
    for s in layout.sensors:
        out.append(patch_members(vertex_uvs, [vertex_uvs[c] for c in s.corners],
                                 sensor_id=s.id))
    return out


def human_vertex_values(t_h, layout: GloveLayout, members) -> np.ndarray:
    """Sensor readings -> per-vertex pressure (max where patches overlap).

    A sensor carries one reading, so its four corner values coincide and
    bilinear interpolation fills the member vertices with a constant
    plateau.
    """
    t_h = np.asarray(t_h, dtype=np.float64)
    if t_h.shape != (len(layout.sensors),):
        raise DataError(f"expected {len(layout.sensors)} readings, got {t_h.shape}")
    values = np.zeros(hm.N_VERTS, dtype=np.float64)
    for s, (ids, uv) in zip(layout.sensors, members):
        r = t_h[s.id]
        if r == 0.0 or len(ids) == 0:
            continue
        vals = bilinear(uv[:, 0], uv[:, 1], r, r, r, r)
        np.maximum.at(values, ids, vals)
    return values


def project_human(t_h, layout: GloveLayout, template: hm.HandTemplate,
                  width, height, vertex_uvs=None, members=None):
    """Glove readings -> pre-smoothing UVMap."""
    if members is None:
        members = glove_members(layout, template, vertex_uvs)
    values = human_vertex_values(t_h, layout, members)
    uvmap, _ = hm.rasterize_vertex_values(values.astype(np.float32), template,
                                          width, height)
    return uvmap


def project_robot(t_r, robot_model: RobotHandModel, state: RobotState,
                  template: hm.HandTemplate, beta_star, theta, width, height):
    """Taxel readings -> pre-smoothing UVMap plus the skipped-taxel report.

    The canonical mesh is posed with (beta*, theta) and shifted so its wrist
    keypoint coincides with the robot's; each taxel corner then grabs its
    nearest mesh vertex and the reading is split over those vertices with
    inverse-distance weights that sum to one per taxel.
    """
    t_r = np.asarray(t_r, dtype=np.float64)
    if t_r.shape != (robot_model.n_taxels,):
        raise DataError(f"expected {robot_model.n_taxels} readings, got {t_r.shape}")
    posed, kp = hm.pose_mesh(template, beta_star, theta, np.zeros(3, dtype=np.float32))
    verts = posed.data.astype(np.float64)
    kp = kp.data.astype(np.float64)
    rkp = robot_keypoints(robot_model, state)
    verts = verts + (rkp[0] - kp[0])

    quads = taxel_world_quads(robot_model, state)      # (N, 4, 3)
    tree = cKDTree(verts)
    dist, idx = tree.query(quads.reshape(-1, 3))
    dist = dist.reshape(-1, 4)
    idx = idx.reshape(-1, 4)

    near = dist.min(axis=1) <= TAXEL_CUTOFF
    skipped = np.nonzero(~near)[0].tolist()
    w = 1.0 / (dist + 1e-9)
    w /= w.sum(axis=1, keepdims=True)

    # corners of one taxel may share a nearest vertex: merge those weights
    # so each (taxel, vertex) contribution is summed before the cross-taxel
    # max resolution
    order = np.argsort(idx, axis=1, kind="stable")
    si = np.take_along_axis(idx, order, axis=1)
    sw = np.take_along_axis(w, order, axis=1)
    for k in range(1, 4):
        dup = si[:, k] == si[:, k - 1]
        sw[dup, k] += sw[dup, k - 1]
        sw[dup, k - 1] = 0.0
    contrib = t_r[:, None] * sw
    live = near & (t_r > 0)
    values = np.zeros(hm.N_VERTS, dtype=np.float64)
    np.maximum.at(values, si[live].ravel(), contrib[live].ravel())
    uvmap, _ = hm.rasterize_vertex_values(values.astype(np.float32), template,
                                          width, height)
    return uvmap, skipped


# ---------------------------------------------------------------------
# smoothing, masking, features
# ---------------------------------------------------------------------

def gaussian_kernel(size=5, sigma=0.5) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    gx, gy = np.meshgrid(ax, ax)
    k = np.exp(-(gx * gx + gy * gy) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth_and_mask(uvmap: UVMap, size=5, sigma=0.5, norm_max=None) -> UVMap:
    """Gaussian blur (zero-padded borders), then mask. When `norm_max` is
    given the result is scaled by it and clipped to [0, 1]; the raw
    pipeline passes the dataset's robust maximum here."""
    k = gaussian_kernel(size, sigma)
    sm = nd_convolve(uvmap.values.astype(np.float64), k, mode="constant", cval=0.0)
    sm *= uvmap.mask
    if norm_max is not None:
        if norm_max > 0:
            sm = np.clip(sm / norm_max, 0.0, 1.0)
        else:
            sm[:] = 0.0
    return UVMap(uvmap.width, uvmap.height, sm.astype(np.float32), uvmap.mask.copy())


@dataclass
class UvGridSpec:
    """Frozen downsampling recipe shared by training and evaluation.

    `cells` holds flat cell indices (row-major over the coarse grid);
    entries of -1 are deterministic padding and always read as zero.
    """

    width: int
    height: int
    factor: int
    cells: np.ndarray                 # (D,) int32
    cell_fingers: list = field(default_factory=list)   # per cell: finger tag or None

    @property
    def dim(self):
        return len(self.cells)

    def grid_shape(self):
        return (-(-self.height // self.factor), -(-self.width // self.factor))

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "factor": self.factor,
                "cells": [int(c) for c in self.cells],
                "cell_fingers": list(self.cell_fingers)}

    @classmethod
    def from_json(cls, doc) -> "UvGridSpec":
        return cls(doc["width"], doc["height"], doc["factor"],
                   np.asarray(doc["cells"], dtype=np.int32),
                   list(doc.get("cell_fingers", [])))


def build_grid_spec(union_mask: np.ndarray, factor: int, dim=391,
                    texel_fingers=None) -> UvGridSpec:
    """Derive the frozen cell list: active cells are coarse cells with any
    coverage in the union mask; an even-stride subsample (or -1 padding)
    pins the list to exactly `dim` entries."""
    h, w = union_mask.shape
    gh, gw = -(-h // factor), -(-w // factor)
    active = []
    fingers = []
    for cy in range(gh):
        for cx in range(gw):
            tile = union_mask[cy * factor:(cy + 1) * factor, cx * factor:(cx + 1) * factor]
            if tile.any():
                active.append(cy * gw + cx)
                if texel_fingers is not None:
                    ftile = texel_fingers[cy * factor:(cy + 1) * factor,
                                          cx * factor:(cx + 1) * factor]
                    labels = ftile[tile.astype(bool)]
                    vals, counts = np.unique(labels, return_counts=True)
                    fingers.append(int(vals[counts.argmax()]))
                else:
                    fingers.append(-1)
    n = len(active)
    if n >= dim:
        pick = [(i * n) // dim for i in range(dim)]
        cells = np.asarray([active[p] for p in pick], dtype=np.int32)
        tags = [fingers[p] for p in pick]
    else:
        cells = np.asarray(active + [-1] * (dim - n), dtype=np.int32)
        tags = fingers + [-1] * (dim - n)
    names = {0: None, 1: "thumb", 2: "index", 3: "middle", 4: "ring", 5: "pinky", -1: None}
    return UvGridSpec(w, h, factor, cells, [names[t] for t in tags])


def uv_feature(uvmap: UVMap, spec: UvGridSpec) -> np.ndarray:
    """Mean pressure per frozen cell, order fixed by the spec."""
    if uvmap.width != spec.width or uvmap.height != spec.height:
        raise DataError(f"uv_feature: map {uvmap.width}x{uvmap.height} vs "
                        f"spec {spec.width}x{spec.height}")
    f = spec.factor
    gh, gw = spec.grid_shape()
    out = np.zeros(spec.dim, dtype=np.float32)
    for i, cell in enumerate(spec.cells):
        if cell < 0:
            continue
        cy, cx = divmod(int(cell), gw)
        tile = uvmap.values[cy * f:(cy + 1) * f, cx * f:(cx + 1) * f]
        out[i] = tile.mean(dtype=np.float64)
    return out


# ---------------------------------------------------------------------
# Chamfer distance
# ---------------------------------------------------------------------

def _pair_sq_dist(a, b):
    return ((a - b) ** 2).sum(axis=1)


def nearest_indices(src, dst, method="auto"):
    """Index into `dst` of each `src` point's nearest neighbor."""
    if method == "auto":
        method = "brute" if len(src) * len(dst) <= (1 << 14) else "tree"
    if method == "brute":
        d2 = (np.einsum("id,id->i", src, src)[:, None]
              + np.einsum("jd,jd->j", dst, dst)[None, :]
              - 2.0 * src @ dst.T)
        return d2.argmin(axis=1)
    if method == "tree":
        return cKDTree(dst).query(src)[1]
    raise DataError(f"nearest_indices: unknown method {method!r}")


def chamfer(p, q, method="auto") -> float:
    """Symmetric mean squared nearest-neighbor distance.

    Both the brute-force and the tree-accelerated path recompute the
    matched pair distances with identical arithmetic, so they agree
    bit-for-bit whenever nearest neighbors are unique.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or len(p) == 0 or len(q) == 0:
        raise DataError("chamfer: point sets must be non-empty (n,3) arrays")
    ip = nearest_indices(p, q, method)
    iq = nearest_indices(q, p, method)
    return float(_pair_sq_dist(p, q[ip]).mean() + _pair_sq_dist(q, p[iq]).mean())


def keypoint_weight_schedule(t: int) -> float:
    """Linear decay of the keypoint-loss weight over fitting iterations."""
    return max(0.0, 1.0 - t / 2500.0)


# ---------------------------------------------------------------------
# shape fitting and per-frame retargeting
# ---------------------------------------------------------------------

@dataclass
class ShapeFitResult:
    beta: np.ndarray
    loss_cd: float
    loss_key: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def sample_mesh_points(template: hm.HandTemplate, n=4096, seed=0):
    """Fixed (face, barycentric) assignments for differentiable surface
    sampling; areas come from the rest template."""
    tri = template.vertices[template.faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    rng = np.random.Generator(np.random.PCG64(seed))
    faces = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1).astype(np.float32)
    return faces, bary


def _mesh_points_tensor(posed_vertices, template, faces, bary):
    flat = eg.take(posed_vertices, template.faces[faces].reshape(-1).astype(np.int64))
    tri = eg.reshape(flat, (len(faces), 3, 3))
    return eg.reshape(eg.matmul(eg.Tensor(bary.reshape(-1, 1, 3)), tri),
                      (len(faces), 3))


def fit_shape(template: hm.HandTemplate, target_points, target_keypoints,
              iters=10000, lr=1e-3, n_samples=4096, seed=0,
              stop_cd=None) -> ShapeFitResult:
    """Recover shape coefficients by Adam over Chamfer + w(t) * keypoint loss.

    Both hands are assumed to be in the flat reference pose. `stop_cd`
    enables early exit once the Chamfer term alone drops below it.
    """
    target_points = np.asarray(target_points, dtype=np.float32)
    target_keypoints = np.asarray(target_keypoints, dtype=np.float32)
    faces, bary = sample_mesh_points(template, n_samples, seed)
    beta = eg.Tensor(np.zeros(hm.N_SHAPE, dtype=np.float32), requires_grad=True)
    theta0 = np.zeros(48, dtype=np.float32)
    t0 = np.zeros(3, dtype=np.float32)
    opt = AdamState(lr=lr, weight_decay=0.0)
    params = {"beta": beta}
    trace = []
    loss_cd = loss_key = float("inf")
    it = 0
    for it in range(1, iters + 1):
        beta.zero_grad()
        posed, kp = hm.pose_mesh(template, beta, theta0, t0)
        mesh_pts = _mesh_points_tensor(posed, template, faces, bary)
        mp = mesh_pts.data.astype(np.float64)
        idx_fwd = nearest_indices(target_points.astype(np.float64), mp)
        idx_bwd = nearest_indices(mp, target_points.astype(np.float64))
        d_fwd = eg.sub(eg.Tensor(target_points), eg.take(mesh_pts, idx_fwd))
        d_bwd = eg.sub(mesh_pts, eg.Tensor(target_points[idx_bwd]))
        l_cd = eg.add(eg.mean(eg.sum_(eg.square(d_fwd), axis=1)),
                      eg.mean(eg.sum_(eg.square(d_bwd), axis=1)))
        d_kp = eg.sub(kp, eg.Tensor(target_keypoints))
        l_key = eg.mean(eg.sum_(eg.square(d_kp), axis=1))
        w = keypoint_weight_schedule(it - 1)
        loss = eg.add(l_cd, eg.mul(np.float32(w), l_key))
        loss_cd, loss_key = l_cd.item(), l_key.item()
        if not np.isfinite(loss.item()):
            raise FitError("shape fit diverged to a non-finite loss", iteration=it)
        trace.append((loss_cd, loss_key, w))
        if stop_cd is not None and loss_cd <= stop_cd:
            return ShapeFitResult(beta.data.copy(), loss_cd, loss_key, it, True, trace)
        eg.backward(loss)
        adam_step(opt, params)
    converged = stop_cd is not None and loss_cd <= stop_cd
    return ShapeFitResult(beta.data.copy(), loss_cd, loss_key, it, converged, trace)


def fit_shape_to_robot(robot_model: RobotHandModel, template: hm.HandTemplate,
                       iters=10000, **kw) -> ShapeFitResult:
    """Fit against the robot's reference-pose surface cloud and keypoints,
    pre-shifted so both wrists coincide."""
    state = RobotState(np.zeros(len(robot_model.actuated)))
    cloud = sample_surface(robot_model, state, n=kw.pop("n_cloud", 4096),
                           seed=kw.get("seed", 0))
    rkp = robot_keypoints(robot_model, state)
    wrist = hm.rest_keypoints(template)[0]
    shift = rkp[0] - wrist
    return fit_shape(template, cloud - shift, rkp - shift, iters=iters, **kw)


@dataclass
class RetargetResult:
    theta: np.ndarray
    loss: float
    iterations: int
    converged: bool
    failed: bool = False


def keypoint_loss_np(kp, target) -> float:
    """Mean squared wrist-centered keypoint distance (numpy side)."""
    a = kp - kp[0]
    b = target - target[0]
    return float(((a - b) ** 2).sum(axis=1).mean())


def retarget_pose(target_keypoints, template: hm.HandTemplate, beta_star,
                  theta_init=None, max_iters=200, lr=0.05, tol=1e-6,
                  plateau_rel=1e-3, patience=12) -> RetargetResult:
    """Per-frame pose recovery; warm start with the previous frame's theta.

    Matching is wrist-centered, so the robot's world translation never
    enters. Stops at `tol` (m^2) or when `patience` iterations fail to
    improve the best loss by a relative `plateau_rel` (cross-embodiment
    targets are never matched exactly, so a fixed floor alone would always
    run to the cap). Falls back to the initial pose if the loss grows 10x
    past its starting value.
    """
    target = np.asarray(target_keypoints, dtype=np.float32)
    theta_init = np.zeros(48, dtype=np.float32) if theta_init is None \
        else np.asarray(theta_init, dtype=np.float32)
    beta_const = np.asarray(beta_star, dtype=np.float32)
    t0 = np.zeros(3, dtype=np.float32)

    _, kp0 = hm.pose_mesh(template, beta_const, theta_init, t0)
    init_loss = keypoint_loss_np(kp0.data, target)
    if init_loss <= tol:
        return RetargetResult(theta_init.copy(), init_loss, 0, True)

    theta = eg.Tensor(theta_init.copy(), requires_grad=True)
    opt = AdamState(lr=lr, weight_decay=0.0)
    params = {"theta": theta}
    tgt_centered = eg.Tensor(target - target[0])
    best = (init_loss, theta_init.copy())
    stall = 0
    it = 0
    for it in range(1, max_iters + 1):
        theta.zero_grad()
        _, kp = hm.pose_mesh(template, beta_const, theta, t0)
        centered = eg.sub(kp, kp[0:1, :])
        loss = eg.mean(eg.sum_(eg.square(eg.sub(centered, tgt_centered)), axis=1))
        loss_val = loss.item()
        if not np.isfinite(loss_val) or loss_val > 10.0 * init_loss:
            return RetargetResult(theta_init.copy(), init_loss, it, False, failed=True)
        if loss_val < best[0] * (1.0 - plateau_rel):
            stall = 0
        else:
            stall += 1
        if loss_val < best[0]:
            best = (loss_val, theta.data.copy())
        if loss_val <= tol:
            return RetargetResult(theta.data.copy(), loss_val, it, True)
        if stall >= patience:
            break
        eg.backward(loss)
        adam_step(opt, params)
    return RetargetResult(best[1], best[0], it, best[0] <= tol)

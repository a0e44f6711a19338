"""Canonical parametric hand: template, blend skinning, UV rasterizer.

The template matches the usual parametric-hand topology budget (778
vertices, 1538 faces, 16 skinning joints, 21 regressed keypoints, 10
shape components). Because the original asset is licensed, a procedural
stand-in with the same counts is generated here; a real asset can be
dropped in through the "UTH-HAND1" file format without code changes.

Stand-in construction: five capped tubes (the fingers), a two-sided palm
slab, and three webbing quads between adjacent finger bases. Counts:

    fingers  5 tubes, 8 segments around, (10,12,12,12,10) rings
             -> 8*L+2 vertices, 16*L faces each = 458 v / 896 f
    palm     10x16 vertex grid, two sides + perimeter wall
             -> 320 v / 636 f
    webbing  3 quads on existing vertices -> 6 f
    total       778 v / 1538 f

Every mesh part owns a disjoint rectangle of the UV square so pressure
written on one finger can never rasterize into another part's island.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .container import read_container, take_array, write_container
from .errors import DataError, FormatError
from .uvmap import UVMap

HAND_MAGIC = b"UTH-HAND1"

N_VERTS = 778
N_FACES = 1538
N_JOINTS = 16
N_SHAPE = 10
N_KEYPOINTS = 21

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")
FINGER_RINGS = (10, 12, 12, 12, 10)
RING_SEGS = 8
PALM_ROWS, PALM_COLS = 10, 16

# UV island rectangles (u0, v0, u1, v1); generous gutters keep smoothing
# bleed from ever crossing between fingers.
FINGER_ISLANDS = {
    "thumb": (0.03, 0.55, 0.14, 0.97),
    "index": (0.20, 0.55, 0.31, 0.97),
    "middle": (0.37, 0.55, 0.48, 0.97),
    "ring": (0.54, 0.55, 0.65, 0.97),
    "pinky": (0.71, 0.55, 0.82, 0.97),
}
PALM_TOP_ISLAND = (0.05, 0.06, 0.45, 0.48)
PALM_BOTTOM_ISLAND = (0.55, 0.06, 0.95, 0.48)
SIDE_STRIP = (0.03, 0.505, 0.97, 0.535)
WEBBING_AREA = (0.88, 0.56, 0.99, 0.70)


@dataclass
class HandTemplate:
    vertices: np.ndarray        # (778, 3) f32, meters
    faces: np.ndarray           # (1538, 3) u32
    shape_basis: np.ndarray     # (778, 3, 10) f32, per-unit-beta displacement
    skin_weights: np.ndarray    # (778, 16) f32, rows sum to 1
    joint_parents: np.ndarray   # (16,) i32, -1 for the root
    face_uvs: np.ndarray        # (1538, 3, 2) f32 in [0,1]
    keypoint_regressor: np.ndarray  # (21, 778) f32, rows sum to 1
    joint_regressor: np.ndarray     # (16, 778) f32, rows sum to 1
    # construction metadata, not part of the wire format contract
    part_of_vertex: np.ndarray = field(default=None)  # (778,) i32, 0=palm 1..5=fingers

    def validate(self):
        if self.vertices.shape != (N_VERTS, 3):
            raise DataError(f"template: vertices shape {self.vertices.shape}")
        if self.faces.shape != (N_FACES, 3):
            raise DataError(f"template: faces shape {self.faces.shape}")
        if self.faces.min() < 0 or self.faces.max() >= N_VERTS:
            raise DataError("template: face indexes out-of-range vertex")
        if self.shape_basis.shape != (N_VERTS, 3, N_SHAPE):
            raise DataError(f"template: shape basis shape {self.shape_basis.shape}")
        if self.skin_weights.shape != (N_VERTS, N_JOINTS):
            raise DataError("template: skinning weight shape")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-5):
            raise DataError("template: skinning weights must row-sum to 1")
        if self.face_uvs.min() < 0.0 or self.face_uvs.max() > 1.0:
            raise DataError("template: UV coordinates outside [0,1]")
        if not np.allclose(self.keypoint_regressor.sum(axis=1), 1.0, atol=1e-6):
            raise DataError("template: keypoint regressor rows must sum to 1")
        return self

    def vertex_uvs(self) -> np.ndarray:
        """One UV per vertex (first face occurrence wins; seams keep the
        copy from the face that appears first)."""
        uv = np.zeros((N_VERTS, 2), dtype=np.float32)
        seen = np.zeros(N_VERTS, dtype=bool)
        flat_idx = self.faces.reshape(-1)
        flat_uv = self.face_uvs.reshape(-1, 2)
        for i, v in enumerate(flat_idx):
            if not seen[v]:
                seen[v] = True
                uv[v] = flat_uv[i]
        return uv


# ---------------------------------------------------------------------
# stand-in generation
# ---------------------------------------------------------------------

def _vertex_normals(vertices, faces):
    """Area-weighted vertex normals of the rest mesh."""
    tri = vertices[faces.astype(np.int64)]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    out = np.zeros((len(vertices), 3))
    for c in range(3):
        np.add.at(out, faces[:, c].astype(np.int64), fn)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norm, 1e-12)


def _orthonormal_frame(direction):
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    return d, u, w


_FINGER_SPECS = {
    # base point (m), direction, length (m), base/tip radius (m)
    "thumb": ((-0.052, 0.028, -0.004), (-0.55, 0.75, -0.25), 0.058, 0.0105, 0.0075),
    "index": ((-0.033, 0.090, 0.0), (-0.06, 1.0, 0.0), 0.068, 0.0085, 0.0060),
    "middle": ((-0.011, 0.092, 0.0), (0.0, 1.0, 0.0), 0.075, 0.0090, 0.0062),
    "ring": ((0.011, 0.090, 0.0), (0.06, 1.0, 0.0), 0.069, 0.0085, 0.0058),
    "pinky": ((0.033, 0.086, 0.0), (0.14, 0.99, 0.0), 0.055, 0.0072, 0.0050),
}


def _build_finger(name, n_rings, v_off):
    base, direction, length, r0, r1 = _FINGER_SPECS[name]
    base = np.asarray(base)
    d, u, w = _orthonormal_frame(np.asarray(direction))
    verts = []
    ang = 2.0 * np.pi * np.arange(RING_SEGS) / RING_SEGS
    for l in range(n_rings):
        t = l / (n_rings - 1)
        radius = r0 * (1 - t) + r1 * t
        center = base + t * length * d
        ring = center + radius * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w)
        verts.append(ring)
    base_apex = base - 0.004 * d
    tip_apex = base + (length + 0.004) * d
    verts = np.vstack(verts + [base_apex[None], tip_apex[None]])

    def rv(l, s):  # ring vertex id
        return v_off + l * RING_SEGS + (s % RING_SEGS)

    i_base = v_off + n_rings * RING_SEGS
    i_tip = i_base + 1
    faces, uvs = [], []
    x0, y0, x1, y1 = FINGER_ISLANDS[name]
    wid = x1 - x0
    body0, body1 = y0 + 0.04, y1 - 0.04  # fan strips live outside the body band

    def tube_uv(l, s):  # s may equal RING_SEGS on the seam
        return (x0 + wid * s / RING_SEGS,
                body0 + (body1 - body0) * l / (n_rings - 1))

    for l in range(n_rings - 1):
        for s in range(RING_SEGS):
            a, b = rv(l, s), rv(l, s + 1)
            c, e = rv(l + 1, s), rv(l + 1, s + 1)
            faces.append((a, b, e))
            uvs.append((tube_uv(l, s), tube_uv(l, s + 1), tube_uv(l + 1, s + 1)))
            faces.append((a, e, c))
            uvs.append((tube_uv(l, s), tube_uv(l + 1, s + 1), tube_uv(l + 1, s)))
    for s in range(RING_SEGS):  # base fan
        faces.append((i_base, rv(0, s + 1), rv(0, s)))
        uvs.append(((x0 + wid * (s + 0.5) / RING_SEGS, y0),
                    tube_uv(0, s + 1), tube_uv(0, s)))
    for s in range(RING_SEGS):  # tip fan
        faces.append((i_tip, rv(n_rings - 1, s), rv(n_rings - 1, s + 1)))
        uvs.append(((x0 + wid * (s + 0.5) / RING_SEGS, y1),
                    tube_uv(n_rings - 1, s), tube_uv(n_rings - 1, s + 1)))
    return verts, faces, uvs, i_base, i_tip


def _build_palm(v_off):
    xs = np.linspace(-0.045, 0.045, PALM_COLS)
    ys = np.linspace(0.0, 0.09, PALM_ROWS)
    gx, gy = np.meshgrid(xs, ys)               # (rows, cols)
    bulge = 0.010 + 0.002 * np.cos(np.pi * gx / 0.05) * np.sin(np.pi * gy / 0.09)
    top = np.stack([gx, gy, bulge], axis=-1).reshape(-1, 3)
    bottom = np.stack([gx, gy, -bulge], axis=-1).reshape(-1, 3)
    verts = np.vstack([top, bottom])

    def tid(r, c):
        return v_off + r * PALM_COLS + c

    def bid(r, c):
        return v_off + PALM_ROWS * PALM_COLS + r * PALM_COLS + c

    def island_uv(rect, r, c):
        u0, vv0, u1, vv1 = rect
        return (u0 + (u1 - u0) * c / (PALM_COLS - 1),
                vv0 + (vv1 - vv0) * r / (PALM_ROWS - 1))

    faces, uvs = [], []
    for r in range(PALM_ROWS - 1):
        for c in range(PALM_COLS - 1):
            for ids, rect in ((tid, PALM_TOP_ISLAND), (bid, PALM_BOTTOM_ISLAND)):
                a, b = ids(r, c), ids(r, c + 1)
                d, e = ids(r + 1, c), ids(r + 1, c + 1)
                faces.append((a, b, e))
                uvs.append((island_uv(rect, r, c), island_uv(rect, r, c + 1),
                            island_uv(rect, r + 1, c + 1)))
                faces.append((a, e, d))
                uvs.append((island_uv(rect, r, c), island_uv(rect, r + 1, c + 1),
                            island_uv(rect, r + 1, c)))

    # perimeter wall, one little UV rect per quad along a shared strip
    edge = []
    for c in range(PALM_COLS - 1):
        edge.append((tid(0, c), tid(0, c + 1), bid(0, c), bid(0, c + 1)))
    for r in range(PALM_ROWS - 1):
        edge.append((tid(r, PALM_COLS - 1), tid(r + 1, PALM_COLS - 1),
                     bid(r, PALM_COLS - 1), bid(r + 1, PALM_COLS - 1)))
    for c in range(PALM_COLS - 1, 0, -1):
        edge.append((tid(PALM_ROWS - 1, c), tid(PALM_ROWS - 1, c - 1),
                     bid(PALM_ROWS - 1, c), bid(PALM_ROWS - 1, c - 1)))
    for r in range(PALM_ROWS - 1, 0, -1):
        edge.append((tid(r, 0), tid(r - 1, 0), bid(r, 0), bid(r - 1, 0)))
    su0, sv0, su1, sv1 = SIDE_STRIP
    step = (su1 - su0) / len(edge)
    for i, (a, b, c, d) in enumerate(edge):
        ua, ub = su0 + i * step, su0 + (i + 1) * step
        faces.append((a, b, d))
        uvs.append(((ua, sv0), (ub, sv0), (ub, sv1)))
        faces.append((a, d, c))
        uvs.append(((ua, sv0), (ub, sv1), (ua, sv1)))
    return verts, faces, uvs, tid, bid


def generate_standin_template(seed=0) -> HandTemplate:
    """Deterministic synthetic hand with the canonical topology counts."""
    rng = np.random.Generator(np.random.PCG64(seed))

    verts_all, faces_all, uvs_all = [], [], []
    part = np.zeros(N_VERTS, dtype=np.int32)
    finger_info = {}
    v_off = 0
    for fi, name in enumerate(FINGER_NAMES):
        L = FINGER_RINGS[fi]
        v, f, uv, i_base, i_tip = _build_finger(name, L, v_off)
        part[v_off:v_off + len(v)] = fi + 1
        finger_info[name] = {"v_off": v_off, "rings": L, "base_apex": i_base, "tip_apex": i_tip}
        verts_all.append(v)
        faces_all.extend(f)
        uvs_all.extend(uv)
        v_off += len(v)
    palm_off = v_off
    pv, pf, puv, tid, bid = _build_palm(v_off)
    verts_all.append(pv)
    faces_all.extend(pf)
    uvs_all.extend(puv)
    v_off += len(pv)
    assert v_off == N_VERTS

    # webbing between adjacent non-thumb finger bases
    wu0, wv0, wu1, wv1 = WEBBING_AREA
    wstep = (wv1 - wv0) / 3
    for k, (fa, fb) in enumerate((("index", "middle"), ("middle", "ring"), ("ring", "pinky"))):
        ia, ib = finger_info[fa]["v_off"], finger_info[fb]["v_off"]
        # ring-0 and ring-1 vertices facing each other (segment 0 faces +u)
        a0, a1 = ia + 0, ia + RING_SEGS            # finger a, seg 0, rings 0/1
        b0, b1 = ib + 4, ib + RING_SEGS + 4        # finger b, seg 4, rings 0/1
        va, vb = wv0 + k * wstep + 0.005, wv0 + (k + 1) * wstep - 0.005
        faces_all.append((a0, b0, b1))
        uvs_all.append(((wu0, va), (wu1, va), (wu1, vb)))
        faces_all.append((a0, b1, a1))
        uvs_all.append(((wu0, va), (wu1, vb), (wu0, vb)))
    assert len(faces_all) == N_FACES

    vertices = np.vstack(verts_all).astype(np.float32)
    faces = np.asarray(faces_all, dtype=np.uint32)
    face_uvs = np.asarray(uvs_all, dtype=np.float32)

    # -- regressors ----------------------------------------------------
    joint_reg = np.zeros((N_JOINTS, N_VERTS), dtype=np.float32)
    key_reg = np.zeros((N_KEYPOINTS, N_VERTS), dtype=np.float32)
    parents = np.full(N_JOINTS, -1, dtype=np.int32)
    wrist_ids = [tid(0, c) for c in range(PALM_COLS)] + [bid(0, c) for c in range(PALM_COLS)]
    joint_reg[0, wrist_ids] = 1.0 / len(wrist_ids)
    key_reg[0, wrist_ids] = 1.0 / len(wrist_ids)

    def ring_ids(name, l):
        off = finger_info[name]["v_off"]
        return list(range(off + l * RING_SEGS, off + (l + 1) * RING_SEGS))

    knuckles = {}
    for fi, name in enumerate(FINGER_NAMES):
        L = finger_info[name]["rings"]
        rp = max(1, round((L - 1) / 3))
        rd = max(rp + 1, round(2 * (L - 1) / 3))
        knuckles[name] = (rp, rd)
        j_mcp, j_pip, j_dip = 1 + 3 * fi, 2 + 3 * fi, 3 + 3 * fi
        parents[j_mcp], parents[j_pip], parents[j_dip] = 0, j_mcp, j_pip
        for j, l in ((j_mcp, 0), (j_pip, rp), (j_dip, rd)):
            joint_reg[j, ring_ids(name, l)] = 1.0 / RING_SEGS
        k0 = 1 + 4 * fi
        for kk, l in ((k0, 0), (k0 + 1, rp), (k0 + 2, rd)):
            key_reg[kk, ring_ids(name, l)] = 1.0 / RING_SEGS
        key_reg[k0 + 3, finger_info[name]["tip_apex"]] = 1.0

    # -- skinning weights ----------------------------------------------
    weights = np.zeros((N_VERTS, N_JOINTS), dtype=np.float32)
    weights[palm_off:, 0] = 1.0
    for fi, name in enumerate(FINGER_NAMES):
        info = finger_info[name]
        L = info["rings"]
        rp, rd = knuckles[name]
        j_mcp, j_pip, j_dip = 1 + 3 * fi, 2 + 3 * fi, 3 + 3 * fi

        def ramp(t, at):
            return float(np.clip((t - (at - 1)) / 2.0, 0.0, 1.0))

        for l in range(L):
            a, b = ramp(l, rp), ramp(l, rd)
            row = {j_mcp: (1 - a), j_pip: a * (1 - b), j_dip: a * b}
            if l == 0:
                row = {0: 0.5, j_mcp: 0.5}
            for v in ring_ids(name, l):
                for j, wgt in row.items():
                    weights[v, j] = wgt
        weights[info["base_apex"], 0] = 0.7
        weights[info["base_apex"], j_mcp] = 0.3
        weights[info["tip_apex"], j_dip] = 1.0

    # -- shape basis ------------------------------------------------------
    # Smooth random scalar fields pushed along vertex normals: normal
    # displacement is what surface-distance losses can actually observe,
    # which keeps shape fitting well conditioned. QR keeps the 10 fields
    # orthogonal; each is scaled to a 5 mm peak.
    normals = _vertex_normals(vertices, faces)
    raw = np.zeros((N_VERTS, N_SHAPE))
    for k in range(N_SHAPE):
        s = np.zeros(N_VERTS)
        for _ in range(4):
            freq = rng.uniform(8.0, 30.0, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            s += rng.uniform(0.4, 1.0) * np.sin(vertices @ freq + phase)
        raw[:, k] = s
    q, _ = np.linalg.qr(raw)
    basis = np.zeros((N_VERTS, 3, N_SHAPE), dtype=np.float32)
    for k in range(N_SHAPE):
        fld = q[:, k][:, None] * normals
        peak = np.linalg.norm(fld, axis=1).max()
        basis[:, :, k] = (fld / peak * 0.005).astype(np.float32)

    tpl = HandTemplate(
        vertices=vertices, faces=faces, shape_basis=basis,
        skin_weights=weights, joint_parents=parents, face_uvs=face_uvs,
        keypoint_regressor=key_reg, joint_regressor=joint_reg,
        part_of_vertex=part,
    )
    return tpl.validate()


def vertex_part_labels(template: HandTemplate) -> np.ndarray:
    """0 = palm, 1..5 = thumb..pinky, derived from dominant skinning joint
    so it also works for externally loaded templates."""
    if template.part_of_vertex is not None:
        return template.part_of_vertex
    dom = template.skin_weights.argmax(axis=1)
    return np.where(dom == 0, 0, (dom - 1) // 3 + 1).astype(np.int32)


# ---------------------------------------------------------------------
# posing (differentiable through the tensor engine)
# ---------------------------------------------------------------------

# maps (wx, wy, wz) to the row-major flattened cross-product matrix
#   [ 0  -wz  wy]
#   [ wz  0  -wx]
#   [-wy  wx  0 ]
_SKEW = np.zeros((3, 9), dtype=np.float32)
_SKEW[0, 5], _SKEW[0, 7] = -1.0, 1.0
_SKEW[1, 2], _SKEW[1, 6] = 1.0, -1.0
_SKEW[2, 1], _SKEW[2, 3] = -1.0, 1.0


def _batch_rodrigues(omega):
    """(J,3) axis-angle -> (J,3,3) rotations, smooth at zero."""
    J = omega.shape[0]
    sq = eg.sum_(eg.square(omega), axis=1, keepdims=True)       # (J,1)
    angle = eg.sqrt(eg.add(sq, 1e-12))
    s = eg.div(eg.sin(angle), angle)                            # sin(a)/a
    c = eg.div(eg.sub(1.0, eg.cos(angle)), eg.add(sq, 1e-12))   # (1-cos a)/a^2
    K = eg.reshape(eg.matmul(omega, eg.Tensor(_SKEW)), (J, 3, 3))
    KK = eg.matmul(K, K)
    eye = eg.Tensor(np.broadcast_to(np.eye(3, dtype=np.float32), (J, 3, 3)).copy())
    s3 = eg.reshape(s, (J, 1, 1))
    c3 = eg.reshape(c, (J, 1, 1))
    return eg.add(eye, eg.add(eg.mul(s3, K), eg.mul(c3, KK)))


def pose_mesh(template: HandTemplate, beta, theta, translation):
    """Pose the hand; returns (vertices (778,3), keypoints (21,3)) tensors.

    beta (10,), theta (48,) = root orientation + 15 joint axis-angles,
    translation (3,). All three may be engine tensors, in which case the
    outputs are differentiable with respect to them.
    """
    beta = beta if isinstance(beta, eg.Tensor) else eg.Tensor(beta)
    theta = theta if isinstance(theta, eg.Tensor) else eg.Tensor(theta)
    translation = translation if isinstance(translation, eg.Tensor) else eg.Tensor(translation)

    basis = eg.Tensor(template.shape_basis.reshape(N_VERTS * 3, N_SHAPE))
    shaped = eg.add(eg.Tensor(template.vertices),
                    eg.reshape(eg.matmul(basis, eg.reshape(beta, (N_SHAPE, 1))),
                               (N_VERTS, 3)))
    joints = eg.matmul(eg.Tensor(template.joint_regressor), shaped)   # (16,3)

    rots = _batch_rodrigues(eg.reshape(theta, (N_JOINTS, 3)))         # (16,3,3)

    # compose transforms root -> leaf; each G is a (3,4) [R|t] block
    parents = template.joint_parents
    bottom = eg.Tensor(np.array([[0.0, 0.0, 0.0, 1.0]], dtype=np.float32))
    G = [None] * N_JOINTS
    G4 = [None] * N_JOINTS
    for j in range(N_JOINTS):
        R_j = rots[j]                                       # (3,3)
        if parents[j] < 0:
            t_j = eg.reshape(joints[j], (3, 1))
        else:
            t_j = eg.reshape(eg.sub(joints[j], joints[parents[j]]), (3, 1))
        A = eg.concat([R_j, t_j], axis=1)                   # (3,4)
        A4 = eg.concat([A, bottom], axis=0)                 # (4,4)
        if parents[j] < 0:
            G4[j] = A4
        else:
            G4[j] = eg.matmul(G4[parents[j]], A4)
        G[j] = G4[j][0:3, :]

    # remove the rest pose: t' = t - R @ j_rest
    Gs = eg.concat([eg.reshape(g, (1, 3, 4)) for g in G], axis=0)     # (16,3,4)
    R_all = Gs[:, :, 0:3]
    t_all = Gs[:, :, 3]
    t_rel = eg.sub(t_all, eg.reshape(eg.matmul(R_all, eg.reshape(joints, (N_JOINTS, 3, 1))),
                                     (N_JOINTS, 3)))

    # blend per vertex: (778,16) @ (16,12) -> per-vertex [R|t]
    W = eg.Tensor(template.skin_weights)
    RT = eg.concat([eg.reshape(R_all, (N_JOINTS, 9)), t_rel], axis=1)  # (16,12)
    vRT = eg.matmul(W, RT)                                             # (778,12)
    vR = eg.reshape(vRT[:, 0:9], (N_VERTS, 3, 3))
    vt = vRT[:, 9:12]
    posed = eg.add(eg.reshape(eg.matmul(vR, eg.reshape(shaped, (N_VERTS, 3, 1))),
                              (N_VERTS, 3)), vt)
    posed = eg.add(posed, eg.reshape(translation, (1, 3)))
    keypoints = eg.matmul(eg.Tensor(template.keypoint_regressor), posed)
    return posed, keypoints


def rest_keypoints(template: HandTemplate) -> np.ndarray:
    return template.keypoint_regressor @ template.vertices


# ---------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------

class RasterGeometry:
    """Texel coverage of a template's UV atlas at one resolution.

    Coverage depends only on the (immutable) per-face UVs, so the
    triangle-inside tests run once; rasterizing a vertex field afterwards
    is a flat gather. Built lazily and memoized per (template, size).
    """

    def __init__(self, template: HandTemplate, width, height):
        if width < 1 or height < 1:
            raise DataError(f"rasterize: bad size {width}x{height}")
        self.width, self.height = width, height
        mask = np.zeros((height, width), dtype=np.uint8)
        face_ids = np.full((height, width), -1, dtype=np.int32)
        tex_rows, tex_cols = [], []
        tri_ids, bary = [], []
        skipped = 0

        # texel (ix, iy) has its center at UV-pixel coords (ix+.5, iy+.5)
        px = template.face_uvs[:, :, 0].astype(np.float64) * width
        py = template.face_uvs[:, :, 1].astype(np.float64) * height
        for f in range(N_FACES):
            xs, ys = px[f], py[f]
            area2 = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (ys[1] - ys[0]) * (xs[2] - xs[0])
            order = (0, 1, 2)
            if area2 < 0:
                order = (0, 2, 1)
                xs, ys = xs[list(order)], ys[list(order)]
                area2 = -area2
            if area2 < 1e-12:
                skipped += 1
                continue
            ix0 = max(int(np.floor(xs.min() - 0.5)), 0)
            ix1 = min(int(np.ceil(xs.max() - 0.5)), width - 1)
            iy0 = max(int(np.floor(ys.min() - 0.5)), 0)
            iy1 = min(int(np.ceil(ys.max() - 0.5)), height - 1)
            if ix1 < ix0 or iy1 < iy0:
                continue
            gx, gy = np.meshgrid(np.arange(ix0, ix1 + 1, dtype=np.float64) + 0.5,
                                 np.arange(iy0, iy1 + 1, dtype=np.float64) + 0.5)
            inside = np.ones(gx.shape, dtype=bool)
            edges = []
            for i in range(3):
                ax, ay = xs[i], ys[i]
                bx, by = xs[(i + 1) % 3], ys[(i + 1) % 3]
                e = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
                dy, dx = by - ay, bx - ax
                # ties on shared edges go to the top-left owner
                top_left = (dy < 0) or (dy == 0 and dx > 0)
                inside &= (e > 0) | ((e == 0) & top_left)
                edges.append(e)
            if not inside.any():
                continue
            ry, rx = np.nonzero(inside)
            w = np.stack([edges[1][inside], edges[2][inside], edges[0][inside]],
                         axis=1) / area2
            tri = template.faces[f][list(order)].astype(np.int64)
            tex_rows.append(ry + iy0)
            tex_cols.append(rx + ix0)
            tri_ids.append(np.broadcast_to(tri, (len(ry), 3)))
            bary.append(w)
            mask[ry + iy0, rx + ix0] = 1
            face_ids[ry + iy0, rx + ix0] = f

        self.skipped = skipped
        self.mask = mask
        self.face_ids = face_ids
        if tex_rows:
            self.rows = np.concatenate(tex_rows)
            self.cols = np.concatenate(tex_cols)
            self.tris = np.concatenate(tri_ids)
            self.bary = np.concatenate(bary).astype(np.float64)
        else:
            self.rows = np.zeros(0, dtype=np.int64)
            self.cols = np.zeros(0, dtype=np.int64)
            self.tris = np.zeros((0, 3), dtype=np.int64)
            self.bary = np.zeros((0, 3))

    def render(self, vertex_values) -> np.ndarray:
        vals = np.asarray(vertex_values, dtype=np.float64)
        out = np.zeros((self.height, self.width), dtype=np.float32)
        tex = (self.bary * vals[self.tris]).sum(axis=1)
        out[self.rows, self.cols] = tex.astype(np.float32)
        return out


_GEOMETRY_CACHE: dict = {}


def raster_geometry(template: HandTemplate, width, height) -> RasterGeometry:
    key = (id(template), width, height)
    hit = _GEOMETRY_CACHE.get(key)
    if hit is None or hit[0] is not template:
        hit = (template, RasterGeometry(template, width, height))
        _GEOMETRY_CACHE[key] = hit
    return hit[1]


def rasterize_vertex_values(mesh_values, template: HandTemplate, width, height,
                            return_face_ids=False):
    """Barycentric rasterization of a per-vertex scalar field.

    A texel belongs to a triangle when its center lies inside the UV
    triangle; texels covered by nothing stay 0 with a 0 mask bit.
    Returns (UVMap, skipped_degenerate_count) and optionally the covering
    face id per texel (-1 where uncovered).
    """
    vals = np.asarray(mesh_values, dtype=np.float32)
    if vals.shape != (N_VERTS,):
        raise DataError(f"rasterize: expected {N_VERTS} vertex values, got {vals.shape}")
    geo = raster_geometry(template, width, height)
    uv = UVMap(width, height, geo.render(vals), geo.mask.copy())
    if return_face_ids:
        return uv, geo.skipped, geo.face_ids.copy()
    return uv, geo.skipped


# ---------------------------------------------------------------------
# UTH-HAND1 file format
# ---------------------------------------------------------------------

_HAND_FIELDS = (
    ("vertices", "f4", (N_VERTS, 3)),
    ("faces", "u4", (N_FACES, 3)),
    ("shape_basis", "f4", (N_VERTS, 3, N_SHAPE)),
    ("skin_weights", "f4", (N_VERTS, N_JOINTS)),
    ("joint_parents", "i4", (N_JOINTS,)),
    ("face_uvs", "f4", (N_FACES, 3, 2)),
    ("keypoint_regressor", "f4", (N_KEYPOINTS, N_VERTS)),
    ("joint_regressor", "f4", (N_JOINTS, N_VERTS)),
    ("part_of_vertex", "i4", (N_VERTS,)),
)


def save_template(path, template: HandTemplate) -> None:
    header = {
        "counts": {"vertices": N_VERTS, "faces": N_FACES, "joints": N_JOINTS,
                   "shape": N_SHAPE, "keypoints": N_KEYPOINTS},
        "fields": [{"name": n, "dtype": d, "shape": list(s)} for n, d, s in _HAND_FIELDS],
    }
    arrays = [(getattr(template, n), d) for n, d, _ in _HAND_FIELDS]
    write_container(path, HAND_MAGIC, header, arrays)


def load_template(path) -> HandTemplate:
    header, raw, off = read_container(path, HAND_MAGIC)
    if "fields" not in header or "counts" not in header:
        raise FormatError(f"{path}: hand header missing counts/fields")
    got = {}
    for fld in header["fields"]:
        arr, off = take_array(path, raw, off, tuple(fld["shape"]), fld["dtype"])
        got[fld["name"]] = arr
    missing = {n for n, _, _ in _HAND_FIELDS} - set(got)
    if missing:
        raise FormatError(f"{path}: missing fields {sorted(missing)}")
    tpl = HandTemplate(**{n: got[n] for n, _, _ in _HAND_FIELDS})
    return tpl.validate()

"""Paired trajectories on disk, splits, augmentation, and the simulator.

A trajectory file ("UTH-TRAJ1") holds synchronized glove and robot-hand
records: per frame a timestamp, raw tactile vectors, poses, and (after the
projection stage) the two 391-dim UV feature vectors. The dataset manifest
(manifest.json) freezes everything that must agree bit-exactly between
training and evaluation: the object split, the UV grid cell list, and the
per-domain normalization constants.

The simulator stands in for a paired tele-op capture: each trajectory picks
an object signature (contact centers on the canonical mesh plus a stiffness)
and a smooth grasp curve; glove readings integrate the resulting pressure
field over each sensor patch while taxel readings sample the same field at
their rest-pose mesh anchors, so the two domains stay genuinely correlated.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import hand as hm
from . import projection as pj
from .container import read_container, take_array, write_container
from .errors import DataError, FormatError
from .layouts import (GLOVE_REGIONS, KEYPOINT_FINGER, ROBOT_JOINT_FINGER,
                      GloveLayout, MatchTable, default_glove_layout,
                      default_match_table)
from .robot import RobotHandModel, RobotState, default_hand, robot_keypoints, taxel_world_quads

TRAJ_MAGIC = b"UTH-TRAJ1"

DIM_T_H, DIM_P_H, DIM_T_R, DIM_P_R = 137, 60, 1062, 6


def _worker_count() -> int:
    """Worker cap from the UTH_THREADS environment variable (default 1;
    single-worker mode is the deterministic reference)."""
    try:
        return max(1, int(os.environ.get("UTH_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Trajectory:
    object_label: str
    hz: float
    timestamps: np.ndarray            # (T,)
    t_h: np.ndarray                   # (T, 137)
    p_h: np.ndarray                   # (T, 60)
    t_r: np.ndarray                   # (T, 1062)
    p_r: np.ndarray                   # (T, 6)
    u_h: np.ndarray | None = None     # (T, 391) after projection
    u_r: np.ndarray | None = None

    def __len__(self):
        return len(self.timestamps)

    def validate(self):
        if self.hz <= 0:
            raise DataError(f"trajectory {self.object_label!r}: frame rate must be > 0")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError(f"trajectory {self.object_label!r}: timestamps must "
                            "strictly increase")
        for name, arr, dim in (("t_h", self.t_h, DIM_T_H), ("p_h", self.p_h, DIM_P_H),
                               ("t_r", self.t_r, DIM_T_R), ("p_r", self.p_r, DIM_P_R)):
            if arr.shape != (len(self), dim):
                raise DataError(f"trajectory field {name}: shape {arr.shape}, "
                                f"expected ({len(self)}, {dim})")
            if not np.isfinite(arr).all():
                raise DataError(f"trajectory field {name}: non-finite values")
        return self


def save_trajectory(path, traj: Trajectory) -> None:
    fields = [("t", 1), ("t_h", DIM_T_H), ("p_h", DIM_P_H),
              ("t_r", DIM_T_R), ("p_r", DIM_P_R)]
    cols = [traj.timestamps.reshape(-1, 1), traj.t_h, traj.p_h, traj.t_r, traj.p_r]
    if traj.u_h is not None:
        fields += [("u_h", traj.u_h.shape[1]), ("u_r", traj.u_r.shape[1])]
        cols += [traj.u_h, traj.u_r]
    header = {"object": traj.object_label, "hz": traj.hz, "frames": len(traj),
              "fields": [{"name": n, "dim": d} for n, d in fields]}
    block = np.concatenate([c.astype(np.float32) for c in cols], axis=1)
    write_container(path, TRAJ_MAGIC, header, [(block, "f4")])


def load_trajectory(path) -> Trajectory:
    header, raw, off = read_container(path, TRAJ_MAGIC)
    for key in ("object", "hz", "frames", "fields"):
        if key not in header:
            raise FormatError(f"{path}: trajectory header missing {key!r}")
    frames = int(header["frames"])
    dims = [(f["name"], int(f["dim"])) for f in header["fields"]]
    total = sum(d for _, d in dims)
    block, off = take_array(path, raw, off, (frames, total), "f4")
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    cols = {}
    at = 0
    for name, d in dims:
        cols[name] = block[:, at:at + d].copy()
        at += d
    try:
        traj = Trajectory(header["object"], float(header["hz"]),
                          cols["t"].reshape(-1), cols["t_h"], cols["p_h"],
                          cols["t_r"], cols["p_r"],
                          cols.get("u_h"), cols.get("u_r"))
    except KeyError as e:
        raise FormatError(f"{path}: trajectory missing field {e}") from e
    return traj.validate()


# ---------------------------------------------------------------------
# samples and augmentation
# ---------------------------------------------------------------------

@dataclass
class PairedSample:
    t_h: np.ndarray
    p_h: np.ndarray
    u_h: np.ndarray
    t_r: np.ndarray
    p_r: np.ndarray
    u_r: np.ndarray

    def copy(self):
        return PairedSample(*(getattr(self, f).copy() for f in _SAMPLE_FIELDS))


_SAMPLE_FIELDS = ("t_h", "p_h", "u_h", "t_r", "p_r", "u_r")
_TACTILE_FIELDS = ("t_h", "u_h", "t_r", "u_r")
_POSE_FIELDS = ("p_h", "p_r")


@dataclass
class AugmentConfig:
    enable_linear_interp: bool = True
    enable_noise: bool = True
    noise_sigma: float = 0.03
    enable_dropout: bool = True
    dropout_p: float = 0.005
    finger_subset_mode: bool = True

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be >= 0")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise DataError("dropout probability must be in [0,1]")

    @classmethod
    def none(cls):
        return cls(enable_linear_interp=False, enable_noise=False,
                   enable_dropout=False, finger_subset_mode=False)


def _check_lambda(lam, name):
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"{name} must be in [0,1], got {lam}")


def interp_pair(a: PairedSample, b: PairedSample, lam1, lam2) -> PairedSample:
    """Convex blend of two paired samples: tactile fields share lam1, pose
    fields share lam2, and both domains use the same coefficients."""
    _check_lambda(lam1, "lam1")
    _check_lambda(lam2, "lam2")
    l1, l2 = np.float32(lam1), np.float32(lam2)
    out = {}
    for f in _TACTILE_FIELDS:
        out[f] = l1 * getattr(a, f) + (np.float32(1.0) - l1) * getattr(b, f)
    for f in _POSE_FIELDS:
        out[f] = l2 * getattr(a, f) + (np.float32(1.0) - l2) * getattr(b, f)
    return PairedSample(**out)


@dataclass
class FingerMaps:
    """Boolean membership masks per finger for every sample field."""

    masks: dict  # finger -> {field -> bool array}

    @classmethod
    def build(cls, glove: GloveLayout, robot_model: RobotHandModel,
              grid_spec=None) -> "FingerMaps":
        fingers = ("thumb", "index", "middle", "ring", "pinky")
        taxel_fingers = []
        for p in robot_model.patches:
            taxel_fingers.extend([p.finger] * (p.rows * p.cols))
        cell_fingers = list(grid_spec.cell_fingers) if grid_spec is not None else []
        masks = {}
        for f in fingers:
            m = {
                "t_h": np.array([s.region == f for s in glove.sensors]),
                "t_r": np.array([tf == f for tf in taxel_fingers]),
                "p_h": np.repeat(np.array([kf == f for kf in KEYPOINT_FINGER]), 3),
                "p_r": np.array([jf == f for jf in ROBOT_JOINT_FINGER]),
            }
            if cell_fingers:
                cell = np.array([cf == f for cf in cell_fingers])
                m["u_h"] = cell
                m["u_r"] = cell.copy()
            else:
                m["u_h"] = None
                m["u_r"] = None
            masks[f] = m
        return cls(masks)


def interp_finger_subset(a: PairedSample, b: PairedSample, fingers,
                         lam1, lam2, maps: FingerMaps) -> PairedSample:
    """Blend only the entries belonging to the chosen fingers; everything
    else is copied from `a`. Unknown finger names are rejected."""
    _check_lambda(lam1, "lam1")
    _check_lambda(lam2, "lam2")
    bad = set(fingers) - set(maps.masks)
    if bad:
        raise DataError(f"unknown fingers {sorted(bad)}")
    if not fingers:
        return a.copy()
    out = a.copy()
    l1, l2 = np.float32(lam1), np.float32(lam2)
    for f in fingers:
        for fld, lam in (zip(_TACTILE_FIELDS, (l1,) * 4)):
            mask = maps.masks[f][fld]
            if mask is None:
                continue
            av, bv = getattr(a, fld), getattr(b, fld)
            getattr(out, fld)[mask] = lam * av[mask] + (np.float32(1.0) - lam) * bv[mask]
        for fld in _POSE_FIELDS:
            mask = maps.masks[f][fld]
            av, bv = getattr(a, fld), getattr(b, fld)
            getattr(out, fld)[mask] = l2 * av[mask] + (np.float32(1.0) - l2) * bv[mask]
    return out


def add_noise_dropout(sample: PairedSample, cfg: AugmentConfig,
                      rng: np.random.Generator) -> PairedSample:
    """Gaussian noise (clamped at zero) then independent sensor dropout on
    the raw tactile vectors; poses and UV features pass through."""
    out = sample.copy()
    for fld in ("t_h", "t_r"):
        v = getattr(out, fld)
        if cfg.enable_noise and cfg.noise_sigma > 0:
            v += rng.normal(0.0, cfg.noise_sigma, size=v.shape).astype(np.float32)
            np.maximum(v, 0.0, out=v)
        if cfg.enable_dropout and cfg.dropout_p > 0:
            keep = rng.random(v.shape) >= cfg.dropout_p
            v *= keep
    return out


# ---------------------------------------------------------------------
# PatchMatch baseline
# ---------------------------------------------------------------------

def patch_match_h2r(t_h, table: MatchTable) -> np.ndarray:
    """Broadcast each glove partition's mean onto its paired taxel set."""
    t_h = np.asarray(t_h, dtype=np.float32)
    n_robot = sum(len(p["robot"]) for p in table.pairs)
    out = np.zeros(n_robot, dtype=np.float32)
    for p in table.pairs:
        out[p["robot"]] = t_h[p["glove"]].mean(dtype=np.float64)
    return out


def patch_match_r2h(t_r, table: MatchTable) -> np.ndarray:
    t_r = np.asarray(t_r, dtype=np.float32)
    n_glove = sum(len(p["glove"]) for p in table.pairs)
    out = np.zeros(n_glove, dtype=np.float32)
    for p in table.pairs:
        out[p["glove"]] = t_r[p["robot"]].mean(dtype=np.float64)
    return out


# ---------------------------------------------------------------------
# manifest and dataset access
# ---------------------------------------------------------------------

@dataclass
class Manifest:
    objects: list
    trajectories: list                 # [{"file", "object", "frames"}]
    split: dict                        # {"train": [ids], "val": [ids]}
    seed: int
    stratified: bool = True
    uv: dict = field(default_factory=lambda: {"width": 64, "height": 64})
    normalization: dict | None = None  # {"human_max", "robot_max"}
    grid_spec: dict | None = None
    fit: dict | None = None
    template_seed: int = 0

    def to_json(self) -> dict:
        return {"objects": self.objects, "trajectories": self.trajectories,
                "split": self.split, "seed": self.seed,
                "stratified": self.stratified, "uv": self.uv,
                "normalization": self.normalization, "grid_spec": self.grid_spec,
                "fit": self.fit, "template_seed": self.template_seed}

    @classmethod
    def from_json(cls, doc) -> "Manifest":
        return cls(objects=doc["objects"], trajectories=doc["trajectories"],
                   split=doc["split"], seed=doc["seed"],
                   stratified=doc.get("stratified", True), uv=doc["uv"],
                   normalization=doc.get("normalization"),
                   grid_spec=doc.get("grid_spec"), fit=doc.get("fit"),
                   template_seed=doc.get("template_seed", 0))


def save_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        return Manifest.from_json(json.load(fh))


def stratified_split(traj_objects, traj_frames, ratio=0.7, seed=0,
                     stratified=True, tolerance=0.02):
    """Assign trajectory ids to train/val by frame count.

    In stratified mode whole objects move together so no label spans both
    splits; a greedy pass over seed-shuffled objects lands within the
    tolerance or raises.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    total = sum(traj_frames)
    if stratified:
        objects = sorted(set(traj_objects))
        sizes = {o: sum(f for oo, f in zip(traj_objects, traj_frames) if oo == o)
                 for o in objects}
        order = rng.permutation(len(objects))
        train_objs = set()
        acc = 0
        for oi in order:
            size = sizes[objects[oi]]
            # grow the train side only while it moves the ratio closer
            if abs((acc + size) / total - ratio) >= abs(acc / total - ratio):
                continue
            acc += size
            train_objs.add(objects[oi])
        train = [i for i, o in enumerate(traj_objects) if o in train_objs]
        val = [i for i, o in enumerate(traj_objects) if o not in train_objs]
    else:
        order = rng.permutation(len(traj_objects))
        train, val, acc = [], [], 0
        for i in order:
            if acc < ratio * total:
                train.append(int(i))
                acc += traj_frames[i]
            else:
                val.append(int(i))
        train.sort()
        val.sort()
    got = sum(traj_frames[i] for i in train) / total
    if abs(got - ratio) > tolerance:
        raise DataError(f"split ratio {got:.3f} misses {ratio} by more than "
                        f"{tolerance}; adjust the object catalog")
    return {"train": train, "val": val}


class PairedDataset:
    """Loaded dataset: trajectories in memory plus flattened split views."""

    def __init__(self, root):
        self.root = root
        self.manifest = load_manifest(os.path.join(root, "manifest.json"))
        self.trajectories = [load_trajectory(os.path.join(root, t["file"]))
                             for t in self.manifest.trajectories]

    def has_features(self):
        return all(t.u_h is not None for t in self.trajectories)

    def frames(self, split):
        """Stack all frames of a split; returns dict of arrays plus an
        index of (trajectory id, frame id) rows."""
        ids = self.manifest.split.get(split)
        if ids is None:
            raise DataError(f"unknown split {split!r}")
        if not ids:
            raise DataError(f"split {split!r} is empty")
        cols = {f: [] for f in _SAMPLE_FIELDS}
        index = []
        labels = []
        for ti in ids:
            traj = self.trajectories[ti]
            if traj.u_h is None:
                raise DataError("dataset has no UV features; run the projection stage")
            for f in _SAMPLE_FIELDS:
                cols[f].append(getattr(traj, f))
            index.extend((ti, k) for k in range(len(traj)))
            labels.extend([traj.object_label] * len(traj))
        out = {f: np.concatenate(cols[f], axis=0) for f in _SAMPLE_FIELDS}
        out["index"] = index
        out["object"] = labels
        return out

    def sample(self, split, i) -> PairedSample:
        fr = self.frames(split)
        return PairedSample(*(fr[f][i].copy() for f in _SAMPLE_FIELDS))


# ---------------------------------------------------------------------
# synthetic paired capture
# ---------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_objects: int = 10
    n_trajectories: int = 60
    frames_per_traj: int = 24
    hz: float = 40.0
    seed: int = 0
    template_seed: int = 0
    uv_size: int = 64
    stratified: bool = True


# finger curl directions for the canonical hand: MCP/PIP/DIP rotate about
# the local x axis; the thumb adds an abduction component
_CURL_AXIS = np.array([1.0, 0.0, 0.0])


def _grasp_theta(g, amp, wiggle):
    """48-dim canonical pose at grip closure g in [0,1]."""
    theta = np.zeros(48, dtype=np.float64)
    for fi in range(5):
        for j in range(3):
            idx = 3 * (3 * fi + j)  # joint (1 + 3*fi + j), component x
            theta[3 + idx] = -(0.35 + 0.3 * (j == 1)) * amp[fi] * g + wiggle[fi, j]
    return theta.astype(np.float32)


def _grasp_q(g, amp, wiggle_q):
    q = -np.array([amp[1], amp[2], amp[3], amp[4], 0.0, amp[0]]) * 1.2 * g
    q[4] = 0.5 * amp[0] * g          # thumb abduction closes toward the palm
    return np.clip(q + wiggle_q, -1.6, 1.25)


def synth_paired_dataset(out_dir, config: SynthConfig) -> Manifest:
    """Simulate grasp episodes and write raw trajectories plus a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    template = hm.generate_standin_template(config.template_seed)
    glove = default_glove_layout()
    robot = default_hand()
    rng = np.random.Generator(np.random.PCG64(config.seed))

    members = [ids for ids, _ in pj.glove_members(glove, template)]

    # taxel anchors: nearest template vertex at the reference pose
    state0 = RobotState(np.zeros(6))
    rkp = robot_keypoints(robot, state0)
    wrist_shift = rkp[0] - hm.rest_keypoints(template)[0]
    quads = taxel_world_quads(robot, state0) - wrist_shift
    centers = quads.mean(axis=1)
    anchors = cKDTree(template.vertices.astype(np.float64)).query(centers)[1]

    objects = [f"object_{k:02d}" for k in range(config.n_objects)]
    signatures = {}
    for k, label in enumerate(objects):
        orng = np.random.Generator(np.random.PCG64((config.seed, 1000 + k)))
        n_contacts = int(orng.integers(3, 7))
        contact_verts = orng.integers(0, hm.N_VERTS, size=n_contacts)
        sigma = orng.uniform(0.012, 0.03, size=n_contacts)
        stiffness = float(orng.uniform(0.6, 1.4))
        signatures[label] = (contact_verts, sigma, stiffness)

    # per-vertex field strength per object (rest geometry)
    fields = {}
    for label, (cv, sigma, stiff) in signatures.items():
        d2 = ((template.vertices[:, None, :] - template.vertices[cv][None, :, :]) ** 2).sum(-1)
        fields[label] = (stiff * np.exp(-d2 / (2 * sigma ** 2)[None, :]).max(axis=1))

    entries = []
    for ti in range(config.n_trajectories):
        label = objects[ti % config.n_objects]
        trng = np.random.Generator(np.random.PCG64((config.seed, 2000 + ti)))
        T = config.frames_per_traj
        ts = (np.arange(T) / config.hz).astype(np.float32)
        amp = trng.uniform(0.6, 1.0, size=5)
        phase = trng.uniform(0, 2 * np.pi, size=(5, 3))
        qphase = trng.uniform(0, 2 * np.pi, size=6)
        gain_r = trng.uniform(0.85, 1.0)
        fld = fields[label]

        t_h = np.zeros((T, DIM_T_H), dtype=np.float32)
        p_h = np.zeros((T, DIM_P_H), dtype=np.float32)
        t_r = np.zeros((T, DIM_T_R), dtype=np.float32)
        p_r = np.zeros((T, DIM_P_R), dtype=np.float32)
        for k in range(T):
            tt = k / max(T - 1, 1)
            g = 0.5 * (1.0 - np.cos(np.pi * np.clip(tt / 0.55, 0, 1)))  # close and hold
            wig = 0.06 * np.sin(2 * np.pi * (1.3 * tt) + phase)
            theta = _grasp_theta(g, amp, wig)
            wig_q = 0.05 * np.sin(2 * np.pi * (1.3 * tt) + qphase)
            q = _grasp_q(g, amp, wig_q).astype(np.float32)

            _, kp = hm.pose_mesh(template, np.zeros(10, dtype=np.float32), theta,
                                 np.zeros(3, dtype=np.float32))
            kp = kp.data
            p_h[k] = (kp[1:] - kp[0]).reshape(-1)
            p_r[k] = q
            press = fld * g
            for sid, ids in enumerate(members):
                t_h[k, sid] = press[ids].mean() if len(ids) else 0.0
            t_r[k] = np.power(press[anchors] * gain_r, 1.1)

        traj = Trajectory(label, config.hz, ts, t_h, p_h, t_r, p_r).validate()
        fname = f"traj_{ti:04d}.uth"
        save_trajectory(os.path.join(out_dir, fname), traj)
        entries.append({"file": fname, "object": label, "frames": T})

    split = stratified_split([e["object"] for e in entries],
                             [e["frames"] for e in entries],
                             seed=config.seed, stratified=config.stratified)
    manifest = Manifest(objects=objects, trajectories=entries, split=split,
                        seed=config.seed, stratified=config.stratified,
                        uv={"width": config.uv_size, "height": config.uv_size},
                        template_seed=config.template_seed)
    save_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


# ---------------------------------------------------------------------
# projection stage: raw trajectories -> UV features
# ---------------------------------------------------------------------

def project_dataset(root, fit_iters=800, retarget_iters=120, seed=0,
                    feature_dim=391, log=None) -> Manifest:
    """Run stage 1 over every trajectory in place: fit the shape once,
    retarget frame by frame (warm-started within a trajectory), rasterize
    and smooth both domains, freeze the UV grid spec and normalization
    constants, and rewrite the files with u_h/u_r attached."""
    manifest = load_manifest(os.path.join(root, "manifest.json"))
    template = hm.generate_standin_template(manifest.template_seed)
    glove = default_glove_layout()
    robot = default_hand()
    W, H = manifest.uv["width"], manifest.uv["height"]

    fit = pj.fit_shape_to_robot(robot, template, iters=fit_iters, seed=seed,
                                stop_cd=1e-7)
    beta_star = fit.beta
    if log:
        log(f"shape fit: cd={fit.loss_cd:.3e} key={fit.loss_key:.3e} "
            f"iters={fit.iterations}")

    labels = hm.vertex_part_labels(template)
    ones, _, face_ids = hm.rasterize_vertex_values(
        np.ones(hm.N_VERTS, dtype=np.float32), template, W, H, return_face_ids=True)
    texel_fingers = np.where(
        face_ids >= 0, labels[template.faces[np.maximum(face_ids, 0), 0]], -1)
    spec = pj.build_grid_spec(ones.mask, max(1, W // 32), dim=feature_dim,
                              texel_fingers=texel_fingers)
    members = pj.glove_members(glove, template)

    def _project_one(entry):
        traj = load_trajectory(os.path.join(root, entry["file"]))
        theta = np.zeros(48, dtype=np.float32)
        maps_h, maps_r = [], []
        for k in range(len(traj)):
            state = RobotState(traj.p_r[k].astype(np.float64))
            target = robot_keypoints(robot, state)
            res = pj.retarget_pose(target, template, beta_star, theta,
                                   max_iters=retarget_iters)
            theta = res.theta
            um_h = pj.project_human(traj.t_h[k], glove, template, W, H,
                                    members=members)
            um_r, _ = pj.project_robot(traj.t_r[k], robot, state, template,
                                       beta_star, theta, W, H)
            maps_h.append(pj.smooth_and_mask(um_h))
            maps_r.append(pj.smooth_and_mask(um_r))
        if log:
            log(f"projected {entry['file']} ({len(traj)} frames)")
        return maps_h, maps_r

    workers = _worker_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            smoothed = list(pool.map(_project_one, manifest.trajectories))
    else:
        smoothed = [_project_one(e) for e in manifest.trajectories]

    def robust_max(maps):
        vals = np.concatenate([m.values[m.values > 0] for ms in maps for m in ms
                               if (m.values > 0).any()] or [np.zeros(1)])
        return float(np.percentile(vals, 99.5)) if vals.size else 1.0

    h_max = robust_max([s[0] for s in smoothed]) or 1.0
    r_max = robust_max([s[1] for s in smoothed]) or 1.0

    for ti, entry in enumerate(manifest.trajectories):
        traj = load_trajectory(os.path.join(root, entry["file"]))
        maps_h, maps_r = smoothed[ti]
        u_h = np.stack([pj.uv_feature(_renorm(m, h_max), spec) for m in maps_h])
        u_r = np.stack([pj.uv_feature(_renorm(m, r_max), spec) for m in maps_r])
        traj = replace(traj, u_h=u_h, u_r=u_r)
        save_trajectory(os.path.join(root, entry["file"]), traj)

    manifest.normalization = {"human_max": h_max, "robot_max": r_max}
    manifest.grid_spec = spec.to_json()
    manifest.fit = {"beta": [float(b) for b in beta_star],
                    "loss_cd": fit.loss_cd, "loss_key": fit.loss_key,
                    "iterations": fit.iterations}
    save_manifest(os.path.join(root, "manifest.json"), manifest)
    return manifest


def _renorm(uvmap, norm_max):
    from .uvmap import UVMap
    vals = np.clip(uvmap.values / norm_max, 0.0, 1.0).astype(np.float32)
    return UVMap(uvmap.width, uvmap.height, vals * uvmap.mask, uvmap.mask)

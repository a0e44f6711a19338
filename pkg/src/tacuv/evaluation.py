"""Post-training analysis: similarity heatmaps, cross-modal reconstruction,
latent additivity, embedding export, and the frozen-feature domain probe."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .data import PairedDataset, Trajectory
from .errors import DataError
from .model import AlignmentModel, ModelConfig
from .optim import AdamState, adam_step, zero_grads
from .uvmap import write_pgm16


def trajectory_latents(model: AlignmentModel, traj: Trajectory):
    if traj.u_h is None:
        raise DataError("trajectory has no UV features; run the projection stage")
    e_h, z_h = model.encode_human(traj.t_h, traj.p_h)
    e_r, z_r = model.encode_robot(traj.t_r, traj.p_r)
    return e_h.data, z_h.data, e_r.data, z_r.data


def _normalize_rows(z):
    return z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)


@dataclass
class HeatmapReport:
    matrix: np.ndarray
    diag_mean: float
    offdiag_mean: float

    @property
    def margin(self):
        return self.diag_mean - self.offdiag_mean


def heatmap(model: AlignmentModel, traj: Trajectory, image_path=None) -> HeatmapReport:
    """Frame-by-frame cosine similarity between the two latent sequences;
    a well-aligned pair shows a bright diagonal."""
    if len(traj) < 2:
        raise DataError("heatmap needs a trajectory with at least 2 frames")
    _, z_h, _, z_r = trajectory_latents(model, traj)
    m = _normalize_rows(z_h) @ _normalize_rows(z_r).T
    n = len(m)
    diag = float(np.trace(m) / n)
    off = float((m.sum() - np.trace(m)) / (n * n - n))
    if image_path is not None:
        write_pgm16(image_path, m)
    return HeatmapReport(m, diag, off)


@dataclass
class CrossModalReport:
    predictions: np.ndarray      # (B, 391)
    mse: np.ndarray              # (B,) per-sample mean squared error
    mean: float
    median: float


def cross_modal_recon(model: AlignmentModel, t_h, p_h, u_r_true) -> CrossModalReport:
    """Robot UV features predicted purely from the human record."""
    e_h, _ = model.encode_human(np.asarray(t_h, dtype=np.float32),
                                np.asarray(p_h, dtype=np.float32))
    pred = model.decode(e_h, "robot").data
    err = ((pred - np.asarray(u_r_true, dtype=np.float32)) ** 2).mean(axis=1)
    return CrossModalReport(pred, err, float(err.mean()), float(np.median(err)))


@dataclass
class AdditivityReport:
    err_latent: np.ndarray       # (n_pairs,)
    err_baseline: np.ndarray     # (n_pairs,) ordinary reconstruction error of i
    pairs: list = field(default_factory=list)

    @property
    def median_latent(self):
        return float(np.median(self.err_latent))

    @property
    def median_baseline(self):
        return float(np.median(self.err_baseline))


def additivity(model: AlignmentModel, frames, n_pairs=64, seed=0) -> AdditivityReport:
    """Decode averaged human latents and compare against averaged robot
    ground truth; the baseline is the one-sample reconstruction error."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(frames["t_h"])
    ii = rng.integers(0, n, size=n_pairs)
    jj = rng.integers(0, n, size=n_pairs)
    e_all, _ = model.encode_human(frames["t_h"], frames["p_h"])
    e_all = e_all.data
    u_r = frames["u_r"]
    d = u_r.shape[1]
    e_avg = 0.5 * (e_all[ii] + e_all[jj])
    dec_avg = model.decode(eg.Tensor(e_avg.astype(np.float32)), "robot").data
    dec_i = model.decode(eg.Tensor(e_all[ii].astype(np.float32)), "robot").data
    tgt_avg = 0.5 * (u_r[ii] + u_r[jj])
    err_lat = ((dec_avg - tgt_avg) ** 2).sum(axis=1) / d
    err_base = ((dec_i - u_r[ii]) ** 2).sum(axis=1) / d
    return AdditivityReport(err_lat, err_base, list(zip(ii.tolist(), jj.tolist())))


# ---------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------

def pca_2d(z: np.ndarray):
    """Exact eigendecomposition of the feature covariance; returns the 2-D
    projection and the full explained-variance ratios."""
    centered = z - z.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(len(z) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    ratios = vals / vals.sum() if vals.sum() > 0 else np.full_like(vals, 1.0 / len(vals))
    return centered @ vecs[:, :2], ratios, vecs


def export_embeddings(model: AlignmentModel, dataset: PairedDataset, split,
                      out_csv, out_pca_csv):
    """CSV rows: frame id, domain, object label, z[0..31]; the companion
    file carries the shared 2-D PCA projection."""
    frames = dataset.frames(split)
    _, z_h = model.encode_human(frames["t_h"], frames["p_h"])
    _, z_r = model.encode_robot(frames["t_r"], frames["p_r"])
    z = np.vstack([z_h.data, z_r.data])
    domains = ["human"] * len(z_h.data) + ["robot"] * len(z_r.data)
    objects = frames["object"] + frames["object"]
    fids = [f"{t}:{k}" for t, k in frames["index"]] * 2

    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("frame,domain,object," + ",".join(f"z{i}" for i in range(z.shape[1])) + "\n")
        for fid, dom, obj, row in zip(fids, domains, objects, z):
            fh.write(f"{fid},{dom},{obj}," + ",".join(f"{v:.6f}" for v in row) + "\n")

    proj, ratios, _ = pca_2d(z)
    with open(out_pca_csv, "w", encoding="utf-8") as fh:
        fh.write("frame,domain,object,pc1,pc2\n")
        for fid, dom, obj, row in zip(fids, domains, objects, proj):
            fh.write(f"{fid},{dom},{obj},{row[0]:.6f},{row[1]:.6f}\n")
    return z, proj, ratios


# ---------------------------------------------------------------------
# frozen-feature domain probe
# ---------------------------------------------------------------------

class DomainProbe:
    """A fresh classifier with the discriminator's architecture, trained on
    frozen fused features. Near-chance validation accuracy is the
    operational check that the encoders hide the domain."""

    def __init__(self, dim=64, seed=0):
        rng = np.random.Generator(np.random.PCG64(seed))
        dims = [dim, 128, 64, 32, 16, 1]
        self.params = {}
        for i in range(len(dims) - 1):
            bound = np.sqrt(6.0 / dims[i])
            self.params[f"{i}.w"] = eg.Tensor(
                rng.uniform(-bound, bound, size=(dims[i], dims[i + 1])).astype(np.float32),
                requires_grad=True)
            self.params[f"{i}.b"] = eg.Tensor(np.zeros(dims[i + 1], dtype=np.float32),
                                              requires_grad=True)
        self.depth = len(dims) - 1

    def forward(self, x):
        x = x if isinstance(x, eg.Tensor) else eg.Tensor(x)
        for i in range(self.depth):
            x = eg.add(eg.matmul(x, self.params[f"{i}.w"]), self.params[f"{i}.b"])
            if i < self.depth - 1:
                x = eg.leaky_relu(x, 0.01)
        return eg.sigmoid(x)

    def accuracy(self, feats, labels):
        p = self.forward(feats.astype(np.float32)).data.reshape(-1)
        return float(((p > 0.5) == labels).mean())


def train_probe(model: AlignmentModel, dataset: PairedDataset, seed=0,
                epochs=60, batch_size=256, lr=1e-3):
    """Fit the probe on train-split features, report val-split accuracy."""
    tr = dataset.frames("train")
    va = dataset.frames("val")

    def features(frames):
        e_h, _ = model.encode_human(frames["t_h"], frames["p_h"])
        e_r, _ = model.encode_robot(frames["t_r"], frames["p_r"])
        x = np.vstack([e_h.data, e_r.data])
        y = np.concatenate([np.zeros(len(e_h.data)), np.ones(len(e_r.data))])
        return x, y

    x_tr, y_tr = features(tr)
    x_va, y_va = features(va)
    probe = DomainProbe(dim=x_tr.shape[1], seed=seed)
    opt = AdamState(lr=lr, weight_decay=0.0)
    rng = np.random.Generator(np.random.PCG64(seed))
    for _ in range(epochs):
        order = rng.permutation(len(x_tr))
        for at in range(0, len(order), batch_size):
            idx = order[at:at + batch_size]
            zero_grads(probe.params)
            p = probe.forward(x_tr[idx])
            y = eg.Tensor(y_tr[idx].reshape(-1, 1).astype(np.float32))
            loss = eg.mean(eg.bce(p, y))
            eg.backward(loss)
            adam_step(opt, probe.params)
    return probe.accuracy(x_va, y_va), probe


def rebuild_model(config_doc: dict, arrays: dict) -> AlignmentModel:
    """Model from a saved architecture config plus checkpoint arrays."""
    model = AlignmentModel(ModelConfig.from_json(config_doc))
    model.load_arrays(arrays)
    return model

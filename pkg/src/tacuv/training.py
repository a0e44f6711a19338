"""End-to-end stage-2 training: batching, augmentation, logging, checkpoints.

One Adam instance covers every trainable parameter; the gradient reversal
layer inside the adversarial head supplies the minimax sign, so no second
optimizer is needed. Per-epoch RNG streams are split from the master seed
separately for batch ordering and augmentation, which keeps the raw batch
composition identical whether or not augmentation is enabled.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as eg
from .data import AugmentConfig, FingerMaps, PairedDataset, _SAMPLE_FIELDS
from .errors import DataError, FitError
from .layouts import default_glove_layout
from .model import AlignmentModel, LossWeights, ModelConfig, batch_losses
from .optim import AdamState, adam_step, save_checkpoint, zero_grads
from .projection import UvGridSpec
from .robot import default_hand

CSV_HEADER = ("epoch,l_con,l_rec,l_adv,l_total,val_l_con,val_l_rec,val_l_adv,"
              "val_l_total,domain_acc,retrieval_top1,wall_s")

FINGERS = ("thumb", "index", "middle", "ring", "pinky")


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    lr: float = 5e-5
    weight_decay: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    decoder_mode: str = "dual"
    seed: int = 0
    shards: int = 1
    interp_prob: float = 0.5
    finger_subset_prob: float = 0.25
    grl_lambda: float = 1.0
    deterministic_timing: bool = True   # log wall_s as 0.0 for byte-stable CSVs

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        return cls(batch_size=1024, epochs=200, **kw)


def _frozen_prefixes(mode):
    if mode == "human_only":
        return ("dec_r",)
    if mode == "robot_only":
        return ("dec_h",)
    return ()


def _mix_batch(frames, idx, rng, cfg: TrainConfig, maps: FingerMaps):
    """Assemble one batch; augmentation may blend slots with partners but
    never changes which base rows were drawn."""
    batch = {f: frames[f][idx].copy() for f in _SAMPLE_FIELDS}
    aug = cfg.augment
    n = len(idx)
    if aug.enable_linear_interp:
        mix = rng.random(n) < cfg.interp_prob
        partners = rng.integers(0, len(frames["t_h"]), size=n)
        lam1 = rng.random(n).astype(np.float32)
        lam2 = rng.random(n).astype(np.float32)
        subset = (rng.random(n) < cfg.finger_subset_prob) & mix \
            if aug.finger_subset_mode else np.zeros(n, dtype=bool)
        full = mix & ~subset
        for fld in ("t_h", "u_h", "t_r", "u_r"):
            lam = lam1[full, None]
            batch[fld][full] = lam * batch[fld][full] + (1 - lam) * frames[fld][partners[full]]
        for fld in ("p_h", "p_r"):
            lam = lam2[full, None]
            batch[fld][full] = lam * batch[fld][full] + (1 - lam) * frames[fld][partners[full]]
        for s in np.nonzero(subset)[0]:
            chosen = [f for f in FINGERS if rng.random() < 0.5]
            if not chosen:
                chosen = [FINGERS[int(rng.integers(0, 5))]]
            j = partners[s]
            for f in chosen:
                for fld in ("t_h", "u_h", "t_r", "u_r"):
                    m = maps.masks[f][fld]
                    if m is None:
                        continue
                    batch[fld][s][m] = (lam1[s] * batch[fld][s][m]
                                        + (1 - lam1[s]) * frames[fld][j][m])
                for fld in ("p_h", "p_r"):
                    m = maps.masks[f][fld]
                    batch[fld][s][m] = (lam2[s] * batch[fld][s][m]
                                        + (1 - lam2[s]) * frames[fld][j][m])
    if aug.enable_noise and aug.noise_sigma > 0:
        for fld in ("t_h", "t_r"):
            batch[fld] += rng.normal(0, aug.noise_sigma, batch[fld].shape).astype(np.float32)
            np.maximum(batch[fld], 0.0, out=batch[fld])
    if aug.enable_dropout and aug.dropout_p > 0:
        for fld in ("t_h", "t_r"):
            batch[fld] *= rng.random(batch[fld].shape) >= aug.dropout_p
    return batch


def validate(model: AlignmentModel, frames, weights: LossWeights, batch_size=128):
    """Frozen-model metrics on a stacked split: mean losses at the training
    batch size, full-split retrieval, and the adversarial head's accuracy."""
    n = len(frames["t_h"])
    if n == 0:
        raise DataError("validate: empty split")
    sums = {"l_con": 0.0, "l_rec": 0.0, "l_adv": 0.0, "l_total": 0.0}
    seen = 0
    zs_h, zs_r, es_h, es_r = [], [], [], []
    for at in range(0, n, batch_size):
        idx = slice(at, min(at + batch_size, n))
        batch = {f: frames[f][idx] for f in _SAMPLE_FIELDS}
        _, comps, tensors = batch_losses(model, batch, weights)
        b = idx.stop - idx.start
        for k in sums:
            sums[k] += comps[k] * b
        seen += b
        zs_h.append(tensors["z_h"].data)
        zs_r.append(tensors["z_r"].data)
        es_h.append(tensors["e_h"].data)
        es_r.append(tensors["e_r"].data)
    out = {k: v / seen for k, v in sums.items()}

    z_h = np.concatenate(zs_h)
    z_r = np.concatenate(zs_r)
    z_h = z_h / np.maximum(np.linalg.norm(z_h, axis=1, keepdims=True), 1e-12)
    z_r = z_r / np.maximum(np.linalg.norm(z_r, axis=1, keepdims=True), 1e-12)
    sims = z_h @ z_r.T
    diag = np.diag(sims)
    rank = (sims > diag[:, None]).sum(axis=1)
    out["retrieval_top1"] = float((rank < 1).mean())
    out["retrieval_top5"] = float((rank < 5).mean())

    e_all = np.vstack(es_h + es_r)
    labels = np.concatenate([np.zeros(sum(len(e) for e in es_h)),
                             np.ones(sum(len(e) for e in es_r))])
    p = model.discriminate(eg.Tensor(e_all), reverse=False).data.reshape(-1)
    out["domain_acc"] = float(((p > 0.5) == labels).mean())
    return out


def _csv_row(epoch, train_m, val_m, wall_s):
    cells = [str(epoch)]
    for k in ("l_con", "l_rec", "l_adv", "l_total"):
        cells.append(f"{train_m[k]:.6f}")
    for k in ("l_con", "l_rec", "l_adv", "l_total"):
        cells.append(f"{val_m[k]:.6f}")
    cells.append(f"{val_m['domain_acc']:.6f}")
    cells.append(f"{val_m['retrieval_top1']:.6f}")
    cells.append(f"{wall_s:.3f}")
    return ",".join(cells)


def build_model(dataset: PairedDataset, config: TrainConfig) -> AlignmentModel:
    glove = default_glove_layout()
    robot = default_hand()
    mc = ModelConfig.from_layouts(glove, robot, decoder_mode=config.decoder_mode,
                                  grl_lambda=config.grl_lambda, seed=config.seed)
    return AlignmentModel(mc)


def train(model: AlignmentModel, dataset: PairedDataset, config: TrainConfig,
          out_dir, log=None, batch_hook=None):
    """Train in place; writes metrics.csv plus init/best/last checkpoints.

    `batch_hook(epoch, step, idx)` observes the raw batch index draws (the
    augmentation-independence property tests rely on it).
    """
    os.makedirs(out_dir, exist_ok=True)
    train_frames = dataset.frames("train")
    val_frames = dataset.frames("val")
    n_train = len(train_frames["t_h"])
    if config.batch_size > n_train:
        raise DataError(f"batch size {config.batch_size} exceeds training "
                        f"set size {n_train}")
    glove = default_glove_layout()
    robot = default_hand()
    spec = UvGridSpec.from_json(dataset.manifest.grid_spec) \
        if dataset.manifest.grid_spec else None
    maps = FingerMaps.build(glove, robot, spec)

    frozen = _frozen_prefixes(config.decoder_mode)
    trainable = {n: p for n, p in model.params.items()
                 if not any(n.startswith(f) for f in frozen)}
    opt = AdamState(lr=config.lr, weight_decay=config.weight_decay)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows = [CSV_HEADER]
    t_start = time.monotonic()

    def wall():
        return 0.0 if config.deterministic_timing else time.monotonic() - t_start

    # epoch 0: untouched model, so the logged loss must match the init checkpoint
    save_checkpoint(os.path.join(out_dir, "init.ckpt"), model.params, opt)
    train_m0 = validate(model, train_frames, config.weights, config.batch_size)
    val_m0 = validate(model, val_frames, config.weights, config.batch_size)
    rows.append(_csv_row(0, train_m0, val_m0, wall()))
    best = (val_m0["l_total"], 0)
    save_checkpoint(os.path.join(out_dir, "best.ckpt"), model.params, opt)
    if log:
        log(f"epoch 0 val: {val_m0['l_total']:.4f}")

    seq = np.random.SeedSequence(config.seed)
    for epoch in range(1, config.epochs + 1):
        order_rng, aug_rng = (np.random.Generator(np.random.PCG64(s))
                              for s in seq.spawn(2))
        order = order_rng.permutation(n_train)
        epoch_sums = {"l_con": 0.0, "l_rec": 0.0, "l_adv": 0.0, "l_total": 0.0}
        seen = 0
        for step, at in enumerate(range(0, n_train, config.batch_size)):
            idx = order[at:at + config.batch_size]
            if batch_hook:
                batch_hook(epoch, step, idx.copy())
            batch = _mix_batch(train_frames, idx, aug_rng, config, maps)
            zero_grads(model.params)
            n_shards = max(1, min(config.shards, len(idx)))
            bounds = np.linspace(0, len(idx), n_shards + 1, dtype=int)
            comps_acc = {"l_con": 0.0, "l_rec": 0.0, "l_adv": 0.0, "l_total": 0.0}
            for si in range(n_shards):
                lo, hi = bounds[si], bounds[si + 1]
                if hi == lo:
                    continue
                shard = {f: batch[f][lo:hi] for f in _SAMPLE_FIELDS}
                loss, comps, _ = batch_losses(model, shard, config.weights)
                w = (hi - lo) / len(idx)
                eg.backward(eg.mul(loss, np.float32(w)))
                for k in comps_acc:
                    comps_acc[k] += comps[k] * w
            if not np.isfinite(comps_acc["l_total"]):
                save_checkpoint(os.path.join(out_dir, "last.ckpt"), model.params, opt)
                raise FitError(f"non-finite loss at epoch {epoch} step {step}; "
                               f"last checkpoint preserved in {out_dir}")
            adam_step(opt, trainable)
            for k in epoch_sums:
                epoch_sums[k] += comps_acc[k] * len(idx)
            seen += len(idx)
        train_m = {k: v / seen for k, v in epoch_sums.items()}
        val_m = validate(model, val_frames, config.weights, config.batch_size)
        rows.append(_csv_row(epoch, train_m, val_m, wall()))
        if val_m["l_total"] < best[0]:
            best = (val_m["l_total"], epoch)
            save_checkpoint(os.path.join(out_dir, "best.ckpt"), model.params, opt)
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), model.params, opt)
        if log:
            log(f"epoch {epoch}: train {train_m['l_total']:.4f} "
                f"val {val_m['l_total']:.4f} top1 {val_m['retrieval_top1']:.3f}")

    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    return model, rows

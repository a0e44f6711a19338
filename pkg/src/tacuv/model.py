"""Stage 2: dual encoders, shared fusion/projection, decoders, domain head.

Layout of the network (dims per the architecture config defaults):

  human tactile   7 region MLP branches -> concat 44 -> mix [128] -> 64
  robot tactile   17 per-patch CNN branches -> pool 4x4 -> concat 448
                  -> mix [128] -> 64
  human pose      60 -> [64, 32, 64] -> 32
  robot pose      6 -> [32, 64] -> 32
  fusion (shared) concat 96 -> [128] -> 64            (the fused feature e)
  projection (shared)  64 -> [128, 128] -> 32         (the embedding z)
  decoders        64 -> [128, 256] -> 391, sigmoid    (one per domain)
  discriminator   64 -> [128, 64, 32, 16, 1], LeakyReLU(0.01), via GRL

The contrastive, reconstruction, and adversarial losses combine as
total = con + w_rec * rec + w_adv * adv.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .errors import DataError, EngineError

LATENT_DIM = 32
FUSED_DIM = 64
UV_FEATURE_DIM = 391

HUMAN_BRANCH_DIMS = {
    "thumb": [8, 8], "index": [8, 8], "middle": [8, 8],
    "ring": [8, 4], "pinky": [8, 4], "palm": [16, 8, 8], "bend": [8, 4],
}
# per-class conv stacks: (out_channels, kernel, stride) per layer
ROBOT_BRANCH_CONVS = {
    "small": [(1, 2, 1)],
    "standard": [(1, 3, 2), (2, 2, 1)],
    "large": [(1, 4, 2), (2, 2, 1)],
}
POOL = 4


@dataclass
class LossWeights:
    w_rec: float = 1.0
    w_adv: float = 0.5
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise DataError(f"temperature must be > 0, got {self.tau}")
        if self.w_rec < 0 or self.w_adv < 0:
            raise DataError("loss weights must be >= 0")


@dataclass
class ModelConfig:
    human_regions: list            # [(name, size)] in slice order, sums to 137
    robot_patches: list            # [(name, rows, cols, branch)] in T_R order
    human_pose_dim: int = 60
    robot_pose_dim: int = 6
    decoder_mode: str = "dual"     # dual | human_only | robot_only | raw_tactile
    uv_dim: int = UV_FEATURE_DIM
    grl_lambda: float = 1.0
    seed: int = 0

    @classmethod
    def from_layouts(cls, glove_layout, robot_model, **kw) -> "ModelConfig":
        regions = [(name, sl.stop - sl.start)
                   for name, sl in glove_layout.region_slices().items()]
        patches = [(p.name, p.rows, p.cols, p.branch) for p in robot_model.patches]
        return cls(human_regions=regions, robot_patches=patches, **kw)

    def to_json(self) -> dict:
        return {"human_regions": [list(r) for r in self.human_regions],
                "robot_patches": [list(p) for p in self.robot_patches],
                "human_pose_dim": self.human_pose_dim,
                "robot_pose_dim": self.robot_pose_dim,
                "decoder_mode": self.decoder_mode, "uv_dim": self.uv_dim,
                "grl_lambda": self.grl_lambda, "seed": self.seed}

    @classmethod
    def from_json(cls, doc) -> "ModelConfig":
        return cls(human_regions=[tuple(r) for r in doc["human_regions"]],
                   robot_patches=[tuple(p) for p in doc["robot_patches"]],
                   human_pose_dim=doc["human_pose_dim"],
                   robot_pose_dim=doc["robot_pose_dim"],
                   decoder_mode=doc["decoder_mode"], uv_dim=doc["uv_dim"],
                   grl_lambda=doc["grl_lambda"], seed=doc["seed"])


class AlignmentModel:
    """Parameter container plus the functional forward passes."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, eg.Tensor] = {}
        self._rng = np.random.Generator(np.random.PCG64(config.seed))
        self._build()

    # -- parameter helpers ----------------------------------------------

    def _param(self, name, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        data = self._rng.uniform(-bound, bound, size=shape).astype(np.float32)
        t = eg.Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def _bias(self, name, size):
        t = eg.Tensor(np.zeros(size, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def _linear(self, prefix, n_in, n_out):
        self._param(f"{prefix}.w", (n_in, n_out), n_in)
        self._bias(f"{prefix}.b", n_out)

    def _mlp(self, prefix, n_in, dims):
        cur = n_in
        for i, d in enumerate(dims):
            self._linear(f"{prefix}.{i}", cur, d)
            cur = d
        return cur

    def _conv(self, prefix, c_in, c_out, k):
        self._param(f"{prefix}.w", (c_out, c_in, k, k), c_in * k * k)
        self._bias(f"{prefix}.b", (c_out, 1, 1))

    def _build(self):
        cfg = self.config
        concat_h = 0
        for name, size in cfg.human_regions:
            dims = HUMAN_BRANCH_DIMS[name]
            self._mlp(f"enc_h.tac.{name}", size, dims)
            concat_h += dims[-1]
        self._mlp("enc_h.tac.mix", concat_h, [128, 64])

        concat_r = 0
        for name, rows, cols, branch in cfg.robot_patches:
            c_in = 1
            for i, (c_out, k, s) in enumerate(ROBOT_BRANCH_CONVS[branch]):
                self._conv(f"enc_r.tac.{name}.{i}", c_in, c_out, k)
                c_in = c_out
            concat_r += c_in * POOL * POOL
        self._mlp("enc_r.tac.mix", concat_r, [128, 64])

        self._mlp("enc_h.pose", cfg.human_pose_dim, [64, 32, 64, 32])
        self._mlp("enc_r.pose", cfg.robot_pose_dim, [32, 64, 32])
        self._mlp("fusion", 64 + 32, [128, FUSED_DIM])
        self._mlp("proj", FUSED_DIM, [128, 128, LATENT_DIM])
        dec_h_out, dec_r_out = self.decoder_dims()
        self._mlp("dec_h", FUSED_DIM, [128, 256, dec_h_out])
        self._mlp("dec_r", FUSED_DIM, [128, 256, dec_r_out])
        self._mlp("disc", FUSED_DIM, [128, 64, 32, 16, 1])

    def decoder_dims(self):
        if self.config.decoder_mode == "raw_tactile":
            n_h = sum(size for _, size in self.config.human_regions)
            n_r = sum(r * c for _, r, c, _ in self.config.robot_patches)
            return n_h, n_r
        return self.config.uv_dim, self.config.uv_dim

    def param_names(self, prefix=None):
        if prefix is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(prefix)]

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        if missing:
            raise DataError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for n, p in self.params.items():
            if arrays[n].shape != p.data.shape:
                raise DataError(f"checkpoint parameter {n!r} has shape "
                                f"{arrays[n].shape}, expected {p.data.shape}")
            p.data = arrays[n].astype(np.float32).copy()

    # -- forward passes ---------------------------------------------------

    def _run_mlp(self, prefix, x, n_layers, final_act=None, leaky=False):
        for i in range(n_layers):
            w = self.params[f"{prefix}.{i}.w"]
            b = self.params[f"{prefix}.{i}.b"]
            x = eg.add(eg.matmul(x, w), b)
            if i < n_layers - 1:
                x = eg.leaky_relu(x, 0.01) if leaky else eg.relu(x)
            elif final_act == "relu":
                x = eg.relu(x)
            elif final_act == "sigmoid":
                x = eg.sigmoid(x)
            elif final_act == "leaky":
                x = eg.leaky_relu(x, 0.01)
        return x

    def _mlp_depth(self, prefix):
        i = 0
        while f"{prefix}.{i}.w" in self.params:
            i += 1
        return i

    def encode_human(self, t_h, p_h):
        """(B,137) tactile + (B,60) pose -> (fused e (B,64), z (B,32))."""
        t_h = t_h if isinstance(t_h, eg.Tensor) else eg.Tensor(t_h)
        p_h = p_h if isinstance(p_h, eg.Tensor) else eg.Tensor(p_h)
        total = sum(size for _, size in self.config.human_regions)
        if t_h.shape[-1] != total:
            raise DataError(f"human tactile dim {t_h.shape[-1]} != layout total {total}")
        feats = []
        off = 0
        for name, size in self.config.human_regions:
            sl = t_h[:, off:off + size]
            depth = len(HUMAN_BRANCH_DIMS[name])
            feats.append(self._run_mlp(f"enc_h.tac.{name}", sl, depth, final_act="relu"))
            off += size
        tac = self._run_mlp("enc_h.tac.mix", eg.concat(feats, axis=1), 2)
        pose = self._run_mlp("enc_h.pose", p_h, 4)
        return self._fuse(tac, pose)

    def encode_robot(self, t_r, p_r):
        """(B,1062) tactile + (B,6) pose -> (fused e (B,64), z (B,32))."""
        t_r = t_r if isinstance(t_r, eg.Tensor) else eg.Tensor(t_r)
        p_r = p_r if isinstance(p_r, eg.Tensor) else eg.Tensor(p_r)
        feats = []
        off = 0
        B = t_r.shape[0]
        for name, rows, cols, branch in self.config.robot_patches:
            n = rows * cols
            if off + n > t_r.shape[-1]:
                raise DataError("robot tactile vector shorter than patch layout")
            x = eg.reshape(t_r[:, off:off + n], (B, 1, rows, cols))
            for i, (c_out, k, s) in enumerate(ROBOT_BRANCH_CONVS[branch]):
                w = self.params[f"enc_r.tac.{name}.{i}.w"]
                b = self.params[f"enc_r.tac.{name}.{i}.b"]
                x = eg.relu(eg.add(eg.conv2d_valid(x, w, stride=s), b))
            x = eg.adaptive_avg_pool(x, POOL, POOL)
            feats.append(eg.reshape(x, (B, x.shape[1] * POOL * POOL)))
            off += n
        if off != t_r.shape[-1]:
            raise DataError(f"robot tactile dim {t_r.shape[-1]} != layout total {off}")
        tac = self._run_mlp("enc_r.tac.mix", eg.concat(feats, axis=1), 2)
        pose = self._run_mlp("enc_r.pose", p_r, 3)
        return self._fuse(tac, pose)

    def _fuse(self, tac, pose):
        e = self._run_mlp("fusion", eg.concat([tac, pose], axis=1), 2)
        z = self._run_mlp("proj", e, 3)
        return e, z

    def decode(self, e, domain):
        """Fused feature -> reconstruction in [0,1] (sigmoid output)."""
        if domain == "human":
            return self._run_mlp("dec_h", e, 3, final_act="sigmoid")
        if domain == "robot":
            return self._run_mlp("dec_r", e, 3, final_act="sigmoid")
        raise DataError(f"unknown decoder domain {domain!r}")

    def discriminate(self, e, reverse=True, lam=None):
        """Domain probability from the fused feature, via the GRL."""
        lam = self.config.grl_lambda if lam is None else lam
        x = eg.grad_reverse(e, lam) if reverse else e
        logits = self._run_mlp("disc", x, 5, leaky=True)
        return eg.sigmoid(logits)


# ---------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------

def info_nce(z_h, z_r, tau=0.1):
    """Symmetric InfoNCE over a batch of paired embeddings.

    Rows are L2-normalized here, so callers may pass raw projections. The
    i-th row of each similarity matrix is a log-softmax over the batch and
    only its diagonal entry contributes.
    """
    if tau <= 0:
        raise EngineError(f"info_nce: temperature must be > 0, got {tau}")
    z_h = z_h if isinstance(z_h, eg.Tensor) else eg.Tensor(z_h)
    z_r = z_r if isinstance(z_r, eg.Tensor) else eg.Tensor(z_r)
    zh = eg.l2_normalize(z_h, axis=-1)
    zr = eg.l2_normalize(z_r, axis=-1)
    B = zh.shape[0]
    sims = eg.div(eg.matmul(zh, eg.transpose(zr)), np.float32(tau))
    eye = eg.Tensor(np.eye(B, dtype=np.float32))
    diag_hr = eg.sum_(eg.mul(eg.log_softmax(sims, axis=-1), eye), axis=1)
    diag_rh = eg.sum_(eg.mul(eg.log_softmax(eg.transpose(sims), axis=-1), eye), axis=1)
    return eg.neg(eg.mean(eg.add(diag_hr, diag_rh)))


def recon_loss(u_hat_h, u_h, u_hat_r=None, u_r=None):
    """Squared reconstruction error summed over features, mean over batch;
    domains contribute additively when both are given."""
    def _term(pred, target):
        target = target if isinstance(target, eg.Tensor) else eg.Tensor(target)
        if pred.shape != target.shape:
            raise DataError(f"reconstruction dims differ: {pred.shape} vs {target.shape}")
        return eg.mean(eg.sum_(eg.square(eg.sub(pred, target)), axis=-1))

    terms = []
    if u_hat_h is not None:
        terms.append(_term(u_hat_h, u_h))
    if u_hat_r is not None:
        terms.append(_term(u_hat_r, u_r))
    if not terms:
        raise DataError("recon_loss: no decoder outputs given")
    total = terms[0]
    for t in terms[1:]:
        total = eg.add(total, t)
    return total


def adv_loss(model: AlignmentModel, e_h, e_r, lam=None):
    """BCE of the domain head on reversed features: human -> 0, robot -> 1."""
    p_h = model.discriminate(e_h, lam=lam)
    p_r = model.discriminate(e_r, lam=lam)
    zeros = eg.Tensor(np.zeros(p_h.shape, dtype=np.float32))
    ones = eg.Tensor(np.ones(p_r.shape, dtype=np.float32))
    return eg.add(eg.mean(eg.bce(p_h, zeros)), eg.mean(eg.bce(p_r, ones)))


def total_loss(l_con, l_rec, l_adv, weights: LossWeights):
    """Weighted sum; returns (tensor, component floats for logging)."""
    total = l_con
    comps = {"l_con": l_con.item(), "l_rec": 0.0, "l_adv": 0.0}
    if l_rec is not None:
        total = eg.add(total, eg.mul(np.float32(weights.w_rec), l_rec))
        comps["l_rec"] = l_rec.item()
    if l_adv is not None:
        total = eg.add(total, eg.mul(np.float32(weights.w_adv), l_adv))
        comps["l_adv"] = l_adv.item()
    comps["l_total"] = total.item()
    return total, comps


def batch_losses(model: AlignmentModel, batch: dict, weights: LossWeights):
    """Full forward pass over one paired batch.

    `batch` carries t_h, p_h, u_h, t_r, p_r, u_r arrays. Reconstruction
    targets follow the decoder mode (UV features, or raw tactile for the
    raw_tactile ablation).
    """
    e_h, z_h = model.encode_human(batch["t_h"], batch["p_h"])
    e_r, z_r = model.encode_robot(batch["t_r"], batch["p_r"])
    l_con = info_nce(z_h, z_r, weights.tau)

    mode = model.config.decoder_mode
    tgt_h, tgt_r = batch["u_h"], batch["u_r"]
    if mode == "raw_tactile":
        tgt_h, tgt_r = batch["t_h"], batch["t_r"]
    u_hat_h = model.decode(e_h, "human") if mode in ("dual", "human_only", "raw_tactile") else None
    u_hat_r = model.decode(e_r, "robot") if mode in ("dual", "robot_only", "raw_tactile") else None
    l_rec = recon_loss(u_hat_h, tgt_h if u_hat_h is not None else None,
                       u_hat_r, tgt_r if u_hat_r is not None else None)
    l_adv = adv_loss(model, e_h, e_r)
    total, comps = total_loss(l_con, l_rec, l_adv, weights)
    return total, comps, {"e_h": e_h, "e_r": e_r, "z_h": z_h, "z_r": z_r}


def embed(model: AlignmentModel, domain, tactile, pose):
    """Inference-only embedding; returns (e, z) numpy arrays."""
    enc = model.encode_human if domain == "human" else model.encode_robot
    e, z = enc(np.asarray(tactile, dtype=np.float32),
               np.asarray(pose, dtype=np.float32))
    return e.data.copy(), z.data.copy()

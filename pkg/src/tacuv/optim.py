"""Adam with decoupled weight decay, plus the binary checkpoint format.

Checkpoint layout ("UTH-CKPT1", little-endian):

    magic (9 bytes) | u64 header length | header JSON (utf-8)
    | raw f32 parameter data, sorted by name
    | raw f32 first-moment buffers, same order
    | raw f32 second-moment buffers, same order

The moment buffers are present only when optimizer state is saved; the
header says which. The header records parameter names/shapes and the
optimizer hyperparameters and step count.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .engine import Tensor
from .errors import EngineError, FormatError

CKPT_MAGIC = b"UTH-CKPT1"


class AdamState:
    """Per-parameter moments and the shared hyperparameters.

    Weight decay is decoupled: p <- p - lr*wd*p is applied before the
    bias-corrected Adam update.
    """

    def __init__(self, lr=5e-5, weight_decay=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise EngineError(f"adam: learning rate must be > 0, got {lr}")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.t}


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """One update over every parameter that has an accumulated gradient.

    Parameters without a gradient this step are left untouched (no decay
    either), so frozen sub-nets keep their exact values.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.weight_decay:
            p.data -= np.float32(state.lr * state.weight_decay) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(np.float32)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# -- checkpoint I/O -------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], state: AdamState | None = None) -> None:
    names = sorted(params)
    header = {
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "optimizer": state.hyperparams() if state is not None else None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())
        if state is not None:
            for n in names:
                m = state.m.get(n)
                if m is None:
                    m = np.zeros(params[n].shape, dtype=np.float32)
                fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
            for n in names:
                v = state.v.get(n)
                if v is None:
                    v = np.zeros(params[n].shape, dtype=np.float32)
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint -> (arrays by name, header dict, AdamState or None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CKPT_MAGIC) + 8 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a UTH-CKPT1 checkpoint")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if off + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad checkpoint header: {e}") from e
    off += hlen
    if not isinstance(header, dict) or "params" not in header:
        raise FormatError(f"{path}: checkpoint header missing 'params'")

    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated parameter data for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape).copy()
        off = end

    opt = header.get("optimizer")
    state = None
    if opt is not None:
        state = AdamState(lr=opt["lr"], weight_decay=opt["weight_decay"],
                          beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"])
        state.t = int(opt["step"])
        for key in ("m", "v"):
            store = getattr(state, key)
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                end = off + 4 * count
                if end > len(raw):
                    raise FormatError(f"{path}: truncated optimizer buffers")
                store[entry["name"]] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape).copy()
                off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, header, state

"""Reverse-mode automatic differentiation over dense float32 arrays.

A `Tensor` wraps a numpy array and remembers how it was produced; calling
``backward()`` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients on every tensor that requires
them. The op set covers what the gradient-based stages of the pipeline
need: dense linear algebra, valid convolution, adaptive pooling, the usual
pointwise nonlinearities, stable log-softmax, and a gradient-reversal op
whose forward pass is the identity.

All values are float32. Forward arithmetic is plain numpy, so results are
deterministic for a fixed thread count.
"""

from __future__ import annotations

import numpy as np

from .errors import EngineError, ShapeError

_F32 = np.float32


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=_F32)
    return a


class Tensor:
    """A node of the computation graph.

    `data` is the forward value, `grad` the accumulated adjoint (allocated
    lazily), `op` a tag naming the producing operation ("leaf" for inputs
    and parameters).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward

    # -- book-keeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise EngineError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op,
                  parents=[p for p in parents], backward=backward if req else None)


# -- graph traversal ----------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below `root`; each node appears once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into `.grad` for every node needing it."""
    if loss.data.size != 1:
        raise EngineError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- broadcasting helpers -------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic -----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    out = _node(a.data + b.data, (a, b), "add", None)

    def _bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    out = _node(a.data - b.data, (a, b), "sub", None)

    def _bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    out = _node(a.data * b.data, (a, b), "mul", None)

    def _bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    out = _node(a.data / b.data, (a, b), "div", None)

    def _bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def neg(a) -> Tensor:
    a = _lift(a)
    out = _node(-a.data, (a,), "neg", None)
    out._backward = (lambda g: a.accumulate(-g)) if out.requires_grad else None
    return out


def _pointwise(a, op, fwd, dfn) -> Tensor:
    """Unary pointwise node: dfn(y, x) returns the local derivative."""
    a = _lift(a)
    y = fwd(a.data)
    out = _node(y, (a,), op, None)

    def _bw(g):
        a.accumulate(g * dfn(out.data, a.data))

    out._backward = _bw if out.requires_grad else None
    return out


def exp(a):
    return _pointwise(a, "exp", np.exp, lambda y, x: y)


def log(a):
    return _pointwise(a, "log", np.log, lambda y, x: 1.0 / x)


def sqrt(a):
    return _pointwise(a, "sqrt", np.sqrt, lambda y, x: 0.5 / y)


def sin(a):
    return _pointwise(a, "sin", np.sin, lambda y, x: np.cos(x))


def cos(a):
    return _pointwise(a, "cos", np.cos, lambda y, x: -np.sin(x))


def square(a):
    return _pointwise(a, "square", np.square, lambda y, x: 2.0 * x)


def relu(a):
    return _pointwise(a, "relu", lambda x: np.maximum(x, 0.0),
                      lambda y, x: (x > 0).astype(_F32))


def leaky_relu(a, slope=0.01):
    s = _F32(slope)
    return _pointwise(a, "leaky_relu",
                      lambda x: np.where(x > 0, x, s * x),
                      lambda y, x: np.where(x > 0, _F32(1.0), s))


def tanh(a):
    return _pointwise(a, "tanh", np.tanh, lambda y, x: 1.0 - y * y)


def sigmoid(a):
    def _fwd(x):
        # clamp the exponent; f32 saturates to exactly 0/1 past +-60 anyway
        z = np.clip(x, -60.0, 60.0)
        return 1.0 / (1.0 + np.exp(-z))

    return _pointwise(a, "sigmoid", _fwd, lambda y, x: y * (1.0 - y))


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient is passed through only where unclamped."""
    a = _lift(a)
    y = np.clip(a.data, lo, hi)
    out = _node(y, (a,), "clip", None)

    def _bw(g):
        inside = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            inside &= a.data > lo
        if hi is not None:
            inside &= a.data < hi
        a.accumulate(g * inside.astype(_F32))

    out._backward = _bw if out.requires_grad else None
    return out


# -- reductions and shape ops --------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    y = a.data.sum(axis=axis, keepdims=keepdims, dtype=_F32)
    out = _node(y, (a,), "sum", None)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape).astype(_F32))

    out._backward = _bw if out.requires_grad else None
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    y = a.data.mean(axis=axis, keepdims=keepdims, dtype=_F32)
    out = _node(y, (a,), "mean", None)
    n = a.data.size / max(y.size, 1)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate((np.broadcast_to(g, a.shape) / n).astype(_F32))

    out._backward = _bw if out.requires_grad else None
    return out


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = _node(a.data.reshape(shape), (a,), "reshape", None)

    def _bw(g):
        a.accumulate(g.reshape(a.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def index(a, key) -> Tensor:
    """Basic slicing; the adjoint scatters the gradient back into place."""
    a = _lift(a)
    out = _node(a.data[key], (a,), "index", None)

    def _bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a.accumulate(full)

    out._backward = _bw if out.requires_grad else None
    return out


def take(a, indices, axis=0) -> Tensor:
    """Gather rows by integer index; duplicates accumulate on backward."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = _node(np.take(a.data, idx, axis=axis), (a,), "take", None)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        a.accumulate(full)

    out._backward = _bw if out.requires_grad else None
    return out


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _lift(a)
    if a.data.ndim < 2:
        raise ShapeError("transpose", a.shape, None, "needs >= 2 dims")
    out = _node(np.swapaxes(a.data, -1, -2).copy(), (a,), "transpose", None)

    def _bw(g):
        a.accumulate(np.swapaxes(g, -1, -2))

    out._backward = _bw if out.requires_grad else None
    return out


def concat(tensors, axis=0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    if not parts:
        raise EngineError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _node(data, parts, "concat", None)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.accumulate(g[tuple(sl)])

    out._backward = _bw if out.requires_grad else None
    return out


def pad2d(a, pad) -> Tensor:
    """Zero-pad the last two axes by `pad` on every side."""
    a = _lift(a)
    width = [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)]
    out = _node(np.pad(a.data, width), (a,), "pad2d", None)

    def _bw(g):
        sl = (slice(None),) * (a.data.ndim - 2) + (slice(pad, -pad), slice(pad, -pad))
        a.accumulate(g[sl])

    out._backward = _bw if out.requires_grad else None
    return out


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2-D or stacked (equal leading dims) matrix product."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, "operands must be >= 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        if not (a.data.ndim == 2 and b.data.ndim == 2):
            raise ShapeError("matmul", a.shape, b.shape, "batch dims must match")
    out = _node(a.data @ b.data, (a, b), "matmul", None)

    def _bw(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate(np.swapaxes(a.data, -1, -2) @ g)

    out._backward = _bw if out.requires_grad else None
    return out


# -- neural net ops -------------------------------------------------------


def conv2d_valid(x, w, stride=1) -> Tensor:
    """Valid (unpadded) 2-D convolution.

    x: (B, C_in, H, W), w: (C_out, C_in, kh, kw) -> (B, C_out, H', W') with
    H' = floor((H - kh) / stride) + 1. Implemented by im2col so both passes
    are single matmuls.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d_valid", x.shape, w.shape, "need (B,C,H,W) and (O,C,kh,kw)")
    B, C, H, W = x.shape
    O, C2, kh, kw = w.shape
    if C != C2:
        raise ShapeError("conv2d_valid", x.shape, w.shape, "channel mismatch")
    if kh > H or kw > W:
        raise ShapeError("conv2d_valid", x.shape, w.shape, "kernel larger than input")
    s = int(stride)
    if s < 1:
        raise EngineError(f"conv2d_valid: stride must be >= 1, got {stride}")
    oh = (H - kh) // s + 1
    ow = (W - kw) // s + 1

    # (B, C, kh, kw, oh, ow) patch view without copying
    sb, sc, sh, sw = x.data.strides
    patches = np.lib.stride_tricks.as_strided(
        x.data, (B, C, kh, kw, oh, ow), (sb, sc, sh, sw, sh * s, sw * s))
    cols = patches.reshape(B, C * kh * kw, oh * ow)
    wmat = w.data.reshape(O, C * kh * kw)
    y = (wmat @ cols).reshape(B, O, oh, ow)
    out = _node(y, (x, w), "conv2d_valid", None)

    def _bw(g):
        gmat = g.reshape(B, O, oh * ow)
        if w.requires_grad:
            gw = np.einsum("bop,bcp->oc", gmat, cols, optimize=True)
            w.accumulate(gw.reshape(w.shape).astype(_F32))
        if x.requires_grad:
            gcols = np.einsum("oc,bop->bcp", wmat, gmat, optimize=True)
            gx = np.zeros_like(x.data)
            gpatch = gcols.reshape(B, C, kh, kw, oh, ow)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + oh * s:s, j:j + ow * s:s] += gpatch[:, :, i, j]
            x.accumulate(gx)

    out._backward = _bw if out.requires_grad else None
    return out


def _pool_bins(n, out):
    """Index ranges [floor(i*n/out), ceil((i+1)*n/out)) per output cell."""
    starts = [(i * n) // out for i in range(out)]
    ends = [-(-((i + 1) * n) // out) for i in range(out)]
    return list(zip(starts, ends))


def adaptive_avg_pool(x, out_h, out_w) -> Tensor:
    """Average-pool (B, C, H, W) onto an out_h x out_w grid.

    Cell (i, j) averages input indices [floor(i*n/out), ceil((i+1)*n/out))
    on each axis; when the input is smaller than the output this replicates
    values deterministically.
    """
    x = _lift(x)
    if x.data.ndim != 4:
        raise ShapeError("adaptive_avg_pool", x.shape, None, "need (B,C,H,W)")
    if out_h < 1 or out_w < 1:
        raise EngineError(f"adaptive_avg_pool: bad output size {(out_h, out_w)}")
    B, C, H, W = x.shape
    rows = _pool_bins(H, out_h)
    cols = _pool_bins(W, out_w)
    y = np.empty((B, C, out_h, out_w), dtype=_F32)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            y[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3), dtype=_F32)
    out = _node(y, (x,), "adaptive_avg_pool", None)

    def _bw(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / area
        x.accumulate(gx)

    out._backward = _bw if out.requires_grad else None
    return out


def log_softmax(x, axis=-1) -> Tensor:
    x = _lift(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _node(shifted - lse, (x,), "log_softmax", None)

    def _bw(g):
        soft = np.exp(out.data)
        x.accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    out._backward = _bw if out.requires_grad else None
    return out


def grad_reverse(x, lam=1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise EngineError(f"grad_reverse: coefficient must be >= 0, got {lam}")
    x = _lift(x)
    out = _node(x.data.copy(), (x,), "grad_reverse", None)

    def _bw(g):
        x.accumulate(-_F32(lam) * g)

    out._backward = _bw if out.requires_grad else None
    return out


# -- composite ops --------------------------------------------------------


def l2_normalize(x, axis=-1, eps=1e-12) -> Tensor:
    """Scale rows to unit Euclidean norm (exact for norms >= ~1e-8)."""
    n = sqrt(sum_(square(x), axis=axis, keepdims=True))
    return div(x, clip(n, lo=eps))


def cosine_similarity(a, b, axis=-1) -> Tensor:
    """Cosine of the angle between `a` and `b` along `axis`; symmetric."""
    a, b = _lift(a), _lift(b)
    _check_broadcast("cosine_similarity", a, b)
    num = sum_(mul(a, b), axis=axis)
    den = mul(sqrt(sum_(square(a), axis=axis)), sqrt(sum_(square(b), axis=axis)))
    return div(num, clip(den, lo=1e-12))


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _lift(a), _lift(b)
    _check_broadcast("mse", a, b)
    return mean(square(sub(a, b)))


def bce(p, label) -> Tensor:
    """Elementwise binary cross-entropy -(y log p + (1-y) log(1-p)).

    Probabilities are clamped to [1e-7, 1-1e-7] for stability; callers
    reduce with `mean` as needed.
    """
    p = _lift(p)
    y = _lift(label)
    _check_broadcast("bce", p, y)
    pc = clip(p, 1e-7, 1.0 - 1e-7)
    one = Tensor(np.ones((), dtype=_F32))
    return neg(add(mul(y, log(pc)), mul(sub(one, y), log(sub(one, pc)))))

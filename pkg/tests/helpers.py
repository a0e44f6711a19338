"""Shared test oracles: central finite differences against the engine, and
the registry of differentiable ops with input samplers for gradient checks."""

import numpy as np

from tacuv import engine as eg


def numeric_grad(f, arrays, h=1e-3):
    """Central finite differences of a scalar function of numpy arrays."""
    grads = []
    for a in arrays:
        g = np.zeros(a.shape, dtype=np.float64)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gf[i] = (np.float64(fp) - np.float64(fm)) / (2.0 * h)
        grads.append(g)
    return grads


def grad_rel_error(build, arrays, h=1e-3):
    """Relative L2 error between autodiff and finite-difference gradients.

    `build(*tensors) -> scalar Tensor` defines the function under test;
    the comparison is over the concatenated gradient of every input.
    """
    tensors = [eg.tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    eg.backward(loss)
    ad = np.concatenate([t.grad.reshape(-1).astype(np.float64) for t in tensors])

    def f(*arrs):
        return build(*[eg.tensor(a) for a in arrs]).item()

    num = np.concatenate([g.reshape(-1)
                          for g in numeric_grad(f, [a.copy() for a in arrays], h)])
    denom = max(np.linalg.norm(num), np.linalg.norm(ad), 1e-8)
    return float(np.linalg.norm(ad - num) / denom)


def _scalarize(out, rng=None):
    """Contract any output to a scalar through fixed non-uniform weights.

    The weights depend only on the output shape (never on an RNG), so the
    finite-difference evaluations see exactly the same function as the
    autodiff pass.
    """
    n = int(np.prod(out.shape)) if out.shape else 1
    w = (0.3 + 0.7 * np.arange(n, dtype=np.float32) / max(n - 1, 1)).reshape(out.shape)
    return eg.sum_(eg.mul(out, eg.tensor(w)))


def _r(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape).astype(np.float32)


def _away_from_zero(rng, *shape, margin=0.08):
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return x.astype(np.float32)


# Each entry: name -> sampler(rng) returning (build, [input arrays]).
# Samplers keep inputs away from kinks and clamp boundaries, where finite
# differences are meaningless.
OP_CASES = {
    "add": lambda rng: ((lambda a, b: _scalarize(eg.add(a, b), rng)),
                        [_r(rng, 2, 3), _r(rng, 2, 3)]),
    "sub": lambda rng: ((lambda a, b: _scalarize(eg.sub(a, b), rng)),
                        [_r(rng, 2, 3), _r(rng, 3)]),
    "mul": lambda rng: ((lambda a, b: _scalarize(eg.mul(a, b), rng)),
                        [_r(rng, 2, 3), _r(rng, 1, 3)]),
    "div": lambda rng: ((lambda a, b: _scalarize(eg.div(a, b), rng)),
                        [_r(rng, 2, 2), _away_from_zero(rng, 2, 2, margin=0.4)]),
    "neg": lambda rng: ((lambda a: _scalarize(eg.neg(a), rng)), [_r(rng, 4)]),
    "exp": lambda rng: ((lambda a: _scalarize(eg.exp(a), rng)), [_r(rng, 3, 2)]),
    "log": lambda rng: ((lambda a: _scalarize(eg.log(a), rng)),
                        [_r(rng, 3, lo=0.3, hi=2.0)]),
    "sqrt": lambda rng: ((lambda a: _scalarize(eg.sqrt(a), rng)),
                         [_r(rng, 3, lo=0.3, hi=2.0)]),
    "sin": lambda rng: ((lambda a: _scalarize(eg.sin(a), rng)), [_r(rng, 5)]),
    "cos": lambda rng: ((lambda a: _scalarize(eg.cos(a), rng)), [_r(rng, 5)]),
    "square": lambda rng: ((lambda a: _scalarize(eg.square(a), rng)), [_r(rng, 2, 2)]),
    "relu": lambda rng: ((lambda a: _scalarize(eg.relu(a), rng)),
                         [_away_from_zero(rng, 3, 3)]),
    "leaky_relu": lambda rng: ((lambda a: _scalarize(eg.leaky_relu(a, 0.01), rng)),
                               [_away_from_zero(rng, 3, 3)]),
    "tanh": lambda rng: ((lambda a: _scalarize(eg.tanh(a), rng)), [_r(rng, 4)]),
    "sigmoid": lambda rng: ((lambda a: _scalarize(eg.sigmoid(a), rng)), [_r(rng, 4)]),
    "clip": lambda rng: ((lambda a: _scalarize(eg.clip(a, -2.0, 2.0), rng)),
                         [_r(rng, 4)]),
    "sum": lambda rng: ((lambda a: _scalarize(eg.sum_(a, axis=1), rng)),
                        [_r(rng, 2, 3)]),
    "mean": lambda rng: ((lambda a: _scalarize(eg.mean(a, axis=0), rng)),
                         [_r(rng, 3, 2)]),
    "reshape": lambda rng: ((lambda a: _scalarize(eg.reshape(a, (3, 2)), rng)),
                            [_r(rng, 2, 3)]),
    "index": lambda rng: ((lambda a: _scalarize(a[1:, 0:2], rng)), [_r(rng, 3, 3)]),
    "take": lambda rng: ((lambda a: _scalarize(eg.take(a, [0, 2, 2, 1]), rng)),
                         [_r(rng, 3, 2)]),
    "concat": lambda rng: ((lambda a, b: _scalarize(eg.concat([a, b], axis=1), rng)),
                           [_r(rng, 2, 2), _r(rng, 2, 3)]),
    "transpose": lambda rng: ((lambda a: _scalarize(eg.transpose(a), rng)),
                              [_r(rng, 2, 3)]),
    "pad2d": lambda rng: ((lambda a: _scalarize(eg.pad2d(a, 1), rng)),
                          [_r(rng, 1, 1, 2, 2)]),
    "matmul": lambda rng: ((lambda a, b: _scalarize(eg.matmul(a, b), rng)),
                           [_r(rng, 2, 3), _r(rng, 3, 2)]),
    "matmul_batched": lambda rng: ((lambda a, b: _scalarize(eg.matmul(a, b), rng)),
                                   [_r(rng, 3, 2, 2), _r(rng, 3, 2, 2)]),
    "conv2d_valid": lambda rng: ((lambda x, w: _scalarize(eg.conv2d_valid(x, w, 2), rng)),
                                 [_r(rng, 1, 2, 6, 5), _r(rng, 2, 2, 3, 3)]),
    "adaptive_avg_pool": lambda rng: (
        (lambda x: _scalarize(eg.adaptive_avg_pool(x, 3, 3), rng)),
        [_r(rng, 1, 1, 5, 4)]),
    "adaptive_avg_pool_upsample": lambda rng: (
        (lambda x: _scalarize(eg.adaptive_avg_pool(x, 4, 4), rng)),
        [_r(rng, 1, 1, 2, 2)]),
    "log_softmax": lambda rng: ((lambda a: _scalarize(eg.log_softmax(a), rng)),
                                [_r(rng, 2, 4, lo=-2.0, hi=2.0)]),
    "l2_normalize": lambda rng: ((lambda a: _scalarize(eg.l2_normalize(a), rng)),
                                 [_r(rng, 2, 4, lo=0.2, hi=1.0)]),
    "cosine_similarity": lambda rng: (
        (lambda a, b: _scalarize(eg.cosine_similarity(a, b), rng)),
        [_r(rng, 2, 4, lo=0.2, hi=1.0), _r(rng, 2, 4, lo=0.2, hi=1.0)]),
    "mse": lambda rng: ((lambda a, b: eg.mse(a, b)),
                        [_r(rng, 2, 3), _r(rng, 2, 3)]),
    "bce": lambda rng: ((lambda p, y: _scalarize(eg.bce(p, y), rng)),
                        [_r(rng, 4, lo=0.15, hi=0.85), _r(rng, 4, lo=0.1, hi=0.9)]),
}

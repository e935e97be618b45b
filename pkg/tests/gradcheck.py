"""Central finite-difference oracle for the hand-written backward passes."""

import numpy as np

from titanet.layers import Tensor


def numeric_grad(f, arrays, i, h=1e-6):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*arrays)
        x[idx] = old - h
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    """Norm-wise relative error; gradients smaller than ``floor`` are compared absolutely
    (an identically-zero gradient otherwise turns roundoff into an error of 1)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check(op, arrays, seed=0, h=1e-6):
    """Worst relative error between autodiff and finite differences over all inputs.

    ``op`` maps Tensors to a Tensor; the scalar probed is sum(op(...) * R) for a
    fixed random R so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    R = np.random.default_rng(seed).normal(size=probe.shape)

    def scalar(*arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * R))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    from titanet import layers as L
    L.sum(L.mul(out, Tensor(R))).backward()
    worst = 0.0
    for i, t in enumerate(ts):
        worst = max(worst, rel_err(t.grad, numeric_grad(scalar, arrays, i, h)))
    return worst

"""Reverse-mode differentiable tensor and the layer kernels the encoder needs.

Every kernel takes and returns :class:`Tensor` objects. When gradient
recording is on and any input requires grad, the output keeps a closure that
pushes its gradient back to the inputs. ``Tensor.backward`` walks the tape in
reverse topological order.

Convolutions follow the cross-correlation convention (no kernel flip), use
stride 1 and dilation 1, and zero-pad so the time length is preserved.
"""

from __future__ import annotations

import contextlib
import enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        order = _topo_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        # leaves keep accumulating across calls; interior grads restart each pass
        _accum(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; broadcasting follows numpy
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A trainable tensor with a dotted path name, e.g. ``encoder.block1.dw.weight``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    # grads are never mutated in place, so sharing g without a copy is safe
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: _accum(a, -g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: _accum(x, g * mask))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: _accum(x, g * (1.0 - y * y)))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _result(y, (x,), lambda g: _accum(x, g * 0.5 / y))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    return _result(np.where(mask, x.data, floor), (x,), lambda g: _accum(x, g * mask))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: _accum(x, g.transpose(inv)))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(xs, np.split(g, cuts, axis=axis)):
            _accum(t, piece)

    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


# ----------------------------------------------------------------- reductions

def _ordered_sum(a: np.ndarray, axis: int) -> np.ndarray:
    # summing in sorted order makes the result independent of element order;
    # numpy's summation order also depends on memory layout, so fix that too
    s = np.sort(np.moveaxis(a, axis, -1), axis=-1)
    return np.ascontiguousarray(s).sum(axis=-1)


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False, order_invariant: bool = False) -> Tensor:
    if order_invariant and axis is not None:
        y = _ordered_sum(x.data, axis)
        if keepdims:
            y = np.expand_dims(y, axis)
    else:
        y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(y, (x,), backward)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    y = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _result(y, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last (time) axis: [B, C, T] -> [B, C]."""
    return mean(x, axis=-1)


def softmax(x: Tensor, axis: int = -1, order_invariant: bool = False) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    denom = np.expand_dims(_ordered_sum(e, axis), axis) if order_invariant else e.sum(axis=axis, keepdims=True)
    y = e / denom

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward(g):
        _accum(x, (g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)

    return _result(y, (x,), backward)


# -------------------------------------------------------------------- linear

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ weight.data)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _accum(weight, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(y, parents, backward)


def dropout(x: Tensor, p: float, mode: Mode, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) in train mode, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if mode is Mode.EVAL or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs a seeded generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: _accum(x, g * mask))


# -------------------------------------------------------------- convolutions

def _check_kernel(k: int):
    if k % 2 != 1:
        raise ConfigError(f"kernel size must be odd for same-padding, got {k}")


def _pad_time(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad)))


def conv1d_depthwise(x: Tensor, weight: Tensor) -> Tensor:
    """One filter per channel. x: [B, C, T], weight: [C, 1, k] -> [B, C, T]."""
    B, C, T = x.shape
    if weight.ndim != 3 or weight.shape[0] != C or weight.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be [{C}, 1, k], got {list(weight.shape)}")
    k = weight.shape[2]
    _check_kernel(k)
    pad = (k - 1) // 2
    xp = _pad_time(x.data, pad)
    w = weight.data[:, 0, :]
    y = np.zeros((B, C, T), dtype=DTYPE)
    for j in range(k):
        y += w[None, :, j, None] * xp[:, :, j:j + T]

    def backward(g):
        if weight.requires_grad:
            gw = np.empty((C, 1, k), dtype=DTYPE)
            for j in range(k):
                gw[:, 0, j] = np.einsum("bct,bct->c", g, xp[:, :, j:j + T])
            _accum(weight, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + T] += w[None, :, j, None] * g
            _accum(x, gxp[:, :, pad:pad + T])

    return _result(y, (x, weight), backward)


def conv1d_pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution. x: [B, C_in, T], weight: [C_out, C_in, 1], bias: [C_out]."""
    B, Cin, T = x.shape
    if weight.ndim != 3 or weight.shape[1] != Cin or weight.shape[2] != 1:
        raise ShapeError(f"pointwise weight must be [C_out, {Cin}, 1], got {list(weight.shape)}")
    Cout = weight.shape[0]
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"pointwise bias must be [{Cout}], got {list(bias.shape)}")
    W = weight.data[:, :, 0]
    y = np.matmul(W, x.data)
    if bias is not None:
        y += bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            _accum(weight, np.matmul(g, x.data.transpose(0, 2, 1)).sum(axis=0)[:, :, None])
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            _accum(x, np.matmul(W.T, g))

    return _result(y, parents, backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Full convolution across channels. x: [B, C_in, T], weight: [C_out, C_in, k]."""
    B, Cin, T = x.shape
    if weight.ndim != 3 or weight.shape[1] != Cin:
        raise ShapeError(f"conv weight must be [C_out, {Cin}, k], got {list(weight.shape)}")
    Cout, _, k = weight.shape
    _check_kernel(k)
    pad = (k - 1) // 2
    xp = _pad_time(x.data, pad)
    # cols[b, c*k + j, t] = xp[b, c, t + j]
    cols = np.stack([xp[:, :, j:j + T] for j in range(k)], axis=2).reshape(B, Cin * k, T)
    W = weight.data.reshape(Cout, Cin * k)
    y = np.matmul(W, cols)
    if bias is not None:
        y += bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            g2 = g.transpose(1, 0, 2).reshape(Cout, B * T)
            c2 = cols.transpose(1, 0, 2).reshape(Cin * k, B * T)
            _accum(weight, (g2 @ c2.T).reshape(Cout, Cin, k))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(W.T, g).reshape(B, Cin, k, T)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + T] += gcols[:, :, j, :]
            _accum(x, gxp[:, :, pad:pad + T])

    return _result(y, parents, backward)


# ---------------------------------------------------------------- batch norm

class BatchNorm1d:
    """Per-channel normalization over batch (and time, for 3-D input).

    Running variance is tracked with the unbiased estimate. Before any train
    step the running stats are mean 0 / var 1, so eval mode is then an affine
    map with scale gamma/sqrt(1+eps).
    """

    def __init__(self, channels: int, name: str, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return batchnorm1d(x, self, mode)


def batchnorm1d(x: Tensor, state: BatchNorm1d, mode: Mode) -> Tensor:
    if x.ndim not in (2, 3) or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm expects [B, {state.channels}(, T)], got {list(x.shape)}")
    axes = (0, 2) if x.ndim == 3 else (0,)
    view = (1, -1, 1) if x.ndim == 3 else (1, -1)
    gamma, beta = state.gamma, state.beta

    if mode is Mode.TRAIN:
        n = x.data.size // state.channels
        if n < 2:
            raise ShapeError("train-mode batchnorm needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = x.data - mu.reshape(view)
        xhat *= invstd.reshape(view)
        y = xhat * gamma.data.reshape(view)
        y += beta.data.reshape(view)

        def backward(g):
            gxhat = (g * xhat).sum(axis=axes)
            gsum = g.sum(axis=axes)
            if gamma.requires_grad:
                _accum(gamma, gxhat)
            if beta.requires_grad:
                _accum(beta, gsum)
            if x.requires_grad:
                # gx = gamma*invstd/n * (n g - sum g - xhat sum(g xhat))
                scale = (gamma.data * invstd).reshape(view)
                gx = xhat * (-gxhat / n).reshape(view)
                gx += g
                gx -= (gsum / n).reshape(view)
                gx *= scale
                _accum(x, gx)

        return _result(y, (x, gamma, beta), backward)

    invstd = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(view)) * invstd.reshape(view)
    y = xhat * gamma.data.reshape(view) + beta.data.reshape(view)

    def backward_eval(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            _accum(x, g * (gamma.data * invstd).reshape(view))

    return _result(y, (x, gamma, beta), backward_eval)


# ----------------------------------------------------------- squeeze-excite

def se_block(x: Tensor, w1: Tensor, w2: Tensor, b1: Tensor | None = None, b2: Tensor | None = None) -> Tensor:
    """Gate each channel by a context vector squeezed from the whole sequence.

    context = mean_t x;  gate = sigmoid(w2 relu(w1 context));  out = x * gate.
    """
    B, C, T = x.shape
    if w1.shape[1] != C or w2.shape[0] != C or w2.shape[1] != w1.shape[0]:
        raise ShapeError(f"se weights {list(w1.shape)}, {list(w2.shape)} do not fit {C} channels")
    context = global_avg_pool(x)
    hidden = relu(linear(context, w1, b1))
    gate = sigmoid(linear(hidden, w2, b2))
    return mul(x, reshape(gate, (B, C, 1)))


# ------------------------------------------------------------------- helpers

def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# -------------------------------------------------------- attentive pooling

def attentive_stats(H: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, eps: float = 1e-9,
                    order_invariant: bool = True) -> Tensor:
    """Channel-wise attentive mean and std over time, fused.

    H: [B, C, T]; w1: [d, C, 1]; w2: [C, d, 1]. Attention weights
    alpha = softmax_t(w2 tanh(w1 H + b1) + b2), one distribution per channel.
    Returns [B, 2C] = concat(mu, sqrt(max(sum_t alpha H^2 - mu^2, eps))).
    With ``order_invariant`` the time reductions sum in sorted order, so frame
    order cannot change the output; plain sums are faster and differ by roundoff.
    """
    B, C, T = H.shape
    d = w1.shape[0]
    if w1.shape != (d, C, 1) or w2.shape != (C, d, 1) or b1.shape != (d,) or b2.shape != (C,):
        raise ShapeError(f"attention weights {list(w1.shape)}, {list(w2.shape)} do not fit {C} channels")
    h = H.data
    W1, W2 = w1.data[:, :, 0], w2.data[:, :, 0]
    # projections run with frames as matrix rows: the BLAS result for a row
    # does not depend on its position, which a frame-as-column layout breaks
    hT = np.ascontiguousarray(h.transpose(0, 2, 1))
    a = np.matmul(hT, W1.T)
    a += b1.data
    np.tanh(a, out=a)
    # large [B, C, T] buffers are updated in place to keep memory traffic down
    alpha = np.matmul(a, W2.T).transpose(0, 2, 1)
    alpha += b2.data[None, :, None]
    alpha -= alpha.max(axis=2, keepdims=True)
    np.exp(alpha, out=alpha)
    tsum = (lambda x: _ordered_sum(x, 2)) if order_invariant else (lambda x: x.sum(axis=2))
    alpha /= tsum(alpha)[:, :, None]
    buf = alpha * h
    mu = tsum(buf)
    buf *= h
    m2 = tsum(buf)
    del buf
    raw_var = m2 - mu * mu
    live = raw_var > eps
    sigma = np.sqrt(np.where(live, raw_var, eps))
    out = np.concatenate([mu, sigma], axis=1)

    def backward(g):
        g_mu, g_sigma = g[:, :C], g[:, C:]
        g_m2 = np.where(live, g_sigma / (2.0 * sigma), 0.0)[:, :, None]
        g_mu = (g_mu - 2.0 * mu * g_m2[:, :, 0])[:, :, None]
        # d out / d alpha[c, t] = g_mu H + g_m2 H^2
        g_s = g_m2 * h
        g_s += g_mu
        g_s *= h
        g_s -= (alpha * g_s).sum(axis=2, keepdims=True)
        g_s *= alpha
        if w2.requires_grad:
            _accum(w2, np.matmul(g_s, a).sum(axis=0)[:, :, None])
        if b2.requires_grad:
            _accum(b2, g_s.sum(axis=(0, 2)))
        g_pre = np.matmul(g_s.transpose(0, 2, 1), W2)  # [B, T, d]
        del g_s
        g_pre *= 1.0 - a * a
        if w1.requires_grad:
            _accum(w1, np.matmul(g_pre.transpose(0, 2, 1), hT).sum(axis=0)[:, :, None])
        if b1.requires_grad:
            _accum(b1, g_pre.sum(axis=(0, 1)))
        if H.requires_grad:
            g_h = (2.0 * g_m2) * h
            g_h += g_mu
            g_h *= alpha
            g_h += np.matmul(g_pre, W1).transpose(0, 2, 1)
            _accum(H, g_h)

    return _result(out, (H, w1, b1, w2, b2), backward)

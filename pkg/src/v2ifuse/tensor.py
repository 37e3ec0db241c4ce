"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the perception pipeline needs are provided.  Every op
returns a new :class:`Tensor` whose ``_backward`` closure pushes the incoming
gradient onto its parents; :func:`backward` walks the recorded graph in
reverse topological order.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.sparse import csr_matrix

from .errors import ConfigurationError, ContractError, DimensionError, TrainingError

__all__ = [
    "Tensor",
    "Parameter",
    "as_tensor",
    "backward",
    "no_grad",
    "sgd_step",
    "zero_grad",
    "init_weight",
    "linear",
    "matmul",
    "softmax",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "concat",
    "reshape",
    "transpose",
    "tsum",
    "mean",
    "maxpool2d",
    "conv2d",
    "gaussian_kernel",
    "gaussian_filter2d",
    "bilinear_sample",
    "bce_with_logits",
    "smooth_l1",
]


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf; ``grad`` always exists and matches ``data``."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str | None = None, trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(shape={self.shape}, name={self.name!r}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Within the block, results record no graph (inference keeps no intermediates alive)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else ())
    if needs:
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # gradients are never mutated in place, so sharing the array is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- autodiff

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def sgd_step(params: Iterable[Parameter], learning_rate: float) -> None:
    """In-place ``value -= lr * grad`` followed by zeroing the gradients."""
    params = list(params)
    for p in params:
        if p.trainable and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        if p.trainable and learning_rate != 0.0:
            p.data = p.data - learning_rate * p.grad
        p.grad = np.zeros_like(p.data)


def init_weight(rng: np.random.Generator, d_in: int, shape: tuple, name: str | None = None) -> Parameter:
    """Uniform in [-1/sqrt(d_in), 1/sqrt(d_in)]."""
    bound = 1.0 / math.sqrt(d_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name)


# ---------------------------------------------------------- elementwise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

    return _make(a.data / b.data, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: _accum(x, g * y))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


# ------------------------------------------------------------ shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(old)))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inv)))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        _accum(x, full)

    return _make(x.data[index], (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    """Row-wise ``x @ W + b`` for ``x`` of shape (n, d_in) and ``W`` (d_in, d_out)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    y = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
        y = add(y, b)
    return y


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), bw)


# ------------------------------------------------------------ image ops

def maxpool2d(x, window: int, stride: int) -> Tensor:
    """Max over ``window``x``window`` patches of a (c, h, w) map, no padding.

    The gradient goes to the first maximal element of each window.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d expects (c, h, w), got {x.shape}")
    c, h, w = x.shape
    if window > h or window > w or window < 1 or stride < 1:
        raise DimensionError(f"maxpool2d: window {window} does not fit input {x.shape}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, :, None] * stride + di
        cols = np.arange(wo)[None, None, :] * stride + dj
        chans = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
        full = np.zeros_like(x.data)
        np.add.at(full, (chans, rows, cols), g)
        _accum(x, full)

    return _make(out, (x,), bw)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (c, k, k, ho, wo) order keeps the inner copy loops contiguous
    return win.transpose(0, 3, 4, 1, 2).reshape(-1, ho * wo)


def conv2d(x, W, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (c_in, h, w) map with (c_out, c_in, k, k) filters, zero-padded."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 3 or W.ndim != 4 or W.shape[1] != x.shape[0] or W.shape[2] != W.shape[3]:
        raise DimensionError(f"conv2d: input shape {x.shape} incompatible with filter shape {W.shape}")
    c_in, h, w = x.shape
    c_out, _, k, _ = W.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {xp.shape}")
    cols = _im2col(xp, k, stride, ho, wo)
    Wm = W.data.reshape(c_out, -1)
    out = (Wm @ cols).reshape(c_out, ho, wo)
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        parents.append(b)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        if W.requires_grad:
            _accum(W, (g2 @ cols.T).reshape(W.shape))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=1))
        if x.requires_grad and stride == 1:
            # input gradient is a full correlation with the flipped, transposed filters
            q = k - 1 - padding
            gp = np.pad(g, ((0, 0), (q, q), (q, q))) if q >= 0 else g[:, -q:q, -q:q]
            Wf = W.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gcols = _im2col(gp, k, 1, h, w)
            _accum(x, (Wf @ gcols).reshape(c_in, h, w))
        elif x.requires_grad:
            dcols = (g2.T @ Wm).reshape(ho, wo, c_in, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j].transpose(2, 0, 1)
            _accum(x, dxp[:, padding:padding + h, padding:padding + w])

    return _make(out, parents, bw)


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    """Normalized 2D Gaussian of odd ``size``; sums to 1."""
    if size % 2 != 1 or size < 1:
        raise ConfigurationError(f"Gaussian kernel size must be odd, got {size}")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g1 = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g1, g1)
    return k / k.sum()


def _correlate_same(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    r = kern.shape[0] // 2
    h, w = x.shape[-2:]
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    out = np.zeros_like(x)
    for i in range(kern.shape[0]):
        for j in range(kern.shape[1]):
            out += kern[i, j] * xp[:, i:i + h, j:j + w]
    return out


def gaussian_filter2d(x, sigma: float, kernel: int) -> Tensor:
    """Per-channel Gaussian smoothing of a (c, h, w) map, zero-padded.

    ``sigma == 0`` is an identity pass-through.
    """
    if kernel % 2 != 1 or kernel < 1:
        raise ConfigurationError(f"Gaussian kernel size must be odd, got {kernel}")
    if sigma < 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"gaussian_filter2d expects (c, h, w), got {x.shape}")
    if sigma == 0:
        return _make(x.data.copy(), (x,), lambda g: _accum(x, g))
    kern = gaussian_kernel(sigma, kernel)
    flipped = kern[::-1, ::-1]
    return _make(_correlate_same(x.data, kern), (x,), lambda g: _accum(x, _correlate_same(g, flipped)))


def bilinear_sample(feature, points) -> Tensor:
    """Sample a (c, h, w) map at continuous (x, y) = (column, row) points.

    Integer coordinates hit cell centers.  Corners outside the map read as
    zero, so a point far outside returns the zero vector.  Returns (n, c).
    """
    feature, points = as_tensor(feature), as_tensor(points)
    if feature.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"bilinear_sample: feature {feature.shape}, points {points.shape}")
    c, h, w = feature.shape
    n = len(points.data)
    px, py = points.data[:, 0], points.data[:, 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    rows = np.ascontiguousarray(feature.data.reshape(c, h * w).T)
    # corner order: (0,0), (1,0), (0,1), (1,1); each point is a 4-entry row
    # of a sparse (n, h*w) interpolation matrix
    xi = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    yi = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    cols = np.where(ok, yi * w + xi, 0).ravel()
    indptr = np.arange(0, 4 * n + 1, 4)
    wx = np.stack([1.0 - fx, fx, 1.0 - fx, fx], axis=1)
    wy = np.stack([1.0 - fy, 1.0 - fy, fy, fy], axis=1)

    def interp(weights):
        return csr_matrix(((weights * ok).ravel(), cols, indptr), shape=(n, h * w))

    A = interp(wx * wy)
    out = A @ rows

    def bw(g):
        if feature.requires_grad:
            _accum(feature, np.asarray(A.T @ g).T.reshape(c, h, w))
        if points.requires_grad:
            sx = np.array([-1.0, 1.0, -1.0, 1.0])
            sy = np.array([-1.0, -1.0, 1.0, 1.0])
            gx = ((interp(sx * wy) @ rows) * g).sum(axis=1)
            gy = ((interp(sy * wx) @ rows) * g).sum(axis=1)
            _accum(points, np.stack([gx, gy], axis=1))

    return _make(out, (feature, points), bw)


# ------------------------------------------------------------ losses

def bce_with_logits(logits, targets: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Elementwise binary cross-entropy on logits, positives weighted by ``pos_weight``."""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    sp_pos = np.logaddexp(0.0, z.data)   # -log(1 - sigmoid(z))
    sp_neg = np.logaddexp(0.0, -z.data)  # -log(sigmoid(z))
    loss = pos_weight * y * sp_neg + (1.0 - y) * sp_pos
    s = _sigmoid(z.data)

    def bw(g):
        _accum(z, g * (pos_weight * y * (s - 1.0) + (1.0 - y) * s))

    return _make(loss, (z,), bw)


def smooth_l1(x, beta: float = 1.0) -> Tensor:
    x = as_tensor(x)
    a = np.abs(x.data)
    small = a < beta
    y = np.where(small, 0.5 * x.data**2 / beta, a - 0.5 * beta)
    return _make(y, (x,), lambda g: _accum(x, g * np.where(small, x.data / beta, np.sign(x.data))))

"""Reverse-mode autodiff on numpy arrays, sized for the networks built here.

A `Tensor` wraps an ndarray and remembers, per parent, a closure that maps
the output gradient to that parent's gradient contribution. `backward()` on
a scalar walks the recorded graph in reverse topological order. The op set
is deliberately small: exactly what the supernets, projection heads, and
losses in this package need.

Teacher networks and frozen backbones are excluded from the graph by
constructing their parameters with ``requires_grad=False`` (or wrapping
calls in ``no_grad()``); their forwards then build no tape at all.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import StateError

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "_links")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self._links: list[tuple["Tensor", object]] = []

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise StateError("backward() requires a scalar loss tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._links:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, fn in node._links:
                g = fn(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g


def _result(data, links):
    """Wrap `data`; keep only links to grad-requiring parents."""
    if not _grad_enabled:
        return Tensor(data)
    links = [(p, fn) for p, fn in links if p.requires_grad]
    out = Tensor(data, requires_grad=bool(links))
    out._links = links
    return out


def constant(data) -> Tensor:
    return Tensor(np.asarray(data))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic / shaping


def add(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def scale(a: Tensor, s: float) -> Tensor:
    return _result(a.data * s, [(a, lambda g: g * s)])


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(
        np.asarray(a.data.mean(), dtype=a.data.dtype),
        [(a, lambda g: np.full_like(a.data, g / n))],
    )


def sum_all(a: Tensor) -> Tensor:
    return _result(
        np.asarray(a.data.sum(), dtype=a.data.dtype),
        [(a, lambda g: np.full_like(a.data, g))],
    )


def concat_cols(parts: list[Tensor]) -> Tensor:
    datas = [p.data for p in parts]
    links = []
    offset = 0
    for p in parts:
        w = p.data.shape[1]
        links.append((p, (lambda o, w: lambda g: g[:, o : o + w])(offset, w)))
        offset += w
    return _result(np.concatenate(datas, axis=1), links)


# ---------------------------------------------------------------------------
# layers


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, [(a, lambda g: g * mask)])


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """y = x @ w.T (+ b); w is (out_features, in_features)."""
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    links = [
        (x, lambda g: g @ w.data),
        (w, lambda g: g.T @ x.data),
    ]
    if b is not None:
        links.append((b, lambda g: g.sum(axis=0)))
    return _result(y, links)


def matmul_nt(x: Tensor, const: np.ndarray) -> Tensor:
    """x @ const.T with `const` treated as a gradient-free constant."""
    return _result(x.data @ const.T, [(x, lambda g: g @ const)])


def rowwise_dot(x: Tensor, const: np.ndarray) -> Tensor:
    """Per-row dot product against constant rows; returns (B, 1)."""
    y = np.sum(x.data * const, axis=1, keepdims=True)
    return _result(y, [(x, lambda g: g * const)])


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    *,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    y = kernels.conv2d_forward(x.data, w.data, stride, pad, groups)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1)

    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def both(g):
        # dx and dw are requested back-to-back for the same upstream grad;
        # one kernel call serves both.
        key = id(g)
        if key not in cache:
            cache.clear()
            cache[key] = kernels.conv2d_backward(x.data, w.data, g, stride, pad, groups)
        return cache[key]

    links = [(x, lambda g: both(g)[0]), (w, lambda g: both(g)[1])]
    if b is not None:
        links.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _result(y, links)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch-statistics normalization over (N, H, W) per channel.

    Returns (out, batch_mean, batch_var); the moments are plain arrays for
    callers that maintain running buffers. Gradients flow through the batch
    moments (standard batchnorm backward).
    """
    xd = x.data
    axes = (0, 2, 3) if xd.ndim == 4 else (0,)
    m = xd.size // xd.shape[1]
    mean = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    shape = (1, -1, 1, 1) if xd.ndim == 4 else (1, -1)
    invstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mean.reshape(shape)) * invstd.reshape(shape)
    y = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def dx(g):
        dxhat = g * gamma.data.reshape(shape)
        s1 = dxhat.sum(axis=axes).reshape(shape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
        return (invstd.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)

    links = [
        (x, dx),
        (gamma, lambda g: (g * xhat).sum(axis=axes)),
        (beta, lambda g: g.sum(axis=axes)),
    ]
    return _result(y, links), mean, var


def batchnorm_eval(
    x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray, eps: float
) -> Tensor:
    """Normalization with fixed (tracked) statistics; affine in x."""
    xd = x.data
    shape = (1, -1, 1, 1) if xd.ndim == 4 else (1, -1)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(shape).astype(xd.dtype)) * invstd.reshape(shape)
    y = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    axes = (0, 2, 3) if xd.ndim == 4 else (0,)
    links = [
        (x, lambda g: g * (gamma.data * invstd).reshape(shape)),
        (gamma, lambda g: (g * xhat).sum(axis=axes)),
        (beta, lambda g: g.sum(axis=axes)),
    ]
    return _result(y, links)


def avgpool2d(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Average pooling; padded positions count toward the divisor (k*k)."""
    xd = x.data
    n, c, h, w = xd.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    acc = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            acc += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    y = acc / np.asarray(k * k, dtype=xd.dtype)

    def dx(g):
        gp = np.zeros_like(xp)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gk
        return gp[:, :, pad : pad + h, pad : pad + w] if pad else gp

    return _result(y, [(x, dx)])


def maxpool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max pooling; on ties the gradient goes to the first window position."""
    xd = x.data
    n, c, h, w = xd.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        xp = np.pad(
            xd,
            ((0, 0), (0, 0), (pad, pad), (pad, pad)),
            constant_values=-np.inf,
        )
    else:
        xp = xd
    windows = np.empty((n, c, ho, wo, k * k), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            windows[:, :, :, :, i * k + j] = xp[
                :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ]
    arg = windows.argmax(axis=4)
    y = np.take_along_axis(windows, arg[..., None], axis=4)[..., 0]

    def dx(g):
        gp = np.zeros_like(xp, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                mask = arg == (i * k + j)
                gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * mask
        return gp[:, :, pad : pad + h, pad : pad + w] if pad else gp

    return _result(y, [(x, dx)])


def global_avg_pool(x: Tensor) -> Tensor:
    xd = x.data
    hw = xd.shape[2] * xd.shape[3]
    y = xd.mean(axis=(2, 3))

    def dx(g):
        return np.broadcast_to((g / hw)[:, :, None, None], xd.shape).astype(g.dtype)

    return _result(y, [(x, dx)])


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=1, keepdims=True))
    norm = np.maximum(norm, np.asarray(eps, dtype=xd.dtype))
    y = xd / norm

    def dx(g):
        return (g - y * np.sum(g * y, axis=1, keepdims=True)) / norm

    return _result(y, [(x, dx)])


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise logsumexp, (B, M) -> (B, 1), numerically stabilized."""
    xd = x.data
    mx = xd.max(axis=1, keepdims=True)
    ex = np.exp(xd - mx)
    s = ex.sum(axis=1, keepdims=True)
    y = np.log(s) + mx
    softmax = ex / s
    return _result(y, [(x, lambda g: g * softmax)])


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels against row softmax."""
    ld = logits.data
    mx = ld.max(axis=1, keepdims=True)
    ex = np.exp(ld - mx)
    probs = ex / ex.sum(axis=1, keepdims=True)
    n = ld.shape[0]
    nll = -np.log(np.maximum(probs[np.arange(n), labels], 1e-30))
    loss = np.asarray(nll.mean(), dtype=ld.dtype)

    def dlogits(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return d * (g / n)

    return _result(loss, [(logits, dlogits)])


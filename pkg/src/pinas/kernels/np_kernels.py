"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback path used when numba is unavailable or when
``PINAS_KERNEL_BACKEND=numpy`` is set. Shapes follow the NCHW convention;
weights are (out_channels, in_channels // groups, kh, kw).
"""

from __future__ import annotations

import numpy as np


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C, kh, kw, ho, wo) patch view, copied."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout, cing, kh, kw = w.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    # (N, G, Cg*kh*kw, L) against (G, Og, Cg*kh*kw)
    cols = cols.reshape(n, groups, cing * kh * kw, ho * wo)
    wg = w.reshape(groups, cout // groups, cing * kh * kw)
    out = np.matmul(wg[None], cols)  # (N, G, Og, L)
    return np.ascontiguousarray(out.reshape(n, cout, ho, wo))


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    dout: np.ndarray,
    stride: int,
    pad: int,
    groups: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (dx, dw) for the forward above."""
    n, cin, h, wd = x.shape
    cout, cing, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x

    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n, groups, cing * kh * kw, ho * wo)
    dg = dout.reshape(n, groups, cout // groups, ho * wo)
    wg = w.reshape(groups, cout // groups, cing * kh * kw)

    dw = np.matmul(dg, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    dcols = np.matmul(wg.transpose(0, 2, 1)[None], dg)  # (N, G, Cg*kh*kw, L)
    dcols = dcols.reshape(n, cin, kh, kw, ho, wo)

    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw.reshape(w.shape).astype(w.dtype, copy=False)

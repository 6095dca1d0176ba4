"""Numba-jitted convolution kernels (direct loops, float64 accumulators).

Primary path for the hot inner loops. Loop order is fixed, so results are
bit-identical across runs; accumulation in float64 keeps the float32 outputs
well-conditioned. Compiled lazily per dtype with on-disk caching.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_forward_jit(xp, w, out, stride, groups):
    n, cin, hp, wp = xp.shape
    cout, cing, kh, kw = w.shape
    og = cout // groups
    ho, wo = out.shape[2], out.shape[3]
    for b in range(n):
        for g in range(groups):
            for oc in range(og):
                co = g * og + oc
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for ic in range(cing):
                            ci = g * cing + ic
                            for i in range(kh):
                                ih = oh * stride + i
                                for j in range(kw):
                                    acc += xp[b, ci, ih, ow * stride + j] * w[co, ic, i, j]
                        out[b, co, oh, ow] = acc


@njit(cache=True)
def _conv2d_backward_input_jit(dxp, w, dout, stride, groups):
    n = dout.shape[0]
    cout, cing, kh, kw = w.shape
    og = cout // groups
    ho, wo = dout.shape[2], dout.shape[3]
    for b in range(n):
        for g in range(groups):
            for oc in range(og):
                co = g * og + oc
                for oh in range(ho):
                    for ow in range(wo):
                        d = dout[b, co, oh, ow]
                        for ic in range(cing):
                            ci = g * cing + ic
                            for i in range(kh):
                                ih = oh * stride + i
                                for j in range(kw):
                                    dxp[b, ci, ih, ow * stride + j] += d * w[co, ic, i, j]


@njit(cache=True)
def _conv2d_backward_weight_jit(xp, dw, dout, stride, groups):
    n = dout.shape[0]
    cout, cing, kh, kw = dw.shape
    og = cout // groups
    ho, wo = dout.shape[2], dout.shape[3]
    for g in range(groups):
        for oc in range(og):
            co = g * og + oc
            for ic in range(cing):
                ci = g * cing + ic
                for i in range(kh):
                    for j in range(kw):
                        acc = 0.0
                        for b in range(n):
                            for oh in range(ho):
                                for ow in range(wo):
                                    acc += xp[b, ci, oh * stride + i, ow * stride + j] * dout[b, co, oh, ow]
                        dw[co, ic, i, j] = acc


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int) -> np.ndarray:
    n, _, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    _conv2d_forward_jit(_pad(x, pad), np.ascontiguousarray(w), out, stride, groups)
    return out


def conv2d_backward(
    x: np.ndarray,
    w: np.ndarray,
    dout: np.ndarray,
    stride: int,
    pad: int,
    groups: int,
) -> tuple[np.ndarray, np.ndarray]:
    n, cin, h, wd = x.shape
    xp = _pad(x, pad)
    dxp = np.zeros_like(xp)
    dout = np.ascontiguousarray(dout)
    wc = np.ascontiguousarray(w)
    _conv2d_backward_input_jit(dxp, wc, dout, stride, groups)
    dw = np.empty_like(wc)
    _conv2d_backward_weight_jit(xp, dw, dout, stride, groups)
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw

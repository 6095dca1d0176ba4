"""Shared test helpers: finite-difference checking and tiny fixtures."""

from __future__ import annotations

import os

# At test-sized shapes the BLAS backend is several times faster than the
# jitted loops, and the long training-based checks are budgeted around it.
# Cross-backend agreement is covered explicitly via kernels.get_backend.
os.environ.setdefault("PINAS_KERNEL_BACKEND", "numpy")

import numpy as np
import pytest

from pinas import tape


def fd_check(loss_fn, tensors, h=1e-3, rtol=0.01, atol=1e-7):
    """Central finite differences against tape gradients.

    `loss_fn()` rebuilds the graph from the current tensor data and returns a
    scalar Tensor. Asserts every coordinate of every tensor's gradient agrees
    within rtol (plus a small absolute floor for near-zero derivatives).
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [t.grad.copy() for t in tensors]
    for t, ana in zip(tensors, grads):
        flat = t.data.reshape(-1)
        num = np.zeros_like(ana, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            dn = float(loss_fn().data)
            flat[i] = orig
            num[i] = (up - dn) / (2 * h)
        num = num.reshape(t.data.shape)
        denom = np.maximum(np.abs(num), np.abs(ana))
        bad = np.abs(num - ana) > (rtol * denom + atol)
        assert not bad.any(), (
            f"finite differences disagree at {bad.sum()} / {bad.size} coords; "
            f"worst: num={num[bad][0]:.6g} ana={ana[bad][0]:.6g}"
        )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param64(rng, shape, scale=1.0):
    """float64 parameter with O(scale) entries, for FD-friendly graphs."""
    return tape.parameter(rng.normal(0.0, scale, size=shape))

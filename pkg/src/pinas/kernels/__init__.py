"""Convolution kernel dispatch.

The hot kernels come in two interchangeable implementations:

* ``numba`` -- jitted direct loops (default when numba imports cleanly)
* ``numpy`` -- im2col + BLAS matmul fallback

Selection is by the ``PINAS_KERNEL_BACKEND`` environment variable
(``auto`` | ``numba`` | ``numpy``), read once at import. Both backends share
the exact same call signatures; ``benchmarks/bench_kernels.py`` compares
them. Within one backend results are bit-identical across runs; across
backends they agree to float rounding only.
"""

from __future__ import annotations

import os

from ..errors import ConfigError
from . import np_kernels

_ENV_VAR = "PINAS_KERNEL_BACKEND"


def _resolve(choice: str):
    if choice == "numpy":
        return "numpy", np_kernels
    if choice == "numba":
        from . import nb_kernels

        return "numba", nb_kernels
    if choice == "auto":
        try:
            from . import nb_kernels

            return "numba", nb_kernels
        except ImportError:
            return "numpy", np_kernels
    raise ConfigError(
        f"{_ENV_VAR} must be one of auto|numba|numpy, got {choice!r}"
    )


BACKEND, _impl = _resolve(os.environ.get(_ENV_VAR, "auto").strip().lower())

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward


def get_backend(name: str):
    """Explicit backend module lookup, used by tests and the benchmark."""
    return _resolve(name)[1]

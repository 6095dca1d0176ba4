"""Deterministic per-component random streams derived from one master seed.

Every stage derives its own `numpy` Generator from (master_seed, component
name) so stages are independently reproducible: re-running linear evaluation
never consumes randomness that supernet training would have used.

The split is a documented hash: sha256 of the component string, folded to a
64-bit integer, combined with the master seed through `SeedSequence`.
Counter-suffixed components ("augment/123") give cheap per-step streams that
make resumed runs bit-identical to uninterrupted ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def component_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, component: str) -> np.random.Generator:
    """Generator for `component`, deterministic in (master_seed, component)."""
    return np.random.default_rng(
        np.random.SeedSequence([int(master_seed), component_key(component)])
    )


def step_stream(master_seed: int, component: str, step: int) -> np.random.Generator:
    """Per-step generator; step k's stream never depends on steps < k."""
    return stream(master_seed, f"{component}/{int(step)}")

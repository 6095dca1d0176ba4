"""Quantifies the two shifts weight sharing induces: cross-path feature
disagreement (pairwise cosine-similarity matrices over a probe batch) and
parameter-distribution drift across training (Wasserstein-1 between weight
snapshots). Both emit plot-ready structured text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ConfigError, ContractError
from .layers import BnMode
from .space import ArchEncoding, Space
from .supernet import PathContext, Supernet


@dataclass
class SimilarityMatrix:
    paths: list[str]
    values: np.ndarray  # (P, P), symmetric, diagonal 1
    off_diag_mean: float

    def to_text(self) -> str:
        lines = ["# feature similarity matrix", "# paths: " + " ".join(self.paths)]
        for row in self.values:
            lines.append("\t".join(repr(float(v)) for v in row))
        lines.append(f"# off_diag_mean {self.off_diag_mean!r}")
        return "\n".join(lines) + "\n"


@dataclass
class DriftSeries:
    layer: str
    steps: list[int]
    hist_counts: np.ndarray  # (S, bins)
    hist_edges: np.ndarray  # (bins + 1,), shared binning
    distances: list[float]  # consecutive-snapshot W1

    def to_text(self) -> str:
        lines = [f"# drift series layer={self.layer}", "# step\tw1_from_prev"]
        lines.append(f"{self.steps[0]}\t0.0")
        for step, d in zip(self.steps[1:], self.distances):
            lines.append(f"{step}\t{d!r}")
        return "\n".join(lines) + "\n"


def default_probe_paths(space: Space, max_paths: int = 4) -> list[ArchEncoding]:
    """Paths differing only at the last decision site (choice 0 elsewhere)."""
    radices = space.radices()
    base = [0] * len(radices)
    out = []
    for k in range(min(radices[-1], max_paths)):
        choices = list(base)
        choices[-1] = k
        out.append(ArchEncoding(choices=tuple(choices), space_id=space.space_id))
    return out


def feature_shift_matrix(
    supernet: Supernet,
    paths: list[ArchEncoding],
    probe_batch: np.ndarray,
    head: str = "project",
) -> SimilarityMatrix:
    """Mean-over-batch pairwise cosine similarity of per-path outputs.

    Entry (a, b) averages the per-sample cosine between the outputs the same
    input receives under path a and path b. `head` picks the readout:
    "project" compares the embeddings the consistency loss acts on,
    "features" compares the pooled backbone features underneath it.
    """
    if len(paths) < 2:
        raise ContractError(f"feature_shift_matrix needs >=2 paths, got {len(paths)}")
    if len(probe_batch) == 0:
        raise ContractError("feature_shift_matrix: empty probe batch")
    feats = []
    with tape.no_grad():
        for arch in paths:
            ctx = PathContext(arch, BnMode.BATCH_STATS, False)
            f = supernet.forward_path(probe_batch, ctx, head=head).data
            norms = np.linalg.norm(f, axis=1, keepdims=True)
            feats.append(f / np.maximum(norms, 1e-12))
    p = len(paths)
    values = np.empty((p, p), dtype=np.float64)
    for a in range(p):
        for b in range(a, p):
            cos = float(np.mean(np.sum(feats[a] * feats[b], axis=1)))
            values[a, b] = values[b, a] = cos
    off = values[~np.eye(p, dtype=bool)]
    return SimilarityMatrix(
        paths=[str(a) for a in paths], values=values, off_diag_mean=float(off.mean())
    )


def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """W1 between two equal-size empirical distributions (sorted-value form)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"wasserstein1: sizes {a.size} vs {b.size}")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def parameter_drift(snapshots: list[tuple[int, np.ndarray]], layer: str = "", bins: int = 64) -> DriftSeries:
    """Consecutive-snapshot W1 distances plus shared-bin histograms."""
    if len(snapshots) < 2:
        raise ContractError(f"parameter_drift needs >=2 snapshots, got {len(snapshots)}")
    shape = snapshots[0][1].shape
    for step, arr in snapshots:
        if arr.shape != shape:
            raise ContractError(f"snapshot at step {step} has shape {arr.shape}, expected {shape}")
    pooled = np.concatenate([arr.reshape(-1) for _, arr in snapshots])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        hi = lo + 1e-8
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.stack([np.histogram(arr.reshape(-1), bins=edges)[0] for _, arr in snapshots])
    distances = [
        wasserstein1(snapshots[i][1], snapshots[i + 1][1]) for i in range(len(snapshots) - 1)
    ]
    return DriftSeries(
        layer=layer,
        steps=[step for step, _ in snapshots],
        hist_counts=counts,
        hist_edges=edges,
        distances=distances,
    )

"""Dataset containers, CIFAR-10 binary ingestion, and a synthetic generator.

CIFAR-10 binary record layout: 1 label byte followed by 3072 pixel bytes
(three 32x32 planes, row-major, R then G then B). A writer is provided so
round-trip tests need no external data.

The synthetic set renders seeded Gaussian blobs into smooth low-res images
whose class identity is a texture statistic (blob size, blob count, relative
channel amplitude) rather than a position, so labels survive crop and flip
augmentation. The channel-amplitude axis lives in cross-channel structure,
which genuinely handicaps channel-grouped convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, IngestionError
from ..seeding import stream

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigError(f"dataset '{self.name}': images must be (N,C,H,W)")
        if len(self.labels) != len(self.images):
            raise ConfigError(f"dataset '{self.name}': {len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"dataset '{self.name}': labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) == 0:
        raise IngestionError(f"{path}: empty file (0 bytes, expected {RECORD_BYTES}-byte records)")
    if len(raw) % RECORD_BYTES != 0:
        good = len(raw) - len(raw) % RECORD_BYTES
        raise IngestionError(
            f"{path}: truncated record at byte {good} "
            f"({len(raw) - good} trailing bytes, record size {RECORD_BYTES})"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(path: str | Path) -> Dataset:
    """Load CIFAR-10 binary batches from a file or a directory of data_batch_*.bin."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("data_batch_*.bin")) or sorted(path.glob("*.bin"))
        if not files:
            raise IngestionError(f"{path}: no .bin batch files found")
    else:
        files = [path]
    parts = [_read_cifar_file(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if labels.max(initial=0) > 9:
        raise IngestionError(f"{path}: label {labels.max()} exceeds CIFAR-10 range")
    return Dataset(images=images, labels=labels, num_classes=10, name="cifar10")


def write_cifar10(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write images/labels in the CIFAR-10 binary record format."""
    if images.shape[1:] != (3, 32, 32):
        raise ConfigError(f"writer expects (N,3,32,32) images, got {images.shape}")
    pix = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8).reshape(len(images), -1)
    rec = np.concatenate([labels.astype(np.uint8)[:, None], pix], axis=1)
    Path(path).write_bytes(rec.tobytes())


def synthetic_blobs(
    num_classes: int = 8,
    per_class: int = 64,
    hw: int = 16,
    channels: int = 2,
    blob_sigma: float = 2.5,
    noise: float = 0.04,
    seed: int = 0,
) -> Dataset:
    """Seeded texture classes built from Gaussian blobs at random positions.

    A class is a combination of three image statistics: blob size (scaled by
    `blob_sigma`), blob count, and the amplitude of channels > 0 relative to
    channel 0. Blob positions are drawn fresh per image, so the label is a
    function of texture only and survives cropping and flipping; the relative
    channel amplitude is the part that takes cross-channel computation to
    read out.
    """
    rng = stream(seed, f"synthetic/{num_classes}/{per_class}/{hw}/{channels}")
    sizes = (0.55 * blob_sigma, 0.95 * blob_sigma)
    counts = (4, 7)
    ratios = (0.45, 1.0)

    def attrs(k: int):
        # 3-bit grid of (size, count, ratio); wraps scale sizes up for k >= 8
        wrap = 1.0 + 0.3 * (k // 8)
        return sizes[k & 1] * wrap, counts[(k >> 1) & 1], ratios[(k >> 2) & 1]

    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float32)
    n = num_classes * per_class
    images = np.zeros((n, channels, hw, hw), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for idx in range(n):
        sigma, count, ratio = attrs(int(labels[idx]))
        centers = rng.uniform(1.0, hw - 1.0, size=(count, 2)).astype(np.float32)
        amps = rng.uniform(0.40, 0.95, size=count).astype(np.float32)
        # channels beyond the first see the same blobs, slightly shifted
        shifts = rng.normal(0.0, 0.5, size=(channels, count, 2)).astype(np.float32)
        shifts[0] = 0.0
        for c in range(channels):
            scale = 1.0 if c == 0 else ratio
            for b in range(count):
                cy, cx = centers[b] + shifts[c, b]
                g = np.exp(-(((yy - cy) ** 2) + ((xx - cx) ** 2)) / (2.0 * sigma**2))
                images[idx, c] += scale * amps[b] * g
    images += rng.normal(0.0, noise, size=images.shape).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images=images, labels=labels, num_classes=num_classes, name="synthetic")


def make_splits(
    dataset: Dataset,
    per_class_val: int,
    per_class_calib: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class-balanced disjoint (train, search_val, calibration) index lists."""
    train, val, calib = [], [], []
    rng = stream(seed, "splits")
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        need = per_class_val + per_class_calib
        if len(idx) < need:
            raise ConfigError(
                f"class {k} has {len(idx)} samples, needs {need} for val+calibration"
            )
        idx = rng.permutation(idx)
        val.append(idx[:per_class_val])
        calib.append(idx[per_class_val:need])
        train.append(idx[need:])
    cat = lambda parts: np.sort(np.concatenate(parts)).astype(np.int64)
    return cat(train), cat(val), cat(calib)


def subset(dataset: Dataset, idx: np.ndarray, name: str | None = None) -> Dataset:
    return Dataset(
        images=dataset.images[idx],
        labels=dataset.labels[idx],
        num_classes=dataset.num_classes,
        name=name or dataset.name,
    )

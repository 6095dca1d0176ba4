"""Stochastic augmentation pipeline producing four views per image.

All ops take and return (C, H, W) float32 arrays in [0, 1] and preserve
shape. Randomness comes from an explicit Generator so a policy replayed with
the same seed reproduces its outputs exactly; the training loop derives a
per-step generator, which makes augmentation reproducible across resume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..seeding import stream

ALL_OPS = ("random_resize_crop", "horizontal_flip", "color_jitter", "color_drop", "gaussian_blur")


@dataclass
class AugmentPolicy:
    ops: tuple[str, ...] = ALL_OPS
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 1.3333333333333333)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    drop_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    seed: int = 0

    def __post_init__(self):
        for op in self.ops:
            if op not in ALL_OPS:
                raise ConfigError(f"unknown augmentation op '{op}'")


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    p00 = img[:, y0][:, :, x0]
    p01 = img[:, y0][:, :, x1]
    p10 = img[:, y1][:, :, x0]
    p11 = img[:, y1][:, :, x1]
    top = p00 * (1 - wx) + p01 * wx
    bot = p10 * (1 - wx) + p11 * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def random_resize_crop(
    img: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.2, 1.0),
    ratio: tuple[float, float] = (0.75, 4.0 / 3.0),
    retries: int = 10,
) -> np.ndarray:
    """Crop a random area/aspect box and resize back to the input size.

    Infeasible boxes are re-sampled up to `retries` times, then the op falls
    back to a centered square crop of the full short side.
    """
    c, h, w = img.shape
    area = h * w
    for _ in range(retries):
        target = rng.uniform(scale[0], scale[1]) * area
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        ch = int(round(np.sqrt(target / aspect)))
        cw = int(round(np.sqrt(target * aspect)))
        if 0 < ch <= h and 0 < cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return _bilinear_resize(img[:, top : top + ch, left : left + cw], h, w)
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return _bilinear_resize(img[:, top : top + side, left : left + side], h, w)


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def color_jitter(img: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Brightness, contrast, and per-channel gain jitter, order fixed."""
    s = strength
    out = img
    bright = rng.uniform(max(0.0, 1.0 - s), 1.0 + s)
    out = out * bright
    contrast = rng.uniform(max(0.0, 1.0 - s), 1.0 + s)
    out = (out - out.mean()) * contrast + out.mean()
    gains = rng.uniform(max(0.0, 1.0 - s), 1.0 + s, size=(img.shape[0], 1, 1))
    out = out * gains
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def color_drop(img: np.ndarray) -> np.ndarray:
    """Replace every channel with the channel mean (grayscale)."""
    gray = img.mean(axis=0, keepdims=True)
    return np.broadcast_to(gray, img.shape).astype(np.float32).copy()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with zero padding at the borders."""
    if sigma <= 0:
        return img.copy()
    radius = max(1, int(round(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float32)
    k = np.exp(-(t**2) / (2.0 * sigma**2))
    k /= k.sum()
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (0, 0), (radius, radius)))
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * padded[:, :, i : i + w]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)))
    out2 = np.zeros_like(img)
    for i, kv in enumerate(k):
        out2 += kv * padded[:, i : i + h, :]
    return np.clip(out2, 0.0, 1.0).astype(np.float32)


def apply_policy(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply the policy's ops in declared order, one random draw block per op."""
    out = img
    for op in policy.ops:
        if op == "random_resize_crop":
            out = random_resize_crop(out, rng, policy.crop_scale, policy.crop_ratio)
        elif op == "horizontal_flip":
            if rng.uniform() < policy.flip_prob:
                out = horizontal_flip(out)
        elif op == "color_jitter":
            if rng.uniform() < policy.jitter_prob:
                out = color_jitter(out, rng, policy.jitter_strength)
        elif op == "color_drop":
            if rng.uniform() < policy.drop_prob:
                out = color_drop(out)
        elif op == "gaussian_blur":
            if rng.uniform() < policy.blur_prob:
                out = gaussian_blur(out, float(rng.uniform(*policy.blur_sigma)))
    return out


def four_views(
    img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Four independently sampled augmentations of one image, shared policy."""
    if rng is None:
        rng = stream(policy.seed, "four_views")
    return tuple(apply_policy(img, policy, rng) for _ in range(4))


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    """Channelwise (x - mean) / std, applied after augmentation."""
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    if images.ndim == 3:
        return ((images[None] - mean) / std)[0]
    return (images - mean) / std


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic sample permutation for (seed, epoch)."""
    return stream(seed, f"epoch_order/{epoch}").permutation(n).astype(np.int64)

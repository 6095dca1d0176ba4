"""Linear evaluation over the frozen supernet with path sampling.

Only the linear head trains; a write guard requires every backbone parameter
to be frozen before training starts, so the backbone serialization is
byte-identical before and after. Features come from the pooled backbone
output with batch-statistics BN; candidate evaluation can instead use
recalibrated per-path statistics (tracked mode + overlay).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .data.augment import AugmentPolicy, apply_policy, epoch_order
from .errors import ConfigError, ContractError, GuardViolation
from .layers import BnMode, Linear
from .optim import SgdState, sgd_step, step_decay_lr, zero_grads
from .seeding import step_stream, stream
from .space import ArchEncoding, sample_uniform
from .supernet import PathContext, Supernet

LINEAR_POLICY_OPS = ("random_resize_crop", "horizontal_flip")


@dataclass
class LinearEvalConfig:
    epochs: int = 30
    lr: float = 3.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5


def make_head(feat_dim: int, num_classes: int, seed: int) -> Linear:
    return Linear("linear_head", stream(seed, "linear/head_init"), feat_dim, num_classes)


def _require_frozen(supernet: Supernet) -> None:
    for name, t in supernet.params().items():
        if not t.frozen or t.requires_grad:
            raise GuardViolation(
                f"linear evaluation requires a frozen backbone; parameter '{name}' is writable"
            )


def _features(supernet: Supernet, images: np.ndarray, ctx: PathContext) -> np.ndarray:
    with tape.no_grad():
        return supernet.forward_path(images, ctx, head="features").data


def train_linear(
    supernet: Supernet,
    head: Linear,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: LinearEvalConfig,
    seed: int,
    log_fn=None,
) -> Linear:
    """Train the head with SGD and step decay (x0.1 at 60% and 80% of epochs).

    Per step one path is sampled uniformly; features use batch-stats BN.
    Augmentation is crop+flip only.
    """
    _require_frozen(supernet)
    if len(images) == 0:
        raise ConfigError("train_linear: empty training set")
    policy = AugmentPolicy(
        ops=LINEAR_POLICY_OPS, crop_scale=cfg.crop_scale, flip_prob=cfg.flip_prob, seed=seed
    )
    params = head.params()
    named = {f"linear_head.{k}": t for k, t in params.items()}
    sgd = SgdState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(images)
    bs = min(cfg.batch_size, n)
    global_step = 0
    for epoch in range(cfg.epochs):
        lr = step_decay_lr(epoch, cfg.epochs, cfg.lr)
        sgd.lr = lr
        order = epoch_order(n, seed, epoch)
        correct = 0
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            rng = step_stream(seed, "linear/aug", global_step)
            x = np.stack([apply_policy(images[i], policy, rng) for i in idx])
            y = labels[idx]
            arch = sample_uniform(supernet.space, step_stream(seed, "linear/path", global_step))
            feats = _features(supernet, x, PathContext(arch, BnMode.BATCH_STATS, True))
            logits = tape.linear(tape.constant(feats), head.weight, head.bias)
            loss = tape.softmax_cross_entropy(logits, y)
            zero_grads(named)
            loss.backward()
            sgd_step(named, sgd)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            global_step += 1
        if log_fn is not None:
            seen = (n // bs) * bs
            log_fn({"epoch": epoch, "lr": lr, "train_acc": correct / max(seen, 1)})
    return head


def eval_linear(
    supernet: Supernet,
    head: Linear,
    arch: ArchEncoding,
    images: np.ndarray,
    labels: np.ndarray,
    calibrated: bool = False,
    bn_overlay: dict | None = None,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy of the head over features from the given path."""
    if len(images) == 0:
        raise ConfigError("eval_linear: empty evaluation set")
    if calibrated:
        if bn_overlay is None:
            raise ContractError(
                "eval_linear: calibrated=True needs recalibrated statistics; "
                "run recalibrate_bn for this arch first"
            )
        ctx = PathContext(arch, BnMode.TRACKED, False)
    else:
        ctx = PathContext(arch, BnMode.BATCH_STATS, False)
        bn_overlay = None
    correct = 0
    with tape.no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            y = labels[start : start + batch_size]
            feats = supernet.forward_path(x, ctx, head="features", bn_overlay=bn_overlay)
            logits = tape.linear(feats, head.weight, head.bias)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(images)

from .datasets import (
    Dataset,
    load_cifar10,
    make_splits,
    subset,
    synthetic_blobs,
    write_cifar10,
)
from .augment import (
    ALL_OPS,
    AugmentPolicy,
    apply_policy,
    color_drop,
    color_jitter,
    epoch_order,
    four_views,
    gaussian_blur,
    horizontal_flip,
    normalize,
    random_resize_crop,
)

__all__ = [
    "ALL_OPS",
    "Dataset",
    "load_cifar10",
    "write_cifar10",
    "synthetic_blobs",
    "make_splits",
    "subset",
    "AugmentPolicy",
    "four_views",
    "apply_policy",
    "random_resize_crop",
    "horizontal_flip",
    "color_jitter",
    "color_drop",
    "gaussian_blur",
    "normalize",
    "epoch_order",
]

"""Flat key=value run configuration with dotted namespaces.

Every hyperparameter in the artifact lives here with a typed default and a
provenance tag: `recipe` marks standard values of the training method this
artifact implements, `desk` marks values scaled down for CPU-sized runs, and
`choice` marks local implementation decisions. Serialization is diff-friendly
text, one `key = value` per line; parsing rejects unknown or duplicate keys
and round-trips losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

TAGS = ("recipe", "desk", "choice")


@dataclass(frozen=True)
class ConfigField:
    default: object
    tag: str
    help: str

    @property
    def type(self) -> type:
        return type(self.default)


def _f(default, tag, help_text) -> ConfigField:
    if tag not in TAGS:
        raise ConfigError(f"bad provenance tag '{tag}'")
    return ConfigField(default, tag, help_text)


SCHEMA: dict[str, ConfigField] = {
    # run identity
    "run.seed": _f(7, "choice", "master seed; per-component streams derive from it"),
    "run.space": _f("chain_toy", "desk", "search space: chain_toy | chain | cell"),
    "run.dataset": _f("synthetic", "desk", "dataset: synthetic | cifar10"),
    "run.data_path": _f("", "choice", "directory of CIFAR-10 binary batches (cifar10 only)"),
    # synthetic data
    "data.num_classes": _f(8, "desk", "synthetic class count"),
    "data.per_class": _f(80, "desk", "synthetic samples per class"),
    "data.image_hw": _f(16, "desk", "synthetic image side length"),
    "data.channels": _f(2, "desk", "synthetic channel count"),
    "data.blob_sigma": _f(2.5, "desk", "synthetic blob width in pixels"),
    "data.noise": _f(0.10, "desk", "synthetic pixel noise std"),
    "data.per_class_val": _f(16, "desk", "validation images per class"),
    "data.per_class_calib": _f(8, "desk", "BN-calibration images per class"),
    # augmentation
    "augment.crop_scale_min": _f(0.5, "desk", "random crop minimum area fraction"),
    "augment.crop_scale_max": _f(1.0, "recipe", "random crop maximum area fraction"),
    "augment.flip_prob": _f(0.5, "recipe", "horizontal flip probability"),
    "augment.jitter_prob": _f(0.8, "choice", "color jitter probability"),
    "augment.jitter_strength": _f(0.25, "choice", "color jitter strength"),
    "augment.drop_prob": _f(0.2, "choice", "color drop probability"),
    "augment.blur_prob": _f(0.5, "choice", "gaussian blur probability"),
    "augment.blur_sigma_min": _f(0.1, "choice", "blur sigma lower bound"),
    "augment.blur_sigma_max": _f(1.0, "choice", "blur sigma upper bound"),
    # supernet
    "supernet.width": _f(16, "desk", "backbone channel width"),
    "supernet.embed_dim": _f(64, "desk", "projector output dimension D"),
    "supernet.cells_per_stage": _f(1, "desk", "cell spaces: cells per stage"),
    "supernet.bn_eps": _f(1e-5, "choice", "batchnorm epsilon"),
    "supernet.bn_momentum": _f(0.1, "choice", "batchnorm running-stat momentum"),
    # supernet training
    "train.steps": _f(400, "desk", "supernet training steps"),
    "train.batch_size": _f(32, "desk", "supernet training batch size"),
    "train.lr": _f(0.03, "recipe", "base learning rate"),
    "train.momentum": _f(0.9, "recipe", "SGD momentum"),
    "train.weight_decay": _f(1e-4, "recipe", "weight decay"),
    "train.ema": _f(0.95, "desk", "teacher EMA weight lambda"),
    "train.temperature": _f(0.2, "choice", "contrastive temperature tau (1.0 selectable)"),
    "train.queue_capacity": _f(4096, "desk", "negative container capacity"),
    "train.cosine": _f(True, "recipe", "cosine learning-rate decay"),
    "train.collapse_factor": _f(0.1, "choice", "abort threshold factor: factor/sqrt(D)"),
    "train.abort_on_collapse": _f(True, "choice", "raise on collapse instead of continuing"),
    "train.checkpoint_every": _f(100, "choice", "steps between checkpoints"),
    "train.drift_every": _f(50, "choice", "steps between drift weight snapshots"),
    "train.drift_layer": _f("site0.opt0.conv0.weight", "choice", "layer tracked for drift"),
    # ablation flags
    "ablation.cross_path": _f(True, "recipe", "pair student path i with teacher path j"),
    "ablation.mean_teacher": _f(True, "recipe", "use the EMA teacher for targets"),
    "ablation.downsample_sharing": _f(True, "recipe", "share reduction ops across options"),
    "ablation.nontrivial": _f(True, "recipe", "use container negatives in the loss"),
    "ablation.supervised_spos_mode": _f(False, "recipe", "uniform-path supervised baseline"),
    # linear evaluation
    "linear.epochs": _f(30, "desk", "linear head training epochs"),
    "linear.lr": _f(3.0, "desk", "head learning rate (30 at full feature scale)"),
    "linear.momentum": _f(0.9, "recipe", "head SGD momentum"),
    "linear.weight_decay": _f(0.0, "recipe", "head weight decay"),
    "linear.batch_size": _f(64, "desk", "head training batch size"),
    # search
    "search.budget": _f(9, "desk", "max distinct candidate evaluations"),
    "search.population": _f(16, "recipe", "evolutionary population size"),
    "search.tournament": _f(4, "recipe", "tournament size"),
    "search.mutation_k": _f(1, "recipe", "sites mutated per child"),
    "search.top_k": _f(5, "recipe", "searched archs entering the ranking set"),
    "search.random_k": _f(8, "recipe", "random archs entering the ranking set"),
    "search.eval_batch": _f(256, "choice", "batch size for candidate evaluation"),
    "search.calib_batches": _f(2, "choice", "calibration batches per candidate"),
    # oracle training
    "oracle.epochs": _f(30, "choice", "from-scratch training epochs"),
    "oracle.lr": _f(0.05, "choice", "from-scratch base learning rate"),
    "oracle.batch_size": _f(128, "choice", "from-scratch batch size"),
    "oracle.momentum": _f(0.9, "choice", "from-scratch SGD momentum"),
    "oracle.weight_decay": _f(1e-4, "choice", "from-scratch weight decay"),
    # diagnostics
    "diag.probe_batch": _f(256, "choice", "probe batch size for similarity matrices"),
    "diag.bins": _f(64, "choice", "histogram bins for drift series"),
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, text: str, typ: type):
    text = text.strip()
    try:
        if typ is bool:
            if text not in ("true", "false"):
                raise ValueError(f"expected true/false, got '{text}'")
            return text == "true"
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': {exc}") from exc


class RunConfig:
    """Typed view over the full key space; unknown keys are rejected."""

    def __init__(self, overrides: dict | None = None):
        self._values = {k: f.default for k, f in SCHEMA.items()}
        for k, v in (overrides or {}).items():
            self.set(k, v)

    def get(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        return self._values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key '{key}'")
        typ = SCHEMA[key].type
        if isinstance(value, str) and typ is not str:
            value = _parse_value(key, value, typ)
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, typ) or (typ is not bool and isinstance(value, bool)):
            raise ConfigError(f"config key '{key}' wants {typ.__name__}, got {value!r}")
        self._values[key] = value

    def values(self) -> dict:
        return dict(self._values)

    def copy(self) -> "RunConfig":
        return RunConfig(self._values)

    def diff(self, other: "RunConfig") -> list[str]:
        return [k for k in SCHEMA if self._values[k] != other._values[k]]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def to_text(self) -> str:
        lines = [f"{k} = {_render(self._values[k])}" for k in SCHEMA]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        seen = set()
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {ln}: expected 'key = value', got '{raw}'")
            key, _, val = line.partition("=")
            key = key.strip()
            if key in seen:
                raise ConfigError(f"config line {ln}: duplicate key '{key}'")
            seen.add(key)
            cfg.set(key, val.strip())
        return cfg

    def section(self, prefix: str) -> dict:
        """All keys under `prefix.` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self._values.items() if k.startswith(p)}

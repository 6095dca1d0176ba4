"""Network layer primitives built on the tape ops.

Layer kinds: conv, bn, linear, relu, avgpool, maxpool, global_pool,
identity, zero. Each layer owns its parameter tensors and (for bn) running
buffers; composites assign hierarchical names so parameters can be collected
into a ParameterStore.

Batchnorm runs in one of two modes (`BnMode`): `TRACKED` uses running
buffers at eval time and updates them during training; `BATCH_STATS` always
normalizes with the current batch moments and never touches the buffers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .errors import ConfigError, NumericError
from .tape import Tensor


class BnMode(enum.Enum):
    TRACKED = "tracked"
    BATCH_STATS = "batch_stats"


@dataclass
class ForwardCtx:
    """Per-forward settings threaded through every layer."""

    bn_mode: BnMode = BnMode.BATCH_STATS
    train_flag: bool = False
    bn_overlay: dict | None = None  # layer name -> (mean, var), eval-time override
    bn_capture: dict | None = None  # layer name -> [(mean, var), ...] per forward
    check_finite: bool = True


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Layer:
    kind = "abstract"

    def __init__(self, name: str):
        self.name = name

    def params(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        raise NotImplementedError


class Conv(Layer):
    kind = "conv"

    def __init__(
        self,
        name: str,
        rng: np.random.Generator,
        cin: int,
        cout: int,
        k: int,
        stride: int = 1,
        pad: int | None = None,
        groups: int = 1,
        bias: bool = False,
    ):
        super().__init__(name)
        if cin % groups or cout % groups:
            raise ConfigError(f"layer '{name}': groups={groups} must divide {cin} and {cout}")
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.groups = stride, groups
        self.pad = k // 2 if pad is None else pad
        fan_in = (cin // groups) * k * k
        self.weight = tape.parameter(uniform_init(rng, (cout, cin // groups, k, k), fan_in))
        self.bias = tape.parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, ctx):
        if x.data.shape[1] != self.cin:
            raise ConfigError(
                f"layer '{self.name}' expects {self.cin} input channels, got {x.data.shape[1]}"
            )
        return tape.conv2d(
            x, self.weight, self.bias, stride=self.stride, pad=self.pad, groups=self.groups
        )


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, name: str, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = tape.parameter(np.ones(channels, dtype=np.float32))
        self.beta = tape.parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.num_batches = np.zeros(1, dtype=np.float32)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "num_batches": self.num_batches,
        }

    def forward(self, x, ctx):
        if x.data.shape[1] != self.channels:
            raise ConfigError(
                f"layer '{self.name}' expects {self.channels} channels, got {x.data.shape[1]}"
            )
        if ctx.bn_mode is BnMode.BATCH_STATS or (ctx.bn_mode is BnMode.TRACKED and ctx.train_flag):
            y, mean, var = tape.batchnorm_train(x, self.gamma, self.beta, self.eps)
            if ctx.bn_capture is not None:
                ctx.bn_capture.setdefault(self.name, []).append((mean, var))
            if ctx.bn_mode is BnMode.TRACKED:
                m = self.momentum
                self.running_mean *= 1.0 - m
                self.running_mean += m * mean
                self.running_var *= 1.0 - m
                self.running_var += m * var
                self.num_batches += 1.0
            return y
        overlay = (ctx.bn_overlay or {}).get(self.name)
        mean, var = overlay if overlay is not None else (self.running_mean, self.running_var)
        return tape.batchnorm_eval(x, self.gamma, self.beta, mean, var, self.eps)


class Linear(Layer):
    kind = "linear"

    def __init__(self, name: str, rng: np.random.Generator, fin: int, fout: int, bias: bool = True):
        super().__init__(name)
        self.fin, self.fout = fin, fout
        self.weight = tape.parameter(uniform_init(rng, (fout, fin), fin))
        # fan-in bias init keeps embeddings nonzero even when a whole hidden
        # layer lands in the ReLU dead zone for some sample
        self.bias = tape.parameter(uniform_init(rng, (fout,), fin)) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, ctx):
        if x.data.shape[1] != self.fin:
            raise ConfigError(
                f"layer '{self.name}' expects {self.fin} features, got {x.data.shape[1]}"
            )
        return tape.linear(x, self.weight, self.bias)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        return tape.relu(x)


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, name: str, k: int, stride: int = 1, pad: int | None = None):
        super().__init__(name)
        self.k, self.stride = k, stride
        self.pad = k // 2 if pad is None else pad

    def forward(self, x, ctx):
        return tape.avgpool2d(x, self.k, self.stride, self.pad)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name: str, k: int, stride: int, pad: int = 0):
        super().__init__(name)
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x, ctx):
        return tape.maxpool2d(x, self.k, self.stride, self.pad)


class GlobalPool(Layer):
    kind = "global_pool"

    def forward(self, x, ctx):
        return tape.global_avg_pool(x)


class Identity(Layer):
    kind = "identity"

    def forward(self, x, ctx):
        return x


class Zero(Layer):
    """Maps any input to zeros of the target shape; blocks gradient flow."""

    kind = "zero"

    def __init__(self, name: str, stride: int = 1, cout: int | None = None):
        super().__init__(name)
        self.stride = stride
        self.cout = cout

    def forward(self, x, ctx):
        n, c, h, w = x.data.shape
        c = self.cout if self.cout is not None else c
        shape = (n, c, h // self.stride, w // self.stride)
        return tape.constant(np.zeros(shape, dtype=x.data.dtype))


def forward_layers(layers: list[Layer], x: Tensor, ctx: ForwardCtx) -> Tensor:
    """Run a layer sequence with the shape/finiteness error contract."""
    for idx, layer in enumerate(layers):
        x = layer.forward(x, ctx)
        if ctx.check_finite and not np.all(np.isfinite(x.data)):
            raise NumericError(
                f"non-finite activation after layer '{layer.name}' (index {idx})"
            )
    return x


def collect_params(named_layers: list[tuple[str, Layer]]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for prefix, layer in named_layers:
        for local, t in layer.params().items():
            out[f"{prefix}.{local}"] = t
    return out

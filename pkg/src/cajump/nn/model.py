"""Declarative layer stacks and the sequential model that runs them."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Union

import numpy as np

from cajump.nn import functional as F


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: str = "same"


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = 0.9
    epsilon: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Softmax:
    pass


LayerSpec = Union[Conv2D, BatchNorm, ReLU, MaxPool, GlobalAvgPool, Flatten, Dense, Softmax]

# keyword in the text format -> (class, {text key: field name})
_KINDS = {
    "conv": (Conv2D, {"out": "out_channels", "k": "kernel", "stride": "stride", "pad": "padding"}),
    "batchnorm": (BatchNorm, {"momentum": "momentum", "eps": "epsilon"}),
    "relu": (ReLU, {}),
    "maxpool": (MaxPool, {"size": "window", "stride": "stride"}),
    "gap": (GlobalAvgPool, {}),
    "flatten": (Flatten, {}),
    "dense": (Dense, {"units": "units"}),
    "softmax": (Softmax, {}),
}
_NAMES = {cls: (kw, keys) for kw, (cls, keys) in _KINDS.items()}

DEFAULT_ARCHITECTURE = """\
# 3x3 conv blocks, global average pooling, two dense layers
conv out=16 k=3 pad=same
batchnorm
relu
maxpool size=2
conv out=32 k=3 pad=same
batchnorm
relu
maxpool size=2
conv out=64 k=3 pad=same
batchnorm
relu
gap
dense units=64
relu
dense units=10
softmax
"""


class ArchitectureError(ValueError):
    pass


def parse_architecture(text: str) -> list[LayerSpec]:
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *opts = line.split()
        if kind not in _KINDS:
            raise ArchitectureError(f"line {lineno}: unknown layer {kind!r}")
        cls, keys = _KINDS[kind]
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for opt in opts:
            key, sep, value = opt.partition("=")
            if not sep or key not in keys:
                raise ArchitectureError(f"line {lineno}: unknown option {opt!r} for {kind}")
            name = keys[key]
            typ = types[name]
            kwargs[name] = value if typ == "str" else (float(value) if typ == "float" else int(value))
        try:
            layers.append(cls(**kwargs))
        except TypeError as exc:
            raise ArchitectureError(f"line {lineno}: {exc}") from None
    return layers


def format_architecture(layers: list[LayerSpec]) -> str:
    lines = []
    for spec in layers:
        kind, keys = _NAMES[type(spec)]
        opts = [f"{k}={getattr(spec, name)}" for k, name in keys.items()]
        lines.append(" ".join([kind, *opts]))
    return "\n".join(lines) + "\n"


@dataclass
class ModelConfig:
    layers: list
    num_classes: int = 10

    def validate(self):
        tail = self.layers[-2:]
        if len(tail) != 2 or not isinstance(tail[0], Dense) or not isinstance(tail[1], Softmax):
            raise ArchitectureError("architecture must end with dense then softmax")
        if tail[0].units != self.num_classes:
            raise ArchitectureError(f"final dense layer has {tail[0].units} units, expected {self.num_classes}")
        if any(isinstance(s, Softmax) for s in self.layers[:-1]):
            raise ArchitectureError("softmax is only allowed as the last layer")

    @classmethod
    def from_text(cls, text: str, num_classes: int = 10) -> "ModelConfig":
        cfg = cls(parse_architecture(text), num_classes)
        cfg.validate()
        return cfg

    @classmethod
    def default(cls) -> "ModelConfig":
        return cls.from_text(DEFAULT_ARCHITECTURE)

    def to_text(self) -> str:
        return format_architecture(self.layers)


class Model:
    """Sequential network over NCHW input with parameters in a flat dict.

    Parameter names look like ``"4.weight"``; batch-norm running statistics
    live in ``buffers`` under ``"<i>.running_mean"`` / ``"<i>.running_var"``.
    """

    def __init__(self, config: ModelConfig, in_channels: int = 1, seed: int = 0):
        config.validate()
        self.config = config
        self.in_channels = in_channels
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._caches: list = []
        self.seed = seed
        self.dtype = np.dtype(np.float64)
        rng = np.random.Generator(np.random.PCG64(seed))
        channels = in_channels
        spatial = True
        for i, spec in enumerate(config.layers):
            if isinstance(spec, Conv2D):
                if not spatial:
                    raise ArchitectureError(f"layer {i}: convolution after flattening")
                fan_in = channels * spec.kernel * spec.kernel
                limit = math.sqrt(6.0 / fan_in)
                self.params[f"{i}.weight"] = rng.uniform(
                    -limit, limit, (spec.out_channels, channels, spec.kernel, spec.kernel)
                )
                self.params[f"{i}.bias"] = np.zeros(spec.out_channels)
                channels = spec.out_channels
            elif isinstance(spec, BatchNorm):
                self.params[f"{i}.gamma"] = np.ones(channels)
                self.params[f"{i}.beta"] = np.zeros(channels)
                self.buffers[f"{i}.running_mean"] = np.zeros(channels)
                self.buffers[f"{i}.running_var"] = np.ones(channels)
            elif isinstance(spec, MaxPool):
                if not spatial:
                    raise ArchitectureError(f"layer {i}: pooling after flattening")
            elif isinstance(spec, (GlobalAvgPool, Flatten)):
                spatial = False
            elif isinstance(spec, Dense):
                if spatial:
                    raise ArchitectureError(f"layer {i}: dense layer needs gap or flatten before it")
                if channels is not None:
                    limit = math.sqrt(6.0 / channels)
                    self.params[f"{i}.weight"] = rng.uniform(-limit, limit, (channels, spec.units))
                    self.params[f"{i}.bias"] = np.zeros(spec.units)
                channels = spec.units
            if isinstance(spec, Flatten):
                # flattened width is only known once an input arrives
                channels = None

    def _lazy_dense(self, i, features):
        # first dense after flatten: allocate once the flattened size is known
        spec = self.config.layers[i]
        if f"{i}.weight" not in self.params:
            rng = np.random.Generator(np.random.PCG64([self.seed, i]))
            limit = math.sqrt(6.0 / features)
            self.params[f"{i}.weight"] = rng.uniform(-limit, limit, (features, spec.units)).astype(self.dtype)
            self.params[f"{i}.bias"] = np.zeros(spec.units, dtype=self.dtype)

    def astype(self, dtype) -> "Model":
        """Cast parameters and buffers in place; inputs are cast on the way in."""
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise ValueError(f"precision must be float32 or float64, got {dtype}")
        self.dtype = dtype
        for store in (self.params, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        return self

    def forward(self, x: np.ndarray, train: bool = False, update_stats: bool = True, upto=None) -> np.ndarray:
        """Return class probabilities. ``train`` selects batch statistics and keeps caches.

        ``upto=i`` stops early and returns the input of layer ``i``.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise F.DimensionError(f"expected input (batch, {self.in_channels}, H, W), got {x.shape}")
        caches = []
        self._logits = None
        for i, spec in enumerate(self.config.layers):
            if i == upto:
                return x
            p = self.params
            if isinstance(spec, Conv2D):
                x, c = F.conv2d_forward(x, p[f"{i}.weight"], p[f"{i}.bias"], spec.stride, spec.padding)
            elif isinstance(spec, BatchNorm):
                rm, rv = self.buffers[f"{i}.running_mean"], self.buffers[f"{i}.running_var"]
                if train and not update_stats:
                    rm, rv = None, None
                x, c = F.batchnorm_forward(
                    x, p[f"{i}.gamma"], p[f"{i}.beta"], "train" if train else "infer", rm, rv, spec.momentum,
                    spec.epsilon,
                )
            elif isinstance(spec, ReLU):
                x, c = F.relu_forward(x)
            elif isinstance(spec, MaxPool):
                x, c = F.maxpool_forward(x, spec.window, spec.stride)
            elif isinstance(spec, GlobalAvgPool):
                x, c = F.global_avg_pool_forward(x)
            elif isinstance(spec, Flatten):
                c = x.shape
                x = x.reshape(x.shape[0], -1)
            elif isinstance(spec, Dense):
                self._lazy_dense(i, x.shape[1])
                x, c = F.dense_forward(x, p[f"{i}.weight"], p[f"{i}.bias"])
            else:  # Softmax
                self._logits = x
                x, c = F.softmax_forward(x), None
            caches.append(c)
        self._caches = caches if train else []
        return x

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Back-propagate a gradient taken with respect to the logits (pre-softmax)."""
        if not self._caches:
            raise RuntimeError("backward() needs a preceding forward(train=True)")
        grads = {}
        d = np.asarray(dlogits, dtype=self.dtype)
        layers = self.config.layers
        for i in range(len(layers) - 2, -1, -1):
            spec, c = layers[i], self._caches[i]
            if isinstance(spec, Conv2D):
                d, grads[f"{i}.weight"], grads[f"{i}.bias"] = F.conv2d_backward(d, c, input_grad=i > 0)
                if d is None:
                    break
            elif isinstance(spec, BatchNorm):
                d, grads[f"{i}.gamma"], grads[f"{i}.beta"] = F.batchnorm_backward(d, c)
            elif isinstance(spec, ReLU):
                d = F.relu_backward(d, c)
            elif isinstance(spec, MaxPool):
                d = F.maxpool_backward(d, c)
            elif isinstance(spec, GlobalAvgPool):
                d = F.global_avg_pool_backward(d, c)
            elif isinstance(spec, Flatten):
                d = d.reshape(c)
            elif isinstance(spec, Dense):
                d, grads[f"{i}.weight"], grads[f"{i}.bias"] = F.dense_backward(d, c, self.params[f"{i}.weight"])
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [self.forward(x[a : a + batch_size]) for a in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            target = self.params if name in self.params else self.buffers if name in self.buffers else None
            if target is None:
                if name.split(".", 1)[1] in ("weight", "bias"):
                    # lazily sized dense weights
                    self.params[name] = np.array(value, dtype=np.float64)
                    continue
                raise KeyError(f"checkpoint parameter {name!r} not in architecture")
            if target[name].shape != value.shape:
                raise F.DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {target[name].shape}")
            target[name] = np.array(value, dtype=np.float64)

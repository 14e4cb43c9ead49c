"""Sequential CNN specifications, weight containers and the forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class ConvLayerSpec:
    out_channels: int
    in_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1
    has_bias: bool = False
    grouped: bool = False

    def __post_init__(self):
        if self.out_channels < 1 or self.in_channels < 1 or min(self.kernel) < 1:
            raise DimensionError(f"invalid conv layer {self}")
        if self.stride < 1 or self.padding < 0:
            raise DimensionError(f"invalid conv stride/padding {self}")


@dataclass(frozen=True)
class BatchNormSpec:
    channels: int


@dataclass(frozen=True)
class ReLUSpec:
    pass


@dataclass(frozen=True)
class MaxPoolSpec:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class LinearSpec:
    """Fully connected layer; flattens a (C, H, W) input channel-major."""

    in_features: int
    out_features: int
    has_bias: bool = True


LayerSpec = Union[ConvLayerSpec, BatchNormSpec, ReLUSpec, MaxPoolSpec, LinearSpec]

_PREFIX = {ConvLayerSpec: "conv", BatchNormSpec: "bn", ReLUSpec: "relu", MaxPoolSpec: "pool", LinearSpec: "linear"}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", tuple(_infer_shapes(self)))

    def name(self, index: int) -> str:
        return f"{_PREFIX[type(self.layers[index])]}{index}"

    def conv_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, ConvLayerSpec)]

    def grouped_layers(self) -> list[str]:
        return [self.name(i) for i in self.conv_indices() if self.layers[i].grouped]

    def index_of(self, name: str) -> int:
        for i in range(len(self.layers)):
            if self.name(i) == name:
                return i
        raise KeyError(name)

    def input_shape_of(self, index: int) -> tuple[int, ...]:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def consumer(self, index: int) -> int | None:
        """Index of the next conv/linear layer reading the channels produced at ``index``."""
        for j in range(index + 1, len(self.layers)):
            if isinstance(self.layers[j], (ConvLayerSpec, LinearSpec)):
                return j
        return None

    def producer(self, index: int) -> int | None:
        for j in range(index - 1, -1, -1):
            if isinstance(self.layers[j], (ConvLayerSpec, LinearSpec)):
                return j
        return None

    def channel_block(self, linear_index: int) -> int:
        """Number of flattened features per input channel of a linear layer."""
        shp = self.input_shape_of(linear_index)
        return int(np.prod(shp[1:])) if len(shp) == 3 else 1

    def replace(self, index: int, layer: LayerSpec) -> "NetworkSpec":
        layers = list(self.layers)
        layers[index] = layer
        return NetworkSpec(tuple(layers), self.num_classes, self.input_shape)


def _infer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    shape: tuple[int, ...] = tuple(spec.input_shape)
    out = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayerSpec):
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise DimensionError(f"layer {i}: conv expects {layer.in_channels} channels, gets {shape}")
            kh, kw = layer.kernel
            h = (shape[1] + 2 * layer.padding - kh) // layer.stride + 1
            w = (shape[2] + 2 * layer.padding - kw) // layer.stride + 1
            if h < 1 or w < 1:
                raise DimensionError(f"layer {i}: conv output would be empty for input {shape}")
            shape = (layer.out_channels, h, w)
        elif isinstance(layer, BatchNormSpec):
            if len(shape) != 3 or shape[0] != layer.channels:
                raise DimensionError(f"layer {i}: batchnorm over {layer.channels} channels, gets {shape}")
        elif isinstance(layer, MaxPoolSpec):
            if len(shape) != 3 or shape[1] < layer.kernel or shape[2] < layer.kernel:
                raise DimensionError(f"layer {i}: maxpool {layer.kernel} on {shape}")
            shape = (shape[0], (shape[1] - layer.kernel) // layer.stride + 1, (shape[2] - layer.kernel) // layer.stride + 1)
        elif isinstance(layer, LinearSpec):
            if int(np.prod(shape)) != layer.in_features:
                raise DimensionError(f"layer {i}: linear expects {layer.in_features} features, gets {shape}")
            shape = (layer.out_features,)
        out.append(shape)
    if shape != (spec.num_classes,):
        raise DimensionError(f"network output {shape} does not match {spec.num_classes} classes")
    return out


def conv_block(in_channels: int, out_channels: int, grouped: bool = False, batchnorm: bool = True) -> list[LayerSpec]:
    """conv -> [bn] -> relu; the conv carries a bias only when no batchnorm follows."""
    layers: list[LayerSpec] = [ConvLayerSpec(out_channels, in_channels, has_bias=not batchnorm, grouped=grouped)]
    if batchnorm:
        layers.append(BatchNormSpec(out_channels))
    layers.append(ReLUSpec())
    return layers


def build_toy_net(channels: int = 8, num_classes: int = 10, input_shape=(1, 28, 28)) -> NetworkSpec:
    """Two 3x3 conv layers (8 filters each) with batchnorm + ReLU + 2x2 max-pool,
    then a linear classifier. The second conv is the grouped one."""
    c, h, w = input_shape
    layers = (
        conv_block(c, channels)
        + [MaxPoolSpec()]
        + conv_block(channels, channels, grouped=True)
        + [MaxPoolSpec()]
        + [LinearSpec(channels * (h // 4) * (w // 4), num_classes)]
    )
    return NetworkSpec(tuple(layers), num_classes, tuple(input_shape))


class Model:
    """A NetworkSpec plus its trainable parameters and batchnorm buffers."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.buffers = buffers

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator) -> "Model":
        """Kaiming-normal (fan-in) init for conv/linear weights, zero biases."""
        params: dict[str, Tensor] = {}
        buffers: dict[str, np.ndarray] = {}
        for i, layer in enumerate(spec.layers):
            name = spec.name(i)
            if isinstance(layer, ConvLayerSpec):
                kh, kw = layer.kernel
                fan_in = layer.in_channels * kh * kw
                w = rng.standard_normal((layer.out_channels, layer.in_channels, kh, kw)) * np.sqrt(2.0 / fan_in)
                params[f"{name}.weight"] = Tensor(w, requires_grad=True)
                if layer.has_bias:
                    params[f"{name}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True)
            elif isinstance(layer, LinearSpec):
                w = rng.standard_normal((layer.out_features, layer.in_features)) * np.sqrt(2.0 / layer.in_features)
                params[f"{name}.weight"] = Tensor(w, requires_grad=True)
                if layer.has_bias:
                    params[f"{name}.bias"] = Tensor(np.zeros(layer.out_features), requires_grad=True)
            elif isinstance(layer, BatchNormSpec):
                params[f"{name}.gamma"] = Tensor(np.ones(layer.channels), requires_grad=True)
                params[f"{name}.beta"] = Tensor(np.zeros(layer.channels), requires_grad=True)
                buffers[f"{name}.running_mean"] = np.zeros(layer.channels)
                buffers[f"{name}.running_var"] = np.ones(layer.channels)
        return cls(spec, params, buffers)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.spec, params, {k: v.copy() for k, v in self.buffers.items()})

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            v.data = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=np.float64)

    def forward(
        self,
        x,
        mode: str = "eval",
        params: dict[str, Tensor] | None = None,
        update_stats: bool = True,
        start: int = 0,
        stop: int | None = None,
    ) -> Tensor:
        """Run layers ``start:stop``. ``params`` overrides entries of ``self.params``
        (used to evaluate one-step adapted weights)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        spec = self.spec
        x = T.wrap(x)
        expected = spec.input_shape_of(start)
        if tuple(x.shape[1:]) != tuple(expected):
            raise DimensionError(f"input batch {x.shape} does not match expected (B, {expected})")
        p = self.params if params is None else {**self.params, **params}
        train = mode == "train"
        stop = len(spec.layers) if stop is None else stop
        for i in range(start, stop):
            layer = spec.layers[i]
            name = spec.name(i)
            if isinstance(layer, ConvLayerSpec):
                x = T.conv2d(x, p[f"{name}.weight"], p.get(f"{name}.bias"), layer.stride, layer.padding)
            elif isinstance(layer, BatchNormSpec):
                x = T.batchnorm2d(
                    x,
                    p[f"{name}.gamma"],
                    p[f"{name}.beta"],
                    self.buffers[f"{name}.running_mean"],
                    self.buffers[f"{name}.running_var"],
                    training=train,
                    update_stats=update_stats,
                )
            elif isinstance(layer, ReLUSpec):
                x = T.relu(x)
            elif isinstance(layer, MaxPoolSpec):
                x = T.maxpool2d(x, layer.kernel, layer.stride)
            elif isinstance(layer, LinearSpec):
                if x.ndim != 2:
                    x = T.reshape(x, (x.shape[0], -1))
                x = T.linear(x, p[f"{name}.weight"], p.get(f"{name}.bias"))
        return x

    def conv_weights(self, names=None) -> dict[str, Tensor]:
        names = self.spec.grouped_layers() if names is None else names
        return {n: self.params[f"{n}.weight"] for n in names}


class Counts(NamedTuple):
    params: int
    flops: int
    macs: int


def count_dense_params_flops(spec: NetworkSpec) -> Counts:
    """Conv/linear parameter and FLOP counts (2 FLOPs per multiply-accumulate).

    Batchnorm, ReLU and pooling are not counted.
    """
    params = macs = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvLayerSpec):
            kh, kw = layer.kernel
            _, ho, wo = spec.shapes[i]
            weights = layer.out_channels * layer.in_channels * kh * kw
            params += weights + (layer.out_channels if layer.has_bias else 0)
            macs += weights * ho * wo
        elif isinstance(layer, LinearSpec):
            params += layer.in_features * layer.out_features + (layer.out_features if layer.has_bias else 0)
            macs += layer.in_features * layer.out_features
    return Counts(params, 2 * macs, macs)


def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 1000) -> float:
    """Top-1 accuracy in percent (eval mode). Works for any object with ``forward``."""
    correct = 0
    with T.no_grad():
        for s in range(0, len(labels), batch_size):
            logits = model.forward(images[s : s + batch_size], mode="eval").data
            correct += int((logits.argmax(axis=1) == labels[s : s + batch_size]).sum())
    return 100.0 * correct / max(len(labels), 1)

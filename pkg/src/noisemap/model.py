"""
Encoder-decoder segmentation network with skip connections.

Each level holds a double-conv block (conv -> batchnorm -> relu, twice).
The encoder halves resolution with 2x2 max pooling, the decoder doubles it
with nearest-neighbour upsampling followed by a conv, then concatenates the
matching encoder features. Channel widths double per level starting at
``base_channels``; a 1x1 conv produces ``classes`` logits.

Parameter count, with c_l = base * 2**l, k the kernel size and
conv(i, o, k) = o*i*k*k + o, bn(o) = 2*o (0 without batchnorm),
double(i, o) = conv(i, o, k) + conv(o, o, k) + 2*bn(o):

    sum_{l<depth} double(in_l, c_l)                     encoder (in_0 = bands, in_l = c_{l-1})
  + double(c_{depth-1} or bands when depth = 0, c_depth)   bottleneck
  + sum_{l<depth} conv(c_{l+1}, c_l, k) + double(2*c_l, c_l)  decoder
  + conv(c_0, classes, 1)                               head
"""

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor, load_parameters, save_parameters


@dataclass(frozen=True)
class UNetConfig:
    """Network topology and initialisation seed."""

    in_bands: int = 10
    classes: int = 2
    depth: int = 2
    base_channels: int = 8
    batchnorm: bool = True
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.in_bands < 1:
            raise ConfigError(f"in_bands must be >= 1, got {self.in_bands}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd number, got {self.kernel_size}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def check_tile(self, tile: int) -> None:
        if tile % self.divisor != 0:
            raise ConfigError(f"Tile size {tile} is not divisible by 2**depth = {self.divisor}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "UNetConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"Unknown model config keys: {', '.join(unknown)}")
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _conv_count(i: int, o: int, k: int) -> int:
    return o * i * k * k + o


def parameter_count(config: UNetConfig) -> int:
    """Closed-form number of trainable values (see module docstring)."""
    k = config.kernel_size
    bn = 2 if config.batchnorm else 0
    width = [config.base_channels * 2 ** level for level in range(config.depth + 1)]

    def double(i, o):
        return _conv_count(i, o, k) + _conv_count(o, o, k) + 2 * bn * o

    total = 0
    in_channels = config.in_bands
    for level in range(config.depth):
        total += double(in_channels, width[level])
        in_channels = width[level]
    total += double(in_channels, width[config.depth])
    for level in range(config.depth):
        total += _conv_count(width[level + 1], width[level], k) + double(2 * width[level], width[level])
    total += _conv_count(width[0], config.classes, 1)
    return total


class UNet:
    """Parameters, batchnorm buffers and the forward pass."""

    def __init__(self, config: UNetConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._rng = np.random.default_rng(config.seed)

        k = config.kernel_size
        width = [config.base_channels * 2 ** level for level in range(config.depth + 1)]
        in_channels = config.in_bands
        for level in range(config.depth):
            self._add_double(f"enc{level}", in_channels, width[level])
            in_channels = width[level]
        self._add_double("bottleneck", in_channels, width[config.depth])
        for level in reversed(range(config.depth)):
            self._add_conv(f"dec{level}.up", width[level + 1], width[level], k)
            self._add_double(f"dec{level}", 2 * width[level], width[level])
        self._add_conv("head", width[0], config.classes, 1)
        del self._rng

        logging.info("Built U-Net depth=%s base=%s (%s parameters)",
                     config.depth, config.base_channels, self.num_parameters())

    def _add_param(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Parameter(name, values.astype(self.dtype))

    def _add_conv(self, name: str, i: int, o: int, k: int) -> None:
        fan_in = i * k * k
        # Kaiming-uniform for relu: bound = sqrt(2) * sqrt(3 / fan_in)
        bound = np.sqrt(6.0 / fan_in)
        self._add_param(f"{name}.weight", self._rng.uniform(-bound, bound, size=(o, i, k, k)))
        bias_bound = 1.0 / np.sqrt(fan_in)
        self._add_param(f"{name}.bias", self._rng.uniform(-bias_bound, bias_bound, size=(o,)))

    def _add_bn(self, name: str, channels: int) -> None:
        self._add_param(f"{name}.gamma", np.ones(channels))
        self._add_param(f"{name}.beta", np.zeros(channels))
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(channels, dtype=self.dtype)

    def _add_double(self, name: str, i: int, o: int) -> None:
        k = self.config.kernel_size
        self._add_conv(f"{name}.conv1", i, o, k)
        if self.config.batchnorm:
            self._add_bn(f"{name}.bn1", o)
        self._add_conv(f"{name}.conv2", o, o, k)
        if self.config.batchnorm:
            self._add_bn(f"{name}.bn2", o)

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    def _p(self, name: str) -> Tensor:
        return self.params[name].tensor

    def _conv(self, x: Tensor, name: str) -> Tensor:
        return T.conv2d(x, self._p(f"{name}.weight"), self._p(f"{name}.bias"))

    def _bn(self, x: Tensor, name: str, training: bool) -> Tensor:
        return T.batchnorm2d(
            x,
            self._p(f"{name}.gamma"),
            self._p(f"{name}.beta"),
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training=training,
        )

    def _double(self, x: Tensor, name: str, training: bool) -> Tensor:
        for step in (1, 2):
            x = self._conv(x, f"{name}.conv{step}")
            if self.config.batchnorm:
                x = self._bn(x, f"{name}.bn{step}", training)
            x = T.relu(x)
        return x

    def forward(self, batch: Union[Tensor, np.ndarray], mode: str = "eval") -> Tensor:
        """Logits of shape (batch, classes, H, W)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if len(x.shape) != 4 or x.shape[1] != self.config.in_bands:
            raise ShapeError(f"Expected (batch, {self.config.in_bands}, H, W) input, got {x.shape}")
        height, width = x.shape[2:]
        if height % self.config.divisor or width % self.config.divisor:
            raise ShapeError(f"Input {height}x{width} is not divisible by 2**depth = {self.config.divisor}")

        training = mode == "train"
        skips = []
        for level in range(self.config.depth):
            x = self._double(x, f"enc{level}", training)
            skips.append(x)
            x = T.maxpool2d(x)
        x = self._double(x, "bottleneck", training)
        for level in reversed(range(self.config.depth)):
            x = self._conv(T.upsample_nearest(x), f"dec{level}.up")
            x = T.concat([skips[level], x], axis=1)
            x = self._double(x, f"dec{level}", training)
        return self._conv(x, "head")

    __call__ = forward

    def swap_classes(self) -> None:
        """Reverse the order of the output classes in the head."""
        for name in ("head.weight", "head.bias"):
            param = self.params[name]
            param.tensor.data = np.ascontiguousarray(param.data[::-1])
            param.velocity = np.ascontiguousarray(param.velocity[::-1])

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, param in self.params.items():
            state[name] = param.data
        for name, buffer in self.buffers.items():
            state[name] = buffer
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = list(self.params) + list(self.buffers)
        missing = [name for name in expected if name not in state]
        unexpected = [name for name in state if name not in self.params and name not in self.buffers]
        if missing or unexpected:
            raise ConfigError(f"Checkpoint does not match model: missing {missing}, unexpected {unexpected}")
        for name, param in self.params.items():
            values = np.asarray(state[name], dtype=self.dtype)
            if values.shape != param.shape:
                raise ConfigError(f"Checkpoint {name} has shape {values.shape}, model expects {param.shape}")
            param.tensor.data = values.copy()
            param.velocity = np.zeros_like(param.tensor.data)
        for name in self.buffers:
            self.buffers[name] = np.asarray(state[name], dtype=self.dtype).copy()


def build(config: UNetConfig, dtype=np.float32) -> UNet:
    return UNet(config, dtype=dtype)


def forward(model: UNet, batch: Union[Tensor, np.ndarray], mode: str = "eval") -> Tensor:
    return model.forward(batch, mode=mode)


def config_path_for(path: Union[str, Path]) -> Path:
    return Path(f"{path}.config.json")


def save_model(model: UNet, path: Union[str, Path]) -> None:
    """NNW1 checkpoint plus a JSON config sidecar."""
    path = Path(path)
    save_parameters(model.state_dict(), path)
    config_path_for(path).write_text(json.dumps(model.config.as_dict(), indent=2, sort_keys=True), encoding='utf-8')
    logging.info("Saved model checkpoint to %s", path)


def load_model(path: Union[str, Path], config: Optional[UNetConfig] = None) -> UNet:
    path = Path(path)
    if config is None:
        with open(config_path_for(path), 'r', encoding='utf-8') as f:
            config = UNetConfig.from_dict(json.load(f))
    model = UNet(config)
    model.load_state_dict(load_parameters(path))
    return model

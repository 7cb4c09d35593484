"""
Layers over the numerics core. Parameters live in flat dicts keyed
"<prefix>.<layer>.w" / "<prefix>.<layer>.b" so optimizers and checkpoints see
plain named arrays.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Union

import numpy as np

from app.core import numerics as nx

Params = Mapping[str, Union[np.ndarray, nx.Tensor]]

_ACTIVATIONS = {"tanh": nx.tanh, "relu": nx.relu}


def _param(params: Params, name: str) -> nx.Tensor:
    return nx.as_tensor(params[name])


@dataclass(frozen=True)
class MLP:
    """Fully connected stack; hidden layers use `activation`, the output is linear"""
    prefix: str
    sizes: Sequence[int]
    activation: Literal["tanh", "relu"] = "tanh"

    @property
    def depth(self) -> int:
        return len(self.sizes) - 1

    def init(self, rng: np.random.Generator, output_scale: float = 1.0) -> Dict[str, np.ndarray]:
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = math.sqrt(1.0 / fan_in)
            if i == self.depth - 1:
                scale *= output_scale
            params[f"{self.prefix}.{i}.w"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
            params[f"{self.prefix}.{i}.b"] = np.zeros(fan_out)
        return params

    def __call__(self, params: Params, x: Union[np.ndarray, nx.Tensor]) -> nx.Tensor:
        act = _ACTIVATIONS[self.activation]
        h = nx.as_tensor(x)
        for i in range(self.depth):
            h = nx.matmul(h, _param(params, f"{self.prefix}.{i}.w")) + _param(params, f"{self.prefix}.{i}.b")
            if i < self.depth - 1:
                h = act(h)
        return h


@dataclass(frozen=True)
class Conv1d:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def init(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        scale = math.sqrt(1.0 / (self.in_channels * self.kernel))
        return {
            f"{self.name}.w": rng.normal(0.0, scale, size=(self.out_channels, self.in_channels, self.kernel)),
            f"{self.name}.b": np.zeros(self.out_channels),
        }

    def __call__(self, params: Params, x) -> nx.Tensor:
        return nx.conv1d(x, _param(params, f"{self.name}.w"), _param(params, f"{self.name}.b"), self.stride)


@dataclass(frozen=True)
class ConvTranspose1d:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def init(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        scale = math.sqrt(1.0 / (self.in_channels * self.kernel / self.stride))
        return {
            f"{self.name}.w": rng.normal(0.0, scale, size=(self.in_channels, self.out_channels, self.kernel)),
            f"{self.name}.b": np.zeros(self.out_channels),
        }

    def __call__(self, params: Params, x, out_length: Optional[int] = None) -> nx.Tensor:
        return nx.conv_transpose1d(x, _param(params, f"{self.name}.w"), _param(params, f"{self.name}.b"),
                                   self.stride, out_length)


def parameter_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def length_schedule(length: int, stride: int, layers: int) -> List[int]:
    """Temporal lengths through a stack of ceil-halving convolutions, input first"""
    lengths = [length]
    for _ in range(layers):
        lengths.append(-(-lengths[-1] // stride))
    return lengths

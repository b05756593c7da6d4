"""Parameter containers on top of :mod:`scadc.tensorcore`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ArgumentError
from .tensorcore import BatchNormState, ConvSpec, Tensor, batchnorm2d, conv2d, relu, uniform_init


class Module:
    """Collects parameters and batch-norm buffers from attributes, in definition order."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, BatchNormState]:
        out = {}
        for name, value in self._children():
            if isinstance(value, BatchNormState):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters(prefix).items()}
        for name, bn in self.named_buffers(prefix).items():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state, prefix: str = "") -> None:
        expected = self.state_dict(prefix)
        missing = sorted(set(expected) - set(state))
        if missing:
            raise ArgumentError(f"checkpoint lacks entries: {missing[:5]}")
        for name, value in expected.items():
            if np.shape(state[name]) != value.shape:
                raise ArgumentError(f"{name}: shape {np.shape(state[name])} != expected {value.shape}")
        for name, p in self.named_parameters(prefix).items():
            p.data = np.array(state[name], dtype=np.float64)
        for name, bn in self.named_buffers(prefix).items():
            bn.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.named_parameters().values())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, rng=None, stride=1):
        self.spec = ConvSpec(in_channels, out_channels, kernel, stride)
        fan_in = in_channels * kernel * kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in), True)
        self.bias = Tensor(np.zeros(out_channels), True)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d(Module):
    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels), True)
        self.beta = Tensor(np.zeros(channels), True)
        self.bn = BatchNormState.create(channels)

    def __call__(self, x, train=True):
        return batchnorm2d(x, self.gamma, self.beta, self.bn, train)


class ConvBNReLU(Module):
    def __init__(self, in_channels, out_channels, kernel=3, rng=None):
        self.conv = Conv2d(in_channels, out_channels, kernel, rng)
        self.norm = BatchNorm2d(out_channels)

    def __call__(self, x, train=True):
        return relu(self.norm(self.conv(x), train))

"""Minimal parameter containers and layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=None) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype or get_default_dtype())


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype or get_default_dtype())


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype or get_default_dtype())


class Module:
    """Base class: attributes that are parameters, buffers or sub-modules are enumerable by name."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, list):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        """Every sub-module (including ``self`` under ``prefix``), depth first."""
        yield prefix.rstrip("."), self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(prefix + key + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            if isinstance(value, ops.RunningStats):
                yield prefix + key + ".mean", value.mean
                yield prefix + key + ".var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + key + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, dilation: int = 1):
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k)
        self.bias = zeros(cout)
        self.stride, self.padding, self.dilation = stride, padding, dilation

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = ones(channels)
        self.beta = zeros(channels)
        self.running = ops.RunningStats(channels, dtype=get_default_dtype())
        self.eps, self.momentum = eps, momentum

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running, self.training, self.eps, self.momentum)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ones(dim)
        self.beta = zeros(dim)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    """Affine layer with weight stored as ``[Din, Dout]``."""

    def __init__(self, rng, din: int, dout: int):
        self.weight = he_normal(rng, (din, dout), din)
        self.bias = zeros(dout)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

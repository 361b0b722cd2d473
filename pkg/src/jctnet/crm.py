"""Counting regression: dilated conv head producing a 1-channel map and its count."""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, mean, sum_


class CrmModel(Module):
    """Conv(D, D/2, 3, dil 2, pad 2)-BN-ReLU, Conv(D/2, D/4, 3, dil 2, pad 2)-BN-ReLU, Conv(D/4, 1, 1)."""

    def __init__(self, in_channels: int, rng: np.random.Generator):
        c1, c2 = max(1, in_channels // 2), max(1, in_channels // 4)
        self.conv1 = Conv2d(rng, in_channels, c1, 3, padding=2, dilation=2)
        self.bn1 = BatchNorm2d(c1)
        self.conv2 = Conv2d(rng, c1, c2, 3, padding=2, dilation=2)
        self.bn2 = BatchNorm2d(c2)
        self.conv3 = Conv2d(rng, c2, 1, 1)

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    def __call__(self, t_f: Tensor) -> Tensor:
        if t_f.shape[1] != self.in_channels:
            raise ValueError(f"CRM expects {self.in_channels} channels, got {t_f.shape[1]}")
        x = ops.relu(self.bn1(self.conv1(t_f)))
        x = ops.relu(self.bn2(self.conv2(x)))
        return self.conv3(x)


def build_crm(in_channels: int, seed: int | np.random.Generator = 0) -> CrmModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return CrmModel(in_channels, rng)


def count_from_map(density: Tensor, reduction: str = "sum") -> Tensor:
    """Per-image scalar count from a ``[B, 1, H, W]`` map (spatial sum by default)."""
    flat = density.reshape(density.shape[0], -1)
    if reduction == "sum":
        return sum_(flat, axis=1)
    if reduction == "mean":
        return mean(flat, axis=1)
    raise ValueError(f"unknown count reduction {reduction!r}")

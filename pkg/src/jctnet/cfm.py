"""CNN feature extraction: the first ten conv layers of VGG16-BN, stride 8."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

VGG16_FIRST_TEN = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512)
# 1-based conv indices followed by a 2x2 max pool.
POOL_AFTER = (2, 4, 7)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class CfmConfig:
    channel_schedule: tuple[int, ...] = VGG16_FIRST_TEN
    pool_positions: tuple[int, ...] = POOL_AFTER
    channel_scale: Fraction = Fraction(1)

    def __post_init__(self):
        self.channel_schedule = tuple(int(c) for c in self.channel_schedule)
        self.pool_positions = tuple(int(p) for p in self.pool_positions)
        self.channel_scale = Fraction(self.channel_scale)
        if len(self.channel_schedule) != 10:
            raise ValueError(f"CFM needs exactly 10 conv widths, got {len(self.channel_schedule)}")
        if len(self.pool_positions) != 3 or not all(1 <= p <= 10 for p in self.pool_positions):
            raise ValueError(f"CFM needs 3 pool positions within 1..10, got {self.pool_positions}")
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        """Channel schedule after scaling, rounded up."""
        return tuple(max(1, math.ceil(c * self.channel_scale)) for c in self.channel_schedule)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


class CfmModel(Module):
    def __init__(self, cfg: CfmConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.convs: list[Conv2d] = []
        self.bns: list[BatchNorm2d] = []
        cin = 3
        for cout in cfg.widths:
            self.convs.append(Conv2d(rng, cin, cout, 3, padding=1))
            self.bns.append(BatchNorm2d(cout))
            cin = cout

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def __call__(self, image: Tensor, taps: list | None = None) -> Tensor:
        """Map ``[B, 3, H, W]`` (H, W divisible by 8) to ``[B, C_last, H/8, W/8]``.

        If ``taps`` is a list, every post-ReLU activation is appended to it.
        """
        h, w = image.shape[2:]
        if h % 8 or w % 8:
            raise ValueError(f"CFM input extents {h}x{w} must be divisible by 8")
        x = image
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            x = ops.relu(bn(conv(x)))
            if taps is not None:
                taps.append(x)
            if i in self.cfg.pool_positions:
                x = ops.maxpool2d(x, 2)
        return x


def build_cfm(cfg: CfmConfig, seed: int | np.random.Generator = 0) -> CfmModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return CfmModel(cfg, rng)


def standardize(pixels: np.ndarray) -> np.ndarray:
    """Bytes in HxWx3 (or BxHxWx3) to float ``[.., 3, H, W]`` standardized per channel."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    x = (x - PIXEL_MEAN) / PIXEL_STD
    return np.moveaxis(x, -1, -3)


def conv_weight_count(cfg: CfmConfig) -> int:
    """Number of conv weight elements (no biases): sum of 9*Cin*Cout."""
    total, cin = 0, 3
    for cout in cfg.widths:
        total += 9 * cin * cout
        cin = cout
    return total

"""Transformer feature extraction: channel reduction, modified Swin blocks, skip connection.

Token tensors are ``[B, N, C]`` in row-major grid order, with the grid extents
carried alongside. No patch merging: the token grid keeps the stride-8
resolution throughout.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor, get_default_dtype, matmul, reshape, roll, transpose


@dataclass
class TfmConfig:
    embed_dim: int = 256
    window_size: int = 4
    depths: tuple[int, ...] = (8, 8, 8, 8)
    num_heads: tuple[int, ...] = (8, 8, 8, 8)
    mlp_ratio: float = 2.0
    patch_size: int = 1
    interaction_conv_kernel: int = 1
    use_relative_position_bias: bool = True
    shift_size: int | None = None

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have the same length")
        if any(d <= 0 or d % 2 for d in self.depths):
            raise ValueError(f"every depth must be a positive even number, got {self.depths}")
        if any(self.token_dim % h for h in self.num_heads):
            raise ValueError(f"token dim {self.token_dim} not divisible by heads {self.num_heads}")
        if self.interaction_conv_kernel not in (1, 3):
            raise ValueError("interaction_conv_kernel must be 1 or 3")
        if self.shift_size is None:
            self.shift_size = self.window_size // 2
        if not 0 <= self.shift_size < self.window_size:
            raise ValueError(f"shift {self.shift_size} must lie in [0, window_size)")
        if self.hidden_dim < 1:
            raise ValueError("mlp_ratio too small")

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.embed_dim

    @property
    def hidden_dim(self) -> int:
        return int(round(self.token_dim * self.mlp_ratio))


# -- layout helpers --------------------------------------------------------------
def patch_partition(x: Tensor, k: int) -> tuple[Tensor, tuple[int, int]]:
    """``[B, D, H, W]`` to tokens ``[B, HW/k^2, k*k*D]`` and the token grid extents."""
    b, d, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"patch size {k} does not divide {h}x{w}")
    gh, gw = h // k, w // k
    t = reshape(x, (b, d, gh, k, gw, k))
    t = transpose(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (b, gh * gw, k * k * d)), (gh, gw)


def patch_unpartition(tokens: Tensor, grid: tuple[int, int], k: int) -> Tensor:
    b, n, c = tokens.shape
    gh, gw = grid
    d = c // (k * k)
    t = reshape(tokens, (b, gh, gw, k, k, d))
    t = transpose(t, (0, 5, 1, 3, 2, 4))
    return reshape(t, (b, d, gh * k, gw * k))


def window_partition(x: Tensor, w: int) -> Tensor:
    """``[B, H, W, C]`` to ``[B * nW, w*w, C]``; windows and tokens in row-major order."""
    b, h, wd, c = x.shape
    if h % w or wd % w:
        raise ValueError(f"window size {w} does not divide {h}x{wd}")
    t = reshape(x, (b, h // w, w, wd // w, w, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b * (h // w) * (wd // w), w * w, c))


def window_reverse(windows: Tensor, w: int, h: int, wd: int) -> Tensor:
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // w) * (wd // w))
    t = reshape(windows, (b, h // w, wd // w, w, w, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, h, wd, c))


def _window_partition_np(a: np.ndarray, w: int) -> np.ndarray:
    h, wd = a.shape
    return a.reshape(h // w, w, wd // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)


@functools.lru_cache(maxsize=64)
def build_swmsa_mask(h: int, wd: int, w: int, shift: int) -> np.ndarray:
    """Additive attention mask ``[nW, w*w, w*w]`` for shifted windows.

    Region ids come from a 3x3 slicing of the cyclically shifted grid; token
    pairs from different regions get ``MASK_VALUE``.
    """
    if shift >= w:
        raise ValueError(f"shift {shift} must be smaller than window {w}")
    if h % w or wd % w:
        raise ValueError(f"window size {w} does not divide {h}x{wd}")
    region = np.zeros((h, wd), dtype=np.int64)
    if shift > 0:
        slices = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
        rid = 0
        for hs in slices:
            for ws in slices:
                region[hs, ws] = rid
                rid += 1
    win = _window_partition_np(region, w)
    mask = np.where(win[:, :, None] == win[:, None, :], 0.0, ops.MASK_VALUE)
    mask.setflags(write=False)
    return mask


@functools.lru_cache(maxsize=16)
def relative_position_index(w: int) -> np.ndarray:
    """``[w*w, w*w]`` index into a ``(2w-1)^2`` bias table, row-major offsets."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    idx = rel[0] * (2 * w - 1) + rel[1]
    idx.setflags(write=False)
    return idx


# -- attention ------------------------------------------------------------------
class WindowAttention(Module):
    def __init__(self, rng, dim: int, num_heads: int, window_size: int, use_bias_table: bool = True):
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.window_size = window_size
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        if use_bias_table:
            table = rng.normal(0.0, 0.02, ((2 * window_size - 1) ** 2, num_heads))
            self.bias_table = Tensor(table, requires_grad=True, dtype=get_default_dtype())
        else:
            self.bias_table = None

    def __call__(self, windows: Tensor, mask: np.ndarray | None = None, probs: list | None = None) -> Tensor:
        return window_attention(windows, self, mask, self.num_heads, probs)


def window_attention(
    windows: Tensor,
    params: WindowAttention,
    mask: np.ndarray | None,
    num_heads: int,
    probs: list | None = None,
) -> Tensor:
    """Multi-head self-attention inside each window.

    ``windows`` is ``[B * nW, n, C]``; ``mask`` (additive, ``[nW, n, n]``) is
    broadcast over batch and heads. Attention probabilities are appended to
    ``probs`` when a list is given.
    """
    bn, n, c = windows.shape
    if c % num_heads:
        raise ValueError(f"token dim {c} not divisible by {num_heads} heads")
    dh = c // num_heads
    qkv = params.qkv(windows)
    qkv = transpose(reshape(qkv, (bn, n, 3, num_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = matmul(q * (dh**-0.5), transpose(k, (0, 1, 3, 2)))
    if params.bias_table is not None:
        idx = relative_position_index(int(round(n**0.5)))
        bias = params.bias_table[idx.reshape(-1)]
        attn = attn + transpose(reshape(bias, (n, n, num_heads)), (2, 0, 1))
    if mask is not None:
        nw = mask.shape[0]
        m = Tensor(mask[None, :, None], dtype=attn.dtype)
        attn = reshape(reshape(attn, (bn // nw, nw, num_heads, n, n)) + m, (bn, num_heads, n, n))
    attn = ops.softmax(attn, axis=-1)
    if probs is not None:
        probs.append(attn.data)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    return params.proj(reshape(out, (bn, n, c)))


class SwinLayer(Module):
    """LN -> (shifted) window attention -> residual -> LN -> MLP -> residual."""

    def __init__(self, rng, cfg: TfmConfig, num_heads: int, shifted: bool):
        dim = cfg.token_dim
        self.window_size = cfg.window_size
        self.shift = cfg.shift_size if shifted else 0
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, num_heads, cfg.window_size, cfg.use_relative_position_bias)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, cfg.hidden_dim)
        self.fc2 = Linear(rng, cfg.hidden_dim, dim)

    def __call__(self, z: Tensor, grid: tuple[int, int], probs: list | None = None) -> Tensor:
        b, n, c = z.shape
        h, w = grid
        ws, s = self.window_size, self.shift
        if h % ws or w % ws:
            raise ValueError(f"token grid {h}x{w} not divisible by window {ws}")
        y = reshape(self.norm1(z), (b, h, w, c))
        if s:
            y = roll(y, -s, -s)
        mask = build_swmsa_mask(h, w, ws, s) if s else None
        y = window_reverse(self.attn(window_partition(y, ws), mask, probs), ws, h, w)
        if s:
            y = roll(y, s, s)
        z = z + reshape(y, (b, n, c))
        return z + self.fc2(ops.gelu(self.fc1(self.norm2(z))))


def stl_forward(z: Tensor, grid: tuple[int, int], layer: SwinLayer) -> Tensor:
    return layer(z, grid)


def tokens_to_map(z: Tensor, grid: tuple[int, int]) -> Tensor:
    b, n, c = z.shape
    return transpose(reshape(z, (b, grid[0], grid[1], c)), (0, 3, 1, 2))


def map_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


class Mstb(Module):
    """Modified Swin block: (W-MSA layer, SW-MSA layer, interaction conv) repeated depth/2 times."""

    def __init__(self, rng, cfg: TfmConfig, depth: int, num_heads: int):
        if depth % 2:
            raise ValueError("MSTB depth must be even")
        dim, k = cfg.token_dim, cfg.interaction_conv_kernel
        self.layers: list[SwinLayer] = []
        self.convs: list[Conv2d] = []
        for _ in range(depth // 2):
            self.layers.append(SwinLayer(rng, cfg, num_heads, shifted=False))
            self.layers.append(SwinLayer(rng, cfg, num_heads, shifted=True))
            self.convs.append(Conv2d(rng, dim, dim, k, padding=k // 2))

    def __call__(self, z: Tensor, grid: tuple[int, int], probs: list | None = None) -> Tensor:
        for i, conv in enumerate(self.convs):
            z = self.layers[2 * i](z, grid, probs)
            z = self.layers[2 * i + 1](z, grid, probs)
            z = map_to_tokens(conv(tokens_to_map(z, grid)))
        return z


def mstb_forward(z: Tensor, grid: tuple[int, int], block: Mstb) -> Tensor:
    return block(z, grid)


class TfmModel(Module):
    def __init__(self, cfg: TfmConfig, in_channels: int, rng: np.random.Generator):
        self.cfg = cfg
        self.reduce = Conv2d(rng, in_channels, cfg.embed_dim, 3, padding=1)
        self.blocks = [Mstb(rng, cfg, d, h) for d, h in zip(cfg.depths, cfg.num_heads)]

    def channel_reduce(self, c_f: Tensor) -> Tensor:
        if c_f.shape[1] != self.reduce.in_channels:
            raise ValueError(f"TFM expects {self.reduce.in_channels} input channels, got {c_f.shape[1]}")
        return self.reduce(c_f)

    def __call__(self, c_f: Tensor, probs: list | None = None) -> Tensor:
        """``T_F = F_TFM(Conv(C_f)) + Conv(C_f)``, resolution preserved."""
        x0 = self.channel_reduce(c_f)
        gh, gw = x0.shape[2] // self.cfg.patch_size, x0.shape[3] // self.cfg.patch_size
        if gh % self.cfg.window_size or gw % self.cfg.window_size:
            raise ValueError(f"token grid {gh}x{gw} not divisible by window {self.cfg.window_size}")
        z, grid = patch_partition(x0, self.cfg.patch_size)
        for block in self.blocks:
            z = block(z, grid, probs)
        return patch_unpartition(z, grid, self.cfg.patch_size) + x0


def build_tfm(cfg: TfmConfig, in_channels: int, seed: int | np.random.Generator = 0) -> TfmModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return TfmModel(cfg, in_channels, rng)


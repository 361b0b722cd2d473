"""Stride padding and feature-map export."""

from __future__ import annotations

import math

import numpy as np

from .data import write_pnm
from .model import JCTNetModel
from .tensor import no_grad

STAGES = ("cfm", "tfm", "crm")


def pad_to_stride(image: np.ndarray, multiple: int = 32) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-replicate on the bottom/right up to the next multiple; return the original extents."""
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (image.ndim - 2)
    return np.pad(image, pad, mode="edge"), (h, w)


def split_padded_count(density: np.ndarray, original: tuple[int, int], stride: int = 8) -> tuple[float, float]:
    """Split a ``[H', W']`` map's total into (unpadded-region sum, padded-region sum)."""
    rows = math.ceil(original[0] / stride)
    cols = math.ceil(original[1] / stride)
    inside = float(density[:rows, :cols].sum())
    return inside, float(density.sum()) - inside


def normalize_to_bytes(fmap: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes uniform 128."""
    lo, hi = float(fmap.min()), float(fmap.max())
    if hi - lo <= 0.0:
        return np.full(fmap.shape, 128, dtype=np.uint8)
    return np.rint((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)


def extract_feature_map(model: JCTNetModel, pixels: np.ndarray, stage: str, channel: int | None = None) -> np.ndarray:
    """One channel of the chosen stage's output for a single HxWx3 image (padded to 32)."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    padded, _ = pad_to_stride(pixels)
    model.eval()
    with no_grad():
        out = model.stages(model.images_to_tensor(padded[None]))[stage].data[0]
    n_channels = out.shape[0]
    if channel is None:
        if n_channels != 1:
            raise ValueError(f"stage {stage} has {n_channels} channels; pick one")
        channel = 0
    if not 0 <= channel < n_channels:
        raise ValueError(f"channel {channel} out of range for stage {stage} ({n_channels} channels)")
    return out[channel]


def dump_feature_maps(model: JCTNetModel, pixels: np.ndarray, stage: str, path, channel: int | None = None) -> np.ndarray:
    fmap = extract_feature_map(model, pixels, stage, channel)
    write_pnm(path, normalize_to_bytes(fmap))
    return fmap

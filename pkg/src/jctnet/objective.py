"""Count loss, AdamW, and counting metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor


def smooth_l1_loss(estimated: Tensor, ground_truth) -> Tensor:
    """Mean Smooth L1 between estimated and ground-truth counts (both ``[N]``)."""
    if not isinstance(ground_truth, Tensor):
        ground_truth = Tensor(ground_truth, dtype=estimated.dtype)
    return ops.smooth_l1(estimated, ground_truth)


@dataclass
class OptimState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """AdamW with decoupled weight decay.

    Per step: ``theta -= lr * wd * theta`` then
    ``theta -= lr * m_hat / (sqrt(v_hat) + eps)`` with bias-corrected moments.
    """

    def __init__(self, params: dict[str, Tensor] | Iterable[tuple[str, Tensor]], **hyper):
        self.params = dict(params)
        self.state = OptimState(**hyper)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        s = self.state
        s.t += 1
        bc1 = 1.0 - s.beta1**s.t
        bc2 = 1.0 - s.beta2**s.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
            m, v = s.m[name], s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            if s.weight_decay:
                p.data -= s.lr * s.weight_decay * p.data
            p.data -= s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)


def adamw_step(params: dict[str, Tensor], optimizer: AdamW) -> OptimState:
    optimizer.step()
    return optimizer.state


@dataclass
class MetricsReport:
    mae: float
    mse: float
    nae: float | None
    n_images: int
    n_skipped_nae: int

    def as_row(self) -> dict:
        return {
            "mae": self.mae,
            "mse": self.mse,
            "nae": "undefined" if self.nae is None else self.nae,
            "n_images": self.n_images,
            "n_skipped_nae": self.n_skipped_nae,
        }


def compute_metrics(estimated: Sequence[float], ground_truth: Sequence[float]) -> MetricsReport:
    """MAE, root-mean-square error (reported as MSE), and NAE.

    NAE averages ``|d| / gt`` over samples with ``gt > 0`` only; the number of
    skipped samples is reported and NAE is ``None`` when every sample is skipped.
    """
    est = np.asarray(estimated, dtype=np.float64).reshape(-1)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1)
    if est.shape != gt.shape:
        raise ValueError("estimated and ground-truth counts differ in length")
    if est.size == 0:
        raise ValueError("metrics need at least one sample")
    err = np.abs(est - gt)
    keep = gt > 0
    nae = float(np.mean(err[keep] / gt[keep])) if keep.any() else None
    return MetricsReport(
        mae=float(err.mean()),
        mse=math.sqrt(float(np.mean(err * err))),
        nae=nae,
        n_images=int(est.size),
        n_skipped_nae=int((~keep).sum()),
    )

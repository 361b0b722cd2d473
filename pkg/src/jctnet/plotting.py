"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def plot_convergence(rows: list[dict], path, best_epoch: int | None = None) -> None:
    """Loss, MAE and MSE against epoch, one panel each."""
    epochs = np.array([r["epoch"] for r in rows])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.8))
        for ax, key, label in zip(axes, ("loss", "mae", "mse"), ("Smooth L1 loss", "MAE", "MSE")):
            ax.plot(epochs, [r[key] for r in rows], lw=1.2)
            if best_epoch is not None and key != "loss":
                ax.axvline(best_epoch, color="0.6", ls="--", lw=0.8)
            ax.set_xlabel("epoch")
            ax.set_title(label)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_predictions(estimated, ground_truth, path) -> None:
    est, gt = np.asarray(estimated), np.asarray(ground_truth)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.scatter(gt, est, s=10, alpha=0.7)
        lo = float(min(est.min(), gt.min()))
        hi = float(max(est.max(), gt.max()))
        ax.plot([lo, hi], [lo, hi], color="0.5", lw=0.8, ls="--")
        ax.set_xlabel("ground truth count")
        ax.set_ylabel("estimated count")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_feature_map(fmap: np.ndarray, path, title: str = "") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        im = ax.imshow(fmap, cmap="jet", interpolation="nearest")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)

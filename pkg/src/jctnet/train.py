"""Training and evaluation loops."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .crm import count_from_map
from .data import Sample, generate_synthetic, kfold_split, load_dataset, random_crop, train_test_split
from .features import pad_to_stride, split_padded_count
from .model import JCTNetModel, build_model
from .objective import AdamW, MetricsReport, compute_metrics, smooth_l1_loss
from .tensor import NonFiniteError, concatenate, default_dtype, no_grad

log = logging.getLogger(__name__)

CONVERGENCE_FIELDS = ("epoch", "loss", "mae", "mse")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


@dataclass
class TrainState:
    epoch: int = 0
    best_epoch: int = -1
    best_mae: float = math.inf
    best_mse: float = math.inf
    log: list[dict] = field(default_factory=list)

    def record(self, epoch: int, loss: float, mae: float, mse: float) -> bool:
        """Append a log row; return True if this epoch is the new best by MAE."""
        if self.log and epoch <= self.log[-1]["epoch"]:
            raise ValueError("convergence log must be strictly increasing in epoch")
        self.log.append({"epoch": epoch, "loss": loss, "mae": mae, "mse": mse})
        self.epoch = epoch
        if mae < self.best_mae:
            self.best_epoch, self.best_mae, self.best_mse = epoch, mae, mse
            return True
        return False


@dataclass
class EvalResult:
    folds: list[MetricsReport]
    aggregate: MetricsReport
    estimated: list[float]
    ground_truth: list[float]
    names: list[str]

    @property
    def fold_mean(self) -> dict[str, float]:
        return {
            "mae": float(np.mean([f.mae for f in self.folds])),
            "mse": float(np.mean([f.mse for f in self.folds])),
        }


# -- data plumbing ----------------------------------------------------------------
def load_samples(cfg: RunConfig) -> list[Sample]:
    if cfg["data.source"] == "synth":
        return generate_synthetic(cfg.synth_spec(), cfg["data.n_images"])
    if not cfg["data.dir"]:
        raise ValueError("data.source=dir needs data.dir")
    return load_dataset(cfg["data.dir"], cfg["data.labels"] or None)


def split_samples(cfg: RunConfig, samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    train_idx, test_idx = train_test_split(len(samples), cfg["data.train_fraction"], cfg["data.split_seed"])
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


def make_batch(samples: list[Sample], cfg: RunConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Crop (or pad) a list of samples and group same-shape images into arrays.

    Samples without object positions (loaded images) are used whole unless
    area-scaled crop labels are enabled.
    """
    prepared = []
    for s in samples:
        can_crop = s.centers is not None or cfg["train.area_scaled_crops"]
        if cfg["train.crop"] and can_crop:
            c = random_crop(s, cfg["train.crop_m"], cfg["train.crop_n"], rng, cfg["train.area_scaled_crops"])
            prepared.append((c.rgb(), float(c.count)))
        else:
            prepared.append((pad_to_stride(s.rgb())[0], float(s.count)))
    groups: dict[tuple, list] = {}
    for img, count in prepared:
        groups.setdefault(img.shape, []).append((img, count))
    return [(np.stack([g[0] for g in grp]), np.array([g[1] for g in grp])) for grp in groups.values()]


def build_from_config(cfg: RunConfig) -> JCTNetModel:
    with default_dtype(cfg["train.dtype"]):
        return build_model(cfg.model_config(), cfg["model.seed"])


def train_step(model: JCTNetModel, opt: AdamW, groups) -> float:
    model.train()
    opt.zero_grad()
    counts, targets = [], []
    for pixels, target in groups:
        counts.append(model.predict_counts(model.images_to_tensor(pixels)))
        targets.append(target)
    pred = counts[0] if len(counts) == 1 else concatenate(counts, axis=0)
    loss = smooth_l1_loss(pred, np.concatenate(targets))
    loss.backward(retain_graph=False)
    opt.step()
    return loss.item()


def predict(model: JCTNetModel, samples: list[Sample], chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode counts on full images padded to multiples of 32.

    Returns ``(counts, padded_contributions)`` in sample order.
    """
    model.eval()
    counts = np.zeros(len(samples))
    padded = np.zeros(len(samples))
    by_shape: dict[tuple, list[int]] = {}
    images = []
    for i, s in enumerate(samples):
        img, orig = pad_to_stride(s.rgb())
        images.append((img, orig))
        by_shape.setdefault(img.shape, []).append(i)
    with no_grad():
        for idx in by_shape.values():
            for start in range(0, len(idx), chunk):
                part = idx[start : start + chunk]
                maps = model(model.images_to_tensor(np.stack([images[i][0] for i in part])))
                totals = count_from_map(maps, model.config.count_reduction).data
                for j, i in enumerate(part):
                    counts[i] = totals[j]
                    if model.config.count_reduction == "sum":
                        padded[i] = split_padded_count(maps.data[j, 0], images[i][1])[1]
    return counts, padded


def _write_convergence(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONVERGENCE_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in CONVERGENCE_FIELDS[1:]])


def read_convergence(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "loss": float(r["loss"]), "mae": float(r["mae"]), "mse": float(r["mse"])}
            for r in csv.DictReader(fh)
        ]


def run_training(
    cfg: RunConfig,
    out_dir=None,
    train_samples: list[Sample] | None = None,
    test_samples: list[Sample] | None = None,
    progress: Callable[[dict], None] | None = None,
    plot: bool = True,
) -> tuple[TrainState, JCTNetModel]:
    """Train with Smooth L1 + AdamW, evaluating on the held-out split after every epoch.

    Writes ``convergence.csv``, ``best.ckpt``, ``last.ckpt`` and
    ``convergence.png`` under ``out_dir`` when given.
    """
    if train_samples is None:
        train_samples, test_samples = split_samples(cfg, load_samples(cfg))
    eval_samples = test_samples or train_samples
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    model = build_from_config(cfg)
    opt = AdamW(
        model.named_parameters(),
        lr=cfg["train.lr"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        weight_decay=cfg["train.weight_decay"],
    )
    rng = np.random.default_rng([cfg["train.seed"], 1])
    gt = np.array([s.count for s in eval_samples], dtype=np.float64)
    bs = cfg["train.batch_size"]
    state = TrainState()
    stale = 0

    for epoch in range(1, cfg["train.epochs"] + 1):
        order = rng.permutation(len(train_samples))
        total, seen = 0.0, 0
        try:
            for start in range(0, len(order), bs):
                batch = [train_samples[i] for i in order[start : start + bs]]
                loss = train_step(model, opt, make_batch(batch, cfg, rng))
                total += loss * len(batch)
                seen += len(batch)
            est, _ = predict(model, eval_samples)
        except NonFiniteError as exc:
            raise TrainingDiverged(
                f"non-finite values at epoch {epoch}: {exc}; last finite epoch {state.epoch}", state.epoch
            ) from exc
        metrics = compute_metrics(est, gt)
        improved = state.record(epoch, total / seen, metrics.mae, metrics.mse)
        if out_dir is not None:
            _write_convergence(os.path.join(out_dir, "convergence.csv"), state.log)
            if improved:
                meta = {"epoch": epoch, "mae": repr(metrics.mae), "mse": repr(metrics.mse)}
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), cfg, model.state_dict(), meta)
        if progress is not None:
            progress(state.log[-1])
        stale = 0 if improved else stale + 1
        if cfg["train.patience"] and stale >= cfg["train.patience"]:
            log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
            break

    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), cfg, model.state_dict(), {"epoch": state.epoch})
        if plot and state.log:
            from .plotting import plot_convergence

            plot_convergence(state.log, os.path.join(out_dir, "convergence.png"), state.best_epoch)
    return state, model


def model_from_checkpoint(path) -> tuple[JCTNetModel, RunConfig, dict]:
    cfg, weights, meta = load_checkpoint(path)
    model = build_from_config(cfg)
    model.load_state_dict(weights)
    return model, cfg, meta


def evaluate_folds(model: JCTNetModel, samples: list[Sample], cv: str = "none", k: int = 5, seed: int = 0) -> EvalResult:
    est, _ = predict(model, samples)
    gt = np.array([s.count for s in samples], dtype=np.float64)
    if cv == "none":
        folds = [np.arange(len(samples))]
    elif cv == "kfold5":
        folds = kfold_split(len(samples), k, seed)
    else:
        raise ValueError(f"unknown cv mode {cv!r}")
    reports = [compute_metrics(est[f], gt[f]) for f in folds]
    return EvalResult(reports, compute_metrics(est, gt), list(est), list(gt), [s.name for s in samples])


def write_eval_outputs(result: EvalResult, out_dir, plot: bool = True) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "estimated", "ground_truth"])
        for name, e, g in zip(result.names, result.estimated, result.ground_truth):
            w.writerow([name, repr(float(e)), repr(float(g))])
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "mae", "mse", "nae", "n_images", "n_skipped_nae"])
        rows = [(str(i), f) for i, f in enumerate(result.folds)] if len(result.folds) > 1 else []
        rows.append(("all", result.aggregate))
        for label, rep in rows:
            r = rep.as_row()
            w.writerow([label, r["mae"], r["mse"], r["nae"], r["n_images"], r["n_skipped_nae"]])
        if len(result.folds) > 1:
            m = result.fold_mean
            w.writerow(["fold_mean", m["mae"], m["mse"], "", "", ""])
    if plot:
        from .plotting import plot_predictions

        plot_predictions(result.estimated, result.ground_truth, os.path.join(out_dir, "predictions.png"))


def run_eval(checkpoint, samples: list[Sample] | None = None, cv: str = "none", out_dir=None, split: str = "test") -> EvalResult:
    """Evaluate a checkpoint; by default on the held-out split of its own data config."""
    model, cfg, _ = model_from_checkpoint(checkpoint)
    if samples is None:
        samples = load_samples(cfg)
        if split != "all":
            train, test = split_samples(cfg, samples)
            samples = train if split == "train" else (test or train)
    result = evaluate_folds(model, samples, cv, cfg["data.folds"], cfg["data.split_seed"])
    if out_dir is not None:
        write_eval_outputs(result, out_dir)
    return result


def run_cross_validation(cfg: RunConfig, out_dir=None, samples: list[Sample] | None = None) -> EvalResult:
    """k-fold protocol: train one model per fold and test it on the held-out fold."""
    samples = samples if samples is not None else load_samples(cfg)
    folds = kfold_split(len(samples), cfg["data.folds"], cfg["data.split_seed"])
    reports, est_all, gt_all, names = [], [], [], []
    for i, test_idx in enumerate(folds):
        held = set(test_idx.tolist())
        train = [s for j, s in enumerate(samples) if j not in held]
        test = [samples[j] for j in test_idx]
        fold_dir = os.path.join(out_dir, f"fold{i}") if out_dir is not None else None
        _, model = run_training(cfg, fold_dir, train, test)
        if fold_dir is not None:
            model, _, _ = model_from_checkpoint(os.path.join(fold_dir, "best.ckpt"))
        est, _ = predict(model, test)
        gt = [s.count for s in test]
        reports.append(compute_metrics(est, gt))
        est_all += list(est)
        gt_all += gt
        names += [s.name for s in test]
    result = EvalResult(reports, compute_metrics(est_all, gt_all), est_all, gt_all, names)
    if out_dir is not None:
        write_eval_outputs(result, out_dir)
    return result

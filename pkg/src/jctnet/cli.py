"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad subcommand, flag or config key),
2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig

log = logging.getLogger("jctnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", default=".", help="output directory")


def _load_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else (base or RunConfig())
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jctnet", description="Weakly supervised CNN+Transformer crowd counter.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and log convergence")
    _add_config_args(p)
    p.add_argument("--cv", choices=("none", "kfold5"), default="none")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", help="directory of PPM/PGM images with labels.csv")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--cv", choices=("none", "kfold5"), default="none")
    p.add_argument("--out", default=".")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--scale", choices=("toy", "ops"), default="toy")
    p.add_argument("--n-params", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("count-params", help="print parameter totals per stage")
    _add_config_args(p)
    p.set_defaults(out=None)

    p = sub.add_parser("dump-features", help="export one feature map as PGM (and PNG)")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--image", help="PPM/PGM input; defaults to synthetic sample --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--stage", choices=("cfm", "tfm", "crm"), required=True)
    p.add_argument("--channel", type=int, default=None)
    p.add_argument("--out", default=".")

    p = sub.add_parser("generate-data", help="write a synthetic dataset as PPM files + labels.csv")
    _add_config_args(p)
    return parser


def cmd_train(args) -> int:
    from .train import run_cross_validation, run_training

    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    if args.cv == "kfold5":
        cfg.set("data.folds", "5")
        result = run_cross_validation(cfg, args.out)
        for i, rep in enumerate(result.folds):
            print(f"fold {i}: MAE {rep.mae:.4f}  MSE {rep.mse:.4f}")
        m = result.fold_mean
        print(f"mean:   MAE {m['mae']:.4f}  MSE {m['mse']:.4f}")
        return 0

    def progress(row):
        log.info("epoch %d loss %.5f mae %.4f mse %.4f", row["epoch"], row["loss"], row["mae"], row["mse"])

    state, _ = run_training(cfg, args.out, progress=progress)
    print(f"best epoch {state.best_epoch}: MAE {state.best_mae:.4f}  MSE {state.best_mse:.4f}")
    print(f"wrote {os.path.join(args.out, 'convergence.csv')}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .train import run_eval

    samples = load_dataset(args.data_dir) if args.data_dir else None
    result = run_eval(args.checkpoint, samples, args.cv, args.out, args.split)
    for i, rep in enumerate(result.folds if len(result.folds) > 1 else []):
        print(f"fold {i}: MAE {rep.mae:.4f}  MSE {rep.mse:.4f}")
    agg = result.aggregate
    nae = "undefined" if agg.nae is None else f"{agg.nae:.4f}"
    print(f"MAE {agg.mae:.4f}  MSE {agg.mse:.4f}  NAE {nae}  (n={agg.n_images}, nae skipped {agg.n_skipped_nae})")
    print(f"wrote {os.path.join(args.out, 'metrics.csv')}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(include_model=args.scale == "toy", n_params=args.n_params, seed=args.seed)
    failed = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.name:<34} {r.metric} {r.max_rel_err:.3e}  (tol {r.tol:g}, n={r.n_checked})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "metric", "value", "tol", "n_checked", "n_redrawn", "passed"])
            for r in reports:
                w.writerow([r.name, r.metric, repr(r.max_rel_err), r.tol, r.n_checked, r.n_redrawn, r.passed])
    return 2 if failed else 0


def cmd_count_params(args) -> int:
    from .model import build_model, closed_form_parameter_count, count_parameters

    cfg = _load_config(args)
    mcfg = cfg.model_config()
    counts = count_parameters(build_model(mcfg, cfg["model.seed"]), breakdown=True)
    formula = closed_form_parameter_count(mcfg)
    for key in ("cfm", "tfm", "crm", "total"):
        print(f"{key:<6} {counts[key]:>12,d}  ({counts[key] / 1e6:.2f}M)")
    if counts != formula:
        print(f"closed-form count disagrees: {formula}", file=sys.stderr)
        return 2
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "params.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "parameters"])
            for key in ("cfm", "tfm", "crm", "total"):
                w.writerow([key, counts[key]])
    return 0


def cmd_dump_features(args) -> int:
    from .data import read_pnm, render_sample
    from .features import dump_feature_maps
    from .plotting import plot_feature_map
    from .train import build_from_config, model_from_checkpoint

    if args.checkpoint:
        model, cfg, _ = model_from_checkpoint(args.checkpoint)
    else:
        cfg = _load_config(args)
        model = build_from_config(cfg)
    if args.image:
        pixels = read_pnm(args.image)
        stem = os.path.splitext(os.path.basename(args.image))[0]
    else:
        pixels = render_sample(cfg.synth_spec(), args.index).image
        stem = f"synth_{args.index:05d}"
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    os.makedirs(args.out, exist_ok=True)
    tag = f"{stem}_{args.stage}" + ("" if args.channel is None else f"_c{args.channel}")
    path = os.path.join(args.out, tag + ".pgm")
    fmap = dump_feature_maps(model, pixels, args.stage, path, args.channel)
    plot_feature_map(fmap, os.path.join(args.out, tag + ".png"), title=f"{args.stage} output")
    print(f"wrote {path} ({fmap.shape[0]}x{fmap.shape[1]})")
    return 0


def cmd_generate_data(args) -> int:
    from .data import generate_synthetic, save_dataset

    cfg = _load_config(args)
    samples = generate_synthetic(cfg.synth_spec(), cfg["data.n_images"])
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} images and labels.csv to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "count-params": cmd_count_params,
    "dump-features": cmd_dump_features,
    "generate-data": cmd_generate_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

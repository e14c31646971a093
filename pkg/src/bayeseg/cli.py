"""Command-line entry point.

Exit codes: 0 success, 2 flag or configuration error, 3 I/O error,
4 numeric abort, 5 data/model mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Dataset, SynthConfig, generate_synthetic
from .errors import ConfigError, ContractError, DataError, NumericsError, ShapeError
from .gradcheck import LAYER_NAMES, TOLERANCE, run_suite
from .mc import mc_inference
from .metrics import (evaluate_dataset, sample_count_study, write_class_uncertainty_csv,
                      write_metrics_csv, write_percentiles_csv, write_study_csv)
from .model import build_model
from .pnm import read_image, write_labels, write_uncertainty_map
from .rng import Rng
from .runconfig import parse_config
from .train import finalize_batchnorm, train_loop

EXIT_OK = 0
EXIT_FLAGS = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayeseg",
                                     description="Bayesian segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_parse_size, default=(64, 64), metavar="HxW")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--rare-class-ratio", type=float, default=1.0,
                   help="selection weight of the last class relative to the others")

    p = sub.add_parser("train", help="train a model end-to-end")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="per-epoch CSV log path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("wa", "mc"), required=True)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-dir", required=True)

    p = sub.add_parser("predict", help="segment one image with uncertainty")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input P6 image")
    p.add_argument("--out-seg", required=True, help="output P5 label map")
    p.add_argument("--out-unc", required=True, help="output P5 uncertainty map")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variation-ratio", default=None, metavar="PATH",
                   help="also write the variation-ratio map here")

    p = sub.add_parser("study", help="accuracy vs Monte Carlo sample count")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--t-list", default="1,2,4,6,8,10,20,30,40,50")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("gradcheck", help="finite-difference check of all layers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    return parser


def _load_compatible(ckpt_path, data_dir):
    model = load_checkpoint(ckpt_path)
    dataset = Dataset.open(data_dir)
    if dataset.num_classes != model.config.num_classes:
        raise DataError(
            f"dataset has {dataset.num_classes} classes, "
            f"checkpoint expects {model.config.num_classes}")
    return model, dataset


def _cmd_synth(args) -> int:
    height, width = args.size
    config = SynthConfig(width=width, height=height, num_classes=args.classes,
                         count=args.count, rare_class_ratio=args.rare_class_ratio,
                         seed=args.seed)
    generate_synthetic(config, args.out)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    train_cfg, model_cfg = parse_config(args.config)
    dataset = Dataset.open(args.data)
    if dataset.num_classes != model_cfg.num_classes:
        raise DataError(f"dataset has {dataset.num_classes} classes, "
                        f"config expects {model_cfg.num_classes}")
    samples = dataset.load_all()
    model = build_model(model_cfg, Rng(model_cfg.seed))
    rows = train_loop(model, samples, train_cfg, log_path=args.log)
    finalize_batchnorm(model, samples)
    save_checkpoint(model, args.out)
    last = rows[-1]
    print(f"trained {len(rows)} epochs, final loss {last[1]:.4f}, "
          f"train accuracy {last[2]:.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, dataset = _load_compatible(args.ckpt, args.data)
    result = evaluate_dataset(model, dataset, args.mode,
                              mc_samples=args.samples, seed=args.seed)
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.metrics, report_dir / "metrics.csv")
    write_percentiles_csv(result.percentiles, report_dir / "percentiles.csv")
    write_class_uncertainty_csv(result.class_uncertainty,
                                report_dir / "class_uncertainty.csv")
    print(f"global accuracy {result.metrics.global_accuracy:.4f}, "
          f"mean IoU {result.metrics.mean_iou:.4f}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    model = load_checkpoint(args.ckpt)
    image = read_image(args.image)
    result = mc_inference(model, image, args.samples, args.seed)
    write_labels(args.out_seg, result.prediction)
    write_uncertainty_map(result.overall_uncertainty, args.out_unc)
    if args.variation_ratio:
        write_uncertainty_map(result.variation_ratio, args.variation_ratio)
    return EXIT_OK


def _cmd_study(args) -> int:
    model, dataset = _load_compatible(args.ckpt, args.data)
    try:
        t_list = [int(t) for t in args.t_list.split(",") if t.strip()]
    except ValueError:
        raise ContractError(f"malformed --t-list {args.t_list!r}") from None
    rows = sample_count_study(model, dataset, t_list, args.trials, args.seed)
    write_study_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    worst = run_suite(args.seed, inject_fault=args.inject_fault)
    failed = [name for name in LAYER_NAMES if not worst[name] < TOLERANCE]
    for name in LAYER_NAMES:
        status = "ok" if name not in failed else "FAIL"
        print(f"{name}: max relative error {worst[name]:.3e} [{status}]")
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "study": _cmd_study,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.classes < 2:
        parser.error("--classes must be >= 2")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

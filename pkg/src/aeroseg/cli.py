"""Command-line surface: synth, train, segment, eval, spie.

Exit codes partition the error classes:

====  =========================================================
code  meaning
====  =========================================================
0     success
2     configuration / contract errors (also argparse usage)
3     IO errors: missing files, bad magic, truncated checkpoints
4     label errors (class or domain index out of range)
5     numeric errors (non-finite loss)
====  =========================================================
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import trainer as TR
from .errors import (ConfigurationError, ContractError, CorruptionError,
                     DimensionError, EvaluationError, FormatError, LabelError,
                     NumericError)
from .model import ArchConfig, forward, predict_mask
from .tensor import Tensor, no_grad

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_LABEL = 4
EXIT_NUMERIC = 5


# -- run configuration file ------------------------------------------------------

_AUGMENT_NAMES = {"hflip", "vflip", "rot90", "down2", "down4"}


def _parse_size(value: str) -> tuple:
    try:
        h, w = value.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigurationError(f"bad size {value!r}, expected HxW") from exc


def _parse_augment(value: str) -> D.AugmentPolicy:
    names = [v.strip() for v in value.split(",") if v.strip()]
    unknown = set(names) - _AUGMENT_NAMES
    if unknown:
        raise ConfigurationError(f"unknown augment transform {sorted(unknown)[0]!r}")
    factors = tuple(sorted(int(n[4:]) for n in names if n.startswith("down")))
    return D.AugmentPolicy(
        horizontal_flip="hflip" in names,
        vertical_flip="vflip" in names,
        rotate90="rot90" in names,
        downsample_factors=factors,
    )


class RunConfig:
    """Parsed run configuration: manifests + output dir + train/arch knobs."""

    def __init__(self):
        self.manifests: list = []
        self.out_dir: Path = Path("run_output")
        self.train = TR.TrainConfig()
        self.arch = ArchConfig()


_CONFIG_KEYS = {
    "manifests", "out_dir", "epochs", "batch_size", "learning_rate", "optimizer",
    "lambda1", "lambda2", "labelled_fraction", "seed", "domain_loss_mode", "eps_clamp",
    "dice_smoothing", "adam_beta1", "adam_beta2", "adam_eps", "augment",
    "input_size", "num_classes", "num_domains", "in_channels", "stage_widths",
}


def parse_run_config(path) -> RunConfig:
    """Strict key = value file; unknown keys are rejected by name."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = RunConfig()
    train_kwargs: dict = {}
    arch_kwargs: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            if key == "manifests":
                cfg.manifests = [Path(p.strip()) for p in value.split(",") if p.strip()]
            elif key == "out_dir":
                cfg.out_dir = Path(value)
            elif key in ("epochs", "batch_size", "seed"):
                train_kwargs[key] = int(value)
            elif key in ("learning_rate", "lambda1", "lambda2", "labelled_fraction",
                         "eps_clamp", "dice_smoothing", "adam_beta1", "adam_beta2", "adam_eps"):
                train_kwargs[key] = float(value)
            elif key in ("optimizer", "domain_loss_mode"):
                train_kwargs[key] = value
            elif key == "augment":
                train_kwargs["augment"] = _parse_augment(value)
            elif key == "input_size":
                arch_kwargs["input_size"] = _parse_size(value)
            elif key in ("num_classes", "num_domains", "in_channels"):
                arch_kwargs[key] = int(value)
            elif key == "stage_widths":
                arch_kwargs["stage_widths"] = tuple(int(v) for v in value.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from exc
    cfg.train = TR.TrainConfig(**train_kwargs)
    cfg.arch = ArchConfig(**arch_kwargs)
    cfg.train.validate()
    cfg.arch.validate()
    return cfg


# -- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    out_dir = Path(args.out) if args.out else Path("synth_data")
    size = _parse_size(args.size)
    specs = D.synth_generate(seed, args.n, size, args.classes, out_dir)
    for spec in specs:
        kind = "labelled" if spec.labelled else "unlabelled"
        print(f"domain {spec.tag.symbol}: {spec.count} {kind} images at {spec.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigurationError("train requires --config")
    cfg = parse_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out:
        cfg.out_dir = Path(args.out)
    if not cfg.manifests:
        raise ConfigurationError("config lists no manifests")
    datasets = [D.load_dataset(m) for m in cfg.manifests]
    checkpoint, log = TR.train_loop(datasets, cfg.arch, cfg.train)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    TR.save_checkpoint(cfg.out_dir / "checkpoint.bin", checkpoint)
    (cfg.out_dir / "steps.csv").write_text(TR.steps_csv(log))
    (cfg.out_dir / "epochs.csv").write_text(TR.epochs_csv(log))

    final = log.steps[-1]
    last = log.epochs[-1]
    print(f"final losses: l0={final.l0:.6f} l1={final.l1:.6f} l2={final.l2:.6f} "
          f"total={final.total:.6f}")
    if last.held_out is not None:
        print(f"held-out: accuracy={last.held_out.overall_accuracy:.4f} "
              f"mean_iou={last.held_out.mean_iou:.4f} mean_f1={last.held_out.mean_f1:.4f}")
    print(f"held-out domain accuracy: {last.domain_accuracy:.4f}")
    print(f"artifacts written to {cfg.out_dir}")
    return EXIT_OK


def _center_crop(image: np.ndarray, size: tuple) -> np.ndarray:
    h, w = image.shape[:2]
    th, tw = size
    top = (h - th) // 2
    left = (w - tw) // 2
    return image[top:top + th, left:left + tw]


def cmd_segment(args) -> int:
    checkpoint = TR.load_checkpoint(args.checkpoint)
    params = checkpoint.to_params()
    arch = checkpoint.arch
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    if not args.images:
        print("warning: no input images given", file=sys.stderr)
        return EXIT_OK
    failures = 0
    for image_path in args.images:
        try:
            raster = D.load_image(image_path)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read {image_path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        if raster.ndim != 3:
            raster = np.stack([raster] * 3, axis=2)
        h, w = raster.shape[:2]
        th, tw = arch.input_size
        if h < th or w < tw:
            print(f"error: {image_path} is {h}x{w}, smaller than model size {th}x{tw}",
                  file=sys.stderr)
            failures += 1
            continue
        if (h, w) != (th, tw):
            print(f"warning: center-cropping {image_path} from {h}x{w} to {th}x{tw}",
                  file=sys.stderr)
            raster = _center_crop(raster, (th, tw))
        with no_grad():
            output = forward(params, Tensor(D.image_to_chw(raster)[None]))
        mask = predict_mask(output)[0]
        out_path = out_dir / f"{Path(image_path).stem}_mask.png"
        D.save_image(out_path, D.index_to_color(mask.astype(np.uint8)))
        print(f"{image_path} -> {out_path}")
    return EXIT_OK if failures == 0 else EXIT_IO


def _predict_dataset_masks(params, dataset: D.Dataset) -> list:
    masks = []
    with no_grad():
        for sample in dataset.samples:
            output = forward(params, Tensor(sample.image[None]))
            masks.append(predict_mask(output)[0].astype(np.uint8))
    return masks


def cmd_eval(args) -> int:
    checkpoint = TR.load_checkpoint(args.checkpoint)
    params = checkpoint.to_params()
    dataset = D.load_dataset(args.manifest)
    if not dataset.spec.labelled:
        raise ContractError(f"manifest {args.manifest} is unlabelled; eval needs ground truth")
    predicted = _predict_dataset_masks(params, dataset)
    cm = M.ConfusionMatrix(checkpoint.arch.num_classes)
    for pred, sample in zip(predicted, dataset.samples):
        M.confusion_accumulate(cm, pred, sample.mask)
    report = M.compute_report(cm, args.exclude_class)

    names = D.DEFAULT_LEGEND.names
    per_class = M.report_to_csv(report, names)
    summary = M.report_to_kv(report, names)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "per_class.csv").write_text(per_class)
        (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_spie(args) -> int:
    checkpoint = TR.load_checkpoint(args.checkpoint)
    params = checkpoint.to_params()
    dataset = D.load_dataset(args.manifest)
    if not dataset.samples:
        raise ContractError(f"manifest {args.manifest} lists no images")
    segmenter = M.SegmenterParams(k=args.k, min_size=args.min_size)

    def rendered_masks(p):
        return [D.index_to_color(m) for m in _predict_dataset_masks(p, dataset)]

    inputs = [D.chw_to_image(s.image) for s in dataset.samples]
    report = M.spie(rendered_masks(params), inputs, segmenter)
    print(f"spie = {report.spie:.6f} over {report.num_samples} samples")

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "spie.csv").write_text(
            M.spie_to_csv(report, [s.id for s in dataset.samples]))

    if args.baseline:
        base_params = TR.load_checkpoint(args.baseline).to_params()
        base_report = M.spie(rendered_masks(base_params), inputs, segmenter)
        gain = M.improvement(base_report.spie, report.spie)
        print(f"baseline spie = {base_report.spie:.6f}")
        print(f"improvement over baseline: {round(gain)}%")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # the global flags are accepted both before and after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed override")
    common.add_argument("--config", type=str, default=argparse.SUPPRESS, help="run config file")
    common.add_argument("--out", type=str, default=argparse.SUPPRESS,
                        help="output directory override")

    parser = argparse.ArgumentParser(
        prog="aeroseg", parents=[common],
        description="Domain-adaptive semantic segmentation toolkit (synthetic corpus, "
                    "training, inference, supervised metrics, label-free SPIE).")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", parents=[common],
                             help="generate the synthetic three-domain corpus")
    p_synth.add_argument("--n", type=int, default=16, help="images per domain")
    p_synth.add_argument("--size", type=str, default="32x32", help="image size HxW")
    p_synth.add_argument("--classes", type=int, default=6, help="number of classes")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", parents=[common], help="train from a run config file")
    p_train.set_defaults(func=cmd_train)

    p_seg = sub.add_parser("segment", parents=[common], help="write color masks for images")
    p_seg.add_argument("--checkpoint", required=True)
    p_seg.add_argument("images", nargs="*")
    p_seg.set_defaults(func=cmd_segment)

    p_eval = sub.add_parser("eval", parents=[common],
                            help="supervised metrics on a labelled manifest")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--exclude-class", type=int, default=None, dest="exclude_class")
    p_eval.set_defaults(func=cmd_eval)

    p_spie = sub.add_parser("spie", parents=[common], help="label-free SPIE score on a manifest")
    p_spie.add_argument("--checkpoint", required=True)
    p_spie.add_argument("--manifest", required=True)
    p_spie.add_argument("--baseline", type=str, default=None, help="baseline checkpoint")
    p_spie.add_argument("--k", type=float, default=300.0, help="segmenter merge scale")
    p_spie.add_argument("--min-size", type=int, default=20, dest="min_size")
    p_spie.set_defaults(func=cmd_spie)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for attr in ("seed", "config", "out"):
            if not hasattr(args, attr):
                setattr(args, attr, None)
        return args.func(args)
    except (ConfigurationError, DimensionError, ContractError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CorruptionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LabelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LABEL
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Exit codes: 0 success, 2 usage/config, 3 input data, 4 output I/O.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import imaging, reports, tokenizer
from .checkpoint import Checkpoint, CheckpointError, save_model
from .config import ConfigError, ModelConfig, load_config
from .model import MusiqModel
from .training import ManifestError, RunError, TrainConfig, evaluate, read_manifest, train
from .visualize import ModeError, export_attention, export_hse

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_OUTPUT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _checkpoint(args) -> Checkpoint:
    try:
        ckpt = Checkpoint.load(args.ckpt)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {args.ckpt}", EXIT_USAGE) from exc
    except (CheckpointError, ConfigError, KeyError) as exc:
        raise CliError(f"bad checkpoint {args.ckpt}: {exc}", EXIT_USAGE) from exc
    if args.config and _config(args) != ckpt.config:
        raise CliError(f"--config does not match the configuration stored in {args.ckpt}",
                       EXIT_USAGE)
    return ckpt


def _model(args, required: bool = False) -> MusiqModel:
    """Model from --ckpt, else a fresh one from --config (or defaults)."""
    if args.ckpt:
        try:
            model = _checkpoint(args).build_model()
        except CheckpointError as exc:
            raise CliError(f"bad checkpoint {args.ckpt}: {exc}", EXIT_USAGE) from exc
        return model.eval()
    if required:
        raise CliError("--ckpt is required", EXIT_USAGE)
    return MusiqModel(_config(args)).init_parameters(args.seed).eval()


def _config(args) -> ModelConfig:
    if not args.config:
        return ModelConfig()
    try:
        return load_config(args.config)
    except FileNotFoundError as exc:
        raise CliError(f"config not found: {args.config}", EXIT_USAGE) from exc
    except (ConfigError, TypeError, ValueError) as exc:
        raise CliError(f"bad config {args.config}: {exc}", EXIT_USAGE) from exc


def _image(path) -> np.ndarray:
    try:
        return imaging.load_image(path)
    except imaging.DecodeError as exc:
        raise CliError(f"cannot decode {path}: {exc}", EXIT_INPUT) from exc


def _manifest(path):
    try:
        return read_manifest(path)
    except FileNotFoundError as exc:
        raise CliError(f"manifest not found: {path}", EXIT_INPUT) from exc
    except ManifestError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_OUTPUT) from exc
    return out


def cmd_train(args, out) -> int:
    entries = _manifest(args.manifest)
    if args.ckpt:
        model = _model(args)
    else:
        model = MusiqModel(_config(args)).init_parameters(args.seed)
    loss = args.loss or ("emd" if model.cfg.head == "distribution" else "l1")
    try:
        tcfg = TrainConfig(loss=loss, r=args.r, epochs=args.epochs, batch_size=args.batch_size,
                           max_steps=args.max_steps, optimizer=args.optimizer, lr=args.lr,
                           momentum=args.momentum, weight_decay=args.weight_decay,
                           schedule=args.schedule, hflip=not args.no_hflip, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    try:
        log_fh = open(args.log, "w", encoding="utf-8") if args.log else out
    except OSError as exc:
        raise CliError(f"cannot open log {args.log}: {exc}", EXIT_OUTPUT) from exc
    try:
        log_fh.write("epoch,step,lr,loss\n")
        result = train(entries, model, tcfg, log_stream=log_fh)
    except ManifestError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    except RunError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    finally:
        if log_fh is not out:
            log_fh.close()
    try:
        save_model(model, args.out, meta={"steps": result.steps, "seed": args.seed})
        if args.plot and result.history:
            from .plotting import plot_loss_curve
            plot_loss_curve(result.history, args.plot)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_OUTPUT) from exc
    if result.skipped:
        print(f"# skipped {result.skipped} undecodable images", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    model = _model(args, required=True)
    entries = _manifest(args.manifest)
    try:
        rep = evaluate(entries, model, single_scale=args.single_scale)
    except (ManifestError, RunError) as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    out.write("metric,value\n")
    for key in ("n", "srcc", "plcc", "mse", "cls_acc", "degenerate", "skipped"):
        if key in rep:
            out.write(f"{key},{rep[key]}\n")
    try:
        if args.predictions:
            with open(args.predictions, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["path", "prediction", "label"])
                for p, y, t in zip(rep["paths"], rep["predictions"], rep["labels"]):
                    w.writerow([p, repr(float(y)), repr(float(t))])
        if args.plot:
            from .plotting import plot_predictions
            plot_predictions(rep["predictions"], rep["labels"], args.plot,
                             rep["srcc"], rep["plcc"])
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}", EXIT_OUTPUT) from exc
    return EXIT_OK


def format_score(model: MusiqModel, pred: torch.Tensor) -> str:
    if model.cfg.head == "scalar":
        return f"score={float(pred[0])!r}"
    dist = pred[0]
    mean = float(model.scores(pred)[0])
    return f"mean={mean!r} dist=" + ",".join(repr(float(v)) for v in dist)


def cmd_score(args, out) -> int:
    model = _model(args)
    img = _image(args.image)
    try:
        pred = model.predict_images([img], pad=False, single_scale=args.single_scale)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    out.write(format_score(model, pred) + "\n")
    return EXIT_OK


def cmd_tokenize(args, out) -> int:
    model_cfg = _checkpoint(args).config if args.ckpt else _config(args)
    img = _image(args.image)
    scales = [] if args.single_scale else model_cfg.scales
    layout = tokenizer.tokenize(img, model_cfg.patch_size, scales, model_cfg.max_patches,
                                include_native=model_cfg.include_native, pad=not args.no_pad)
    out.write(f"image={img.shape[0]}x{img.shape[1]}\n")
    for line in tokenizer.describe(layout):
        out.write(line + "\n")
    return EXIT_OK


def cmd_export_attention(args, out) -> int:
    model = _model(args)
    img = _image(args.image)
    out_dir = _out_dir(args.out)
    try:
        paths = export_attention(model, img, out_dir, single_scale=args.single_scale,
                                 figure=not args.no_figure)
    except OSError as exc:
        raise CliError(f"cannot write maps: {exc}", EXIT_OUTPUT) from exc
    for p in paths:
        out.write(f"{p}\n")
    return EXIT_OK


def cmd_export_hse(args, out) -> int:
    model = _model(args)
    out_dir = _out_dir(args.out)
    try:
        path = export_hse(model, out_dir, figure=not args.no_figure)
    except ModeError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    except OSError as exc:
        raise CliError(f"cannot write grid: {exc}", EXIT_OUTPUT) from exc
    out.write(f"{path}\n")
    return EXIT_OK


def _resolution(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError("resolution must look like 224x224") from None


def cmd_summary(args, out) -> int:
    model = _model(args)
    h, w = args.resolution
    for line in reports.summary_lines(model, h, w, single_scale=not args.multi_scale):
        out.write(line + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON model config")
    common.add_argument("--ckpt", help="checkpoint file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--log", help="log file (train: per-epoch CSV)")

    parser = argparse.ArgumentParser(prog="musiq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fine-tune on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd_momentum"], default="sgd_momentum")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--schedule", choices=["cosine", "constant"], default="cosine")
    p.add_argument("--loss", choices=["l1", "emd"])
    p.add_argument("--r", type=float, default=2.0)
    p.add_argument("--no-hflip", action="store_true")
    p.add_argument("--plot", help="write a loss-curve figure here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="SRCC/PLCC/MSE on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--single-scale", action="store_true")
    p.add_argument("--predictions", help="per-image CSV output")
    p.add_argument("--plot", help="prediction scatter figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", parents=[common], help="score one image")
    p.add_argument("--image", required=True)
    p.add_argument("--single-scale", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("tokenize", parents=[common], help="print token layout statistics")
    p.add_argument("--image", required=True)
    p.add_argument("--single-scale", action="store_true")
    p.add_argument("--no-pad", action="store_true")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("export-attention", parents=[common], help="rollout maps per scale")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--single-scale", action="store_true")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("export-hse", parents=[common], help="HSE cosine-similarity grid")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_export_hse)

    p = sub.add_parser("summary", parents=[common], help="parameter and compute report")
    p.add_argument("--resolution", type=_resolution, default=(224, 224))
    p.add_argument("--multi-scale", action="store_true")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv: Optional[List[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    torch.manual_seed(args.seed)
    try:
        return args.func(args, out)
    except CliError as exc:
        print(f"musiq {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CheckpointError) as exc:
        print(f"musiq {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: synth, pretrain, train, eval, infer. Every run echoes its merged
effective configuration into the output directory. Exit codes: 0 success,
1 usage error, 2 validation/configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as cfgmod
from . import metrics as metricsmod
from .data import DatasetError, build_dataset, load_dataset
from .tensor import ShapeError
from .train import (Checkpoint, CheckpointError, NumericalAbort, load_checkpoint,
                    load_models, run_training)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="crossres", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override train.seed")

    p_synth = sub.add_parser("synth", help="generate a synthetic two-domain dataset")
    common(p_synth)

    p_pre = sub.add_parser("pretrain", help="run only the SR pretraining phase")
    common(p_pre)
    p_pre.add_argument("--data", type=Path, required=True, help="dataset root")

    p_train = sub.add_parser("train", help="full two-phase training")
    common(p_train)
    p_train.add_argument("--data", type=Path, required=True, help="dataset root")
    p_train.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the target split")
    common(p_eval)
    p_eval.add_argument("--data", type=Path, required=True, help="dataset root")
    p_eval.add_argument("--checkpoint", type=Path, required=True)

    p_infer = sub.add_parser("infer", help="segment + super-resolve one image")
    common(p_infer)
    p_infer.add_argument("--checkpoint", type=Path, required=True)
    p_infer.add_argument("--input", type=Path, required=True, help="input RGB raster")
    p_infer.add_argument("--output", type=Path, help="label raster path")
    return parser


def _effective_config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["train"] = {"seed": int(args.seed)}
    cfg = cfgmod.load_config(args.config, overrides)
    cfgmod.save_config(cfg, args.out / "effective_config.json")
    return cfg


def _cmd_synth(args) -> int:
    cfg = _effective_config(args)
    synth = cfgmod.make_synth_config(cfg)
    manifest = build_dataset(args.out / "dataset", synth, seed=cfg["train"]["seed"])
    print(f"dataset written: {manifest}")
    return EXIT_OK


def _cmd_train(args, pretrain_only: bool = False) -> int:
    cfg = _effective_config(args)
    if pretrain_only:
        cfg["train"]["main_iters"] = 0
    tc = cfgmod.make_train_config(cfg)
    dataset = load_dataset(args.data, expected_ratio=tc.model.scale_ratio)
    resume = None
    if getattr(args, "resume", None):
        resume = load_checkpoint(args.resume)
    final, metrics_path = run_training(tc, dataset, args.out, resume_from=resume)
    print(f"finished at iteration {final.iteration}; metrics: {metrics_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg_override = _effective_config(args) if args.config else None
    ckpt = load_checkpoint(args.checkpoint)
    bundle = load_models(ckpt)
    crop = ckpt.config.crop
    split = "val"
    with_psnr = True
    if cfg_override is not None:
        crop = cfgmod.make_crop_spec(cfg_override)
        split = cfg_override["eval"]["split"]
        with_psnr = bool(cfg_override["eval"]["with_psnr"])
    else:
        cfgmod.save_config(cfgmod.train_config_to_dict(ckpt.config),
                           args.out / "effective_config.json")
    dataset = load_dataset(args.data, expected_ratio=ckpt.config.model.scale_ratio)
    report = metricsmod.evaluate(bundle.srs, dataset, crop, split=split,
                                 with_psnr=with_psnr)
    csv_text = report.to_csv()
    (args.out / "report.csv").write_text(csv_text)
    sys.stdout.write(csv_text)
    print(report.to_table())
    return EXIT_OK


def _cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = load_models(ckpt)
    cfgmod.save_config(cfgmod.train_config_to_dict(ckpt.config),
                       args.out / "effective_config.json")
    image = np.asarray(Image.open(args.input).convert("RGB"), dtype=np.float32) / 255.0
    chw = np.ascontiguousarray(image.transpose(2, 0, 1))
    labels = metricsmod.sliding_window_infer(bundle.srs, chw, ckpt.config.crop)
    sr = metricsmod.sr_reconstruction(bundle.srs, chw)

    args.out.mkdir(parents=True, exist_ok=True)
    label_path = args.output or (args.out / (args.input.stem + "_labels.png"))
    label_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), "L").save(label_path)
    sr_u8 = np.clip(np.round(sr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    sr_path = label_path.with_name(label_path.stem + "_sr.png")
    Image.fromarray(sr_u8, "RGB").save(sr_path)
    print(f"labels: {label_path}\nsr: {sr_path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "pretrain":
            return _cmd_train(args, pretrain_only=True)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "infer":
            return _cmd_infer(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (cfgmod.ConfigError, DatasetError, CheckpointError, ShapeError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

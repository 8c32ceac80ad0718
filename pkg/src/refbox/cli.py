"""Command-line entry points.

Subcommands: generate-data, train, eval, ablate, gradcheck.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .ablation import load_matrix_file, format_table, run_matrix
from .checks import run_gradient_suite
from .data import SceneConfig, build_vocabulary, generate_dataset, load_dataset
from .errors import (CheckpointError, ConfigError, ContractError,
                     GenerationError, InputError, ShapeError, TrainingAborted)
from .training import TrainConfig, evaluate_checkpoint, train


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as validation errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _parse_set(pairs):
    """--set key=value overrides; values parsed as JSON, else strings."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_config(path, overrides):
    flat = TrainConfig().to_flat_dict()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                flat.update(json.load(fh))
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    flat.update(overrides)
    return TrainConfig.from_flat_dict(flat)


def cmd_generate_data(args):
    config = SceneConfig(image_side=args.image_size,
                         min_objects=args.min_objects,
                         max_objects=args.max_objects)
    train_dir = os.path.join(args.out, "train")
    val_dir = os.path.join(args.out, "val")
    _, train_exprs = generate_dataset(args.n, args.seed, train_dir, config)
    generate_dataset(args.val_n, args.seed, val_dir, config, start_index=args.n)
    vocab = build_vocabulary(train_exprs)
    vocab.save(os.path.join(args.out, "vocab.txt"))
    if args.oov_n:
        generate_dataset(args.oov_n, args.seed, os.path.join(args.out, "oov"),
                         config, start_index=args.n + args.val_n, oov=True)
    print(f"wrote {args.n} train + {args.val_n} val samples under {args.out} "
          f"(vocabulary: {vocab.size} ids)")
    return 0


def cmd_train(args):
    config = _load_config(args.config, _parse_set(args.set))
    if args.print_config:
        print(json.dumps(config.to_flat_dict(), indent=2, sort_keys=True))
        return 0
    if not config.train_data or not config.val_data:
        raise ConfigError("train_data and val_data must be set (config file or --set)")
    result = train(config, args.out, resume_from=args.resume)
    print(f"best val acc@0.5 {result.best_accuracy:.4f} (epoch {result.best_epoch}); "
          f"checkpoints under {args.out}")
    return 0


def cmd_eval(args):
    result = evaluate_checkpoint(args.checkpoint, args.data, batch_size=args.batch_size)
    print(f"acc@0.5 {result.accuracy:.4f}  mean IoU {result.mean_iou:.4f}  "
          f"({len(result.records)} samples)")
    if args.records:
        with open(args.records, "w", encoding="utf-8") as fh:
            for rec in result.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"per-sample records written to {args.records}")
    return 0


def cmd_ablate(args):
    base, cells = load_matrix_file(args.matrix)
    base.update(_parse_set(args.set))
    results = run_matrix(base, cells, args.out)
    print(format_table(results))
    failed = [name for name, r in results.items() if r["errors"]]
    if failed:
        print(f"cells with failed runs: {failed}")
        return 2
    return 0


def cmd_gradcheck(args):
    ok = run_gradient_suite(n_seeds=args.seeds, sample=args.sample)
    print("gradient suite:", "PASS" if ok else "FAIL")
    return 0 if ok else 2


def build_parser():
    parser = _Parser(prog="refbox",
                     description="Train and evaluate a grounding transformer "
                                 "on synthetic referring-expression scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset",
                       description="Render train/val splits and the vocabulary file.")
    p.add_argument("--n", type=int, default=2000, help="train sample count")
    p.add_argument("--val-n", type=int, default=500, help="val sample count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--min-objects", type=int, default=2)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--oov-n", type=int, default=0,
                   help="also write an out-of-vocabulary split of this size")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model",
                       description="Configs are flat JSON; any key can be "
                                   "overridden with --set key=value.")
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--records", help="write per-sample IoU records (jsonl)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("--matrix", required=True,
                   help='JSON: {"base": {...}, "cells": [{"name", "overrides", "seeds"}]}')
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override base config keys")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference derivative suites")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--sample", type=int, default=None,
                   help="check only this many coordinates per parameter")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, InputError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingAborted, GenerationError, CheckpointError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

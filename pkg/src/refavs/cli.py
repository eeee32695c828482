"""Command-line entry point: ``refavs <verb> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import (
    UsageError, cmd_build_reflective, cmd_eval, cmd_gen_data, cmd_report, cmd_train_grpo, cmd_train_reflective,
    cmd_train_sft, cmd_train_teacher, load_run_config, read_ini,
)
from .synthgen import DatasetConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

HELP = {
    "train-teacher": "stage 0: train the teacher segmenter",
    "train-sft": "stage 1: reasoning SFT with optional feature distillation",
    "build-reflective": "select hard samples and write the stage-2 corpus",
    "train-reflective": "stage 2: train on the reflective corpus",
    "train-grpo": "stage 3: group-relative policy optimisation",
}

STAGE_OF = {
    "train-teacher": ("teacher", cmd_train_teacher),
    "train-sft": ("sft", cmd_train_sft),
    "build-reflective": ("sft", cmd_build_reflective),
    "train-reflective": ("reflective", cmd_train_reflective),
    "train-grpo": ("grpo", cmd_train_grpo),
}


def _dataset_config(path, seed) -> DatasetConfig:
    kw = {}
    if path:
        cp = read_ini(path)
        if cp.has_section("data"):
            for k, v in cp["data"].items():
                kw[k] = int(v)
    if seed is not None:
        kw["seed"] = seed
    try:
        return DatasetConfig(**kw)
    except TypeError as e:
        raise UsageError(f"bad [data] section: {e}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    p = argparse.ArgumentParser(prog="refavs", description="Synthetic audio-visual referring segmentation pipeline.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    for verb in STAGE_OF:
        sp = sub.add_parser(verb, parents=[common], help=HELP[verb])
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--steps", type=int)
        if verb != "train-teacher":
            sp.add_argument("--checkpoint", dest="checkpoint_in", help="input checkpoint")
        if verb == "train-sft":
            sp.add_argument("--teacher", help="teacher checkpoint")
            sp.add_argument("--no-distill", dest="distill", action="store_false", default=None)
        if verb == "train-reflective":
            sp.add_argument("--corpus", help="stage-2 corpus directory")
    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test splits")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--splits", default="test_seen,test_unseen")
    rp = sub.add_parser("report", parents=[common], help="plot curves and summarise a run directory")
    rp.add_argument("run_dir")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.verb == "gen-data":
            manifest = cmd_gen_data(args.out or "data", _dataset_config(args.config, args.seed))
            print(json.dumps({k: v["count"] for k, v in manifest["splits"].items()}))
        elif args.verb == "eval":
            report = cmd_eval(args.checkpoint, args.data, args.out or "eval", args.splits.split(","))
            print(report.table())
        elif args.verb == "report":
            print(cmd_report(args.run_dir))
        else:
            stage, fn = STAGE_OF[args.verb]
            over = {k: getattr(args, k, None) for k in ("seed", "out", "data", "steps", "checkpoint_in",
                                                         "teacher", "distill", "corpus")}
            cfg = load_run_config(args.config, stage=stage, **over)
            print(json.dumps(fn(cfg), indent=1, default=str))
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        logging.exception("run failed")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())

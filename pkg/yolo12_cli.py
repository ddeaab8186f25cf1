#!/usr/bin/env python3
"""
Command-line surface for the YOLOv12 desk toolkit.

    python yolo12_cli.py describe   [--config toy.cfg] [--format json|csv]
    python yolo12_cli.py bench-attn --n 256 512 --d 32 --L 1 4 --tiles 32 64 [--svg bench.svg]
    python yolo12_cli.py gradcheck
    python yolo12_cli.py synth      data/train --images 300 --size 64
    python yolo12_cli.py train      --config toy.cfg --data data/train --checkpoint-dir runs/toy
    python yolo12_cli.py eval       --data data/val runs/toy/last.y12c [--svg frontier.svg]

Global flags: --seed, --threads, --out, --log-level.
Exit codes: 0 success, 1 verification failure, 2 usage or config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from bench import bench_attention, run_tiled, write_report
from checkpoint import load_checkpoint
from detection import decode, nms
from errors import DivergenceError, FormatError, VerificationError, Yolo12Error
from gradcheck_suite import failures, run_gradcheck_suite
from model_assembly import ModelConfig, build_model, describe_variants
from settings import BENCH_REPEATS, BENCH_WARMUP, DEFAULT_THREADS, LOG_LEVEL, configure_logging
from synth_data import read_dataset, synth_dataset, write_dataset
from tensor_core import Tensor
from trainer import TrainSchedule, evaluate, train

logger = logging.getLogger("yolo12_cli")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
LATENCY_IMAGES = 100


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    payload_path: Optional[Path] = None


class DatasetUnreadable(Exception):
    """A dataset file is malformed; reported with the I/O exit code."""


# ========= 🧰 HELPERS ========= #
def _load_config(path: Optional[str]) -> ModelConfig:
    return ModelConfig.load(path) if path else ModelConfig()


def _read_dataset(root: str):
    try:
        return read_dataset(root)
    except FormatError as exc:
        raise DatasetUnreadable(str(exc)) from exc


def _emit(text: str, out: Optional[str]) -> Optional[Path]:
    """Machine-readable output goes to --out, else stdout."""
    if out is None:
        sys.stdout.write(text)
        return None
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    logger.info("Wrote %s", path)
    return path


# ========= 📋 COMMANDS ========= #
def cmd_describe(args: argparse.Namespace) -> CommandResult:
    cfg = _load_config(args.config)
    report = describe_variants(cfg)
    if args.format == "json":
        text = json.dumps({"config": cfg.dump(), "variants": report}, indent=2) + "\n"
    else:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["variant", "table", "name", "value"])
        for entry in report:
            writer.writerow([entry["variant"], "total", "params", entry["params"]])
            writer.writerow([entry["variant"], "total", "flops", entry["flops"]])
            writer.writerows([entry["variant"], "params", row["module"], row["params"]] for row in entry["param_rows"])
            writer.writerows([entry["variant"], "flops", row["module"], row["flops"]] for row in entry["flop_rows"])
        text = buffer.getvalue()
    if args.out is not None:
        print(f"{'variant':<8}{'params':>14}{'flops':>16}{'x params':>10}{'x flops':>10}")
        for entry in report:
            ratios = [f"{entry[k]:.2f}" if entry[k] is not None else "-" for k in ("params_ratio", "flops_ratio")]
            print(f"{entry['variant']:<8}{entry['params']:>14,}{entry['flops']:>16,}{ratios[0]:>10}{ratios[1]:>10}")
    return CommandResult(EXIT_OK, _emit(text, args.out))


def _corrupted_tiled(tokens, cfg):
    out = run_tiled(tokens, cfg)
    out.data.reshape(-1)[0] += 1e-2
    return out


def cmd_bench_attn(args: argparse.Namespace) -> CommandResult:
    runners = {"tiled": _corrupted_tiled} if args.inject_fault else None
    try:
        report = bench_attention(args.n, args.d, args.L, args.tiles, threads=args.threads, seed=args.seed,
                                 warmup=args.warmup, repeats=args.repeats, runners=runners)
    except VerificationError as exc:
        logger.error("benchmark aborted before timing: %s", exc)
        return CommandResult(EXIT_VERIFY)
    fmt = args.format or ("json" if args.out and args.out.endswith(".json") else "csv")
    path = _emit(write_report(report, None, fmt), args.out)
    if args.svg:
        from plots import latency_vs_n_svg

        latency_vs_n_svg(report.records, args.svg)
    return CommandResult(EXIT_OK, path)


def cmd_gradcheck(args: argparse.Namespace) -> CommandResult:
    rows = run_gradcheck_suite(seed=args.seed, names=args.only, broken=args.break_gradient)
    print(f"{'entry':<24}{'kind':<11}{'params':>8}{'max rel err':>14}  status")
    for row in rows:
        print(f"{row.name:<24}{row.kind:<11}{row.params:>8}{row.max_rel_error:>14.3e}  {'ok' if row.passed else 'FAIL'}")
    if args.out:
        document = [{"name": r.name, "kind": r.kind, "params": r.params, "max_rel_error": r.max_rel_error,
                     "passed": r.passed} for r in rows]
        _emit(json.dumps(document, indent=2) + "\n", args.out)
    failed = failures(rows)
    if failed:
        logger.error("gradient check failed for: %s", ", ".join(failed))
        return CommandResult(EXIT_VERIFY)
    return CommandResult(EXIT_OK, Path(args.out) if args.out else None)


def cmd_synth(args: argparse.Namespace) -> CommandResult:
    samples = synth_dataset(args.images, args.size, seed=args.seed, threads=args.threads)
    return CommandResult(EXIT_OK, write_dataset(samples, args.root))


def cmd_train(args: argparse.Namespace) -> CommandResult:
    cfg = _load_config(args.config)
    dataset = _read_dataset(args.data)
    schedule = TrainSchedule(epochs=args.epochs, base_lr=args.lr, lr_min=args.lr_min, warmup_steps=args.warmup,
                             batch_size=args.batch_size, seed=args.seed, grad_clip=args.grad_clip,
                             weights=cfg.loss_weights)
    checkpoint_dir = Path(args.checkpoint_dir)
    log_path = Path(args.out) if args.out else checkpoint_dir / "metrics.jsonl"
    model = build_model(cfg)
    try:
        train(model, dataset, schedule, log_path=log_path, checkpoint_dir=checkpoint_dir)
    except DivergenceError as exc:
        logger.error("training diverged: %s", exc)
        return CommandResult(EXIT_VERIFY, log_path)
    return CommandResult(EXIT_OK, log_path)


def _latency_ms(model, dataset, count: int, conf: float, iou: float) -> Dict[str, float]:
    """Per-image latency of forward, decode and NMS over ``count`` images, cycling through the dataset."""
    times = np.empty(count)
    for i in range(count):
        image = Tensor(dataset[i % len(dataset)].image[None])
        started = time.perf_counter_ns()
        nms(decode(model(image), conf)[0], iou)
        times[i] = (time.perf_counter_ns() - started) / 1e6
    p10, median, p90 = np.percentile(times, [10, 50, 90])
    return {"median": float(median), "p10": float(p10), "p90": float(p90), "images": count}


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    dataset = _read_dataset(args.data)
    results: List[Dict[str, object]] = []
    for checkpoint in args.checkpoints:
        model = load_checkpoint(checkpoint)
        scores = evaluate(model, dataset, conf_thresh=args.conf, iou_thresh=args.iou)
        latency = _latency_ms(model, dataset, args.latency_images, args.conf, args.iou)
        results.append({
            "checkpoint": str(checkpoint),
            "variant": model.cfg.variant,
            "map50": scores.map50,
            "map50_95": scores.map50_95,
            "per_class": {str(c): v for c, v in scores.per_class.items()},
            "latency_ms": latency,
        })
        logger.info("%s: mAP@50=%.3f mAP@[.5:.95]=%.3f latency %.2f ms",
                    checkpoint, scores.map50, scores.map50_95, latency["median"])
    path = _emit(json.dumps({"results": results}, indent=2) + "\n", args.out)
    if args.svg:
        from plots import frontier_svg

        frontier_svg([(f"{r['variant']} {Path(r['checkpoint']).stem}", r["latency_ms"]["median"], r["map50"])
                      for r in results], args.svg)
    return CommandResult(EXIT_OK, path)


# ========= ▶ ENTRY POINT ========= #
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="yolo12", description="YOLOv12 mechanisms toolkit")
    parser.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    parser.add_argument("--threads", type=int, default=DEFAULT_THREADS, help="worker and BLAS threads")
    parser.add_argument("--out", default=None, help="machine-readable output path (default stdout)")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    commands = parser.add_subparsers(dest="command", required=True)

    describe = commands.add_parser("describe", help="parameter and FLOP tables for all variants")
    describe.add_argument("--config")
    describe.add_argument("--format", choices=("json", "csv"), default="json")
    describe.set_defaults(handler=cmd_describe)

    bench = commands.add_parser("bench-attn", help="verify then time naive/area/tiled attention")
    bench.add_argument("--n", type=int, nargs="+", default=[256])
    bench.add_argument("--d", type=int, nargs="+", default=[32])
    bench.add_argument("--L", type=int, nargs="+", default=[1, 4])
    bench.add_argument("--tiles", type=int, nargs="+", default=[64])
    bench.add_argument("--format", choices=("json", "csv"), default=None)
    bench.add_argument("--warmup", type=int, default=BENCH_WARMUP)
    bench.add_argument("--repeats", type=int, default=BENCH_REPEATS)
    bench.add_argument("--svg", default=None)
    bench.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    bench.set_defaults(handler=cmd_bench_attn)

    grad = commands.add_parser("gradcheck", help="finite-difference audit of primitives and blocks")
    grad.add_argument("--only", nargs="+", default=None)
    grad.add_argument("--break-gradient", default=None, help=argparse.SUPPRESS)
    grad.set_defaults(handler=cmd_gradcheck)

    synth = commands.add_parser("synth", help="write a synthetic shapes dataset")
    synth.add_argument("root")
    synth.add_argument("--images", type=int, default=300)
    synth.add_argument("--size", type=int, default=64)
    synth.set_defaults(handler=cmd_synth)

    trainp = commands.add_parser("train", help="train a model on a dataset directory")
    trainp.add_argument("--config")
    trainp.add_argument("--data", required=True)
    trainp.add_argument("--checkpoint-dir", required=True)
    trainp.add_argument("--epochs", type=int, default=30)
    trainp.add_argument("--batch-size", type=int, default=8)
    trainp.add_argument("--lr", type=float, default=0.01)
    trainp.add_argument("--lr-min", type=float, default=1e-4)
    trainp.add_argument("--warmup", type=int, default=20)
    trainp.add_argument("--grad-clip", type=float, default=10.0, help="max global gradient norm; 0 disables")
    trainp.set_defaults(handler=cmd_train)

    evalp = commands.add_parser("eval", help="mAP and latency of one or more checkpoints")
    evalp.add_argument("checkpoints", nargs="+")
    evalp.add_argument("--data", required=True)
    evalp.add_argument("--conf", type=float, default=0.25)
    evalp.add_argument("--iou", type=float, default=0.5)
    evalp.add_argument("--latency-images", type=int, default=LATENCY_IMAGES)
    evalp.add_argument("--svg", default=None)
    evalp.set_defaults(handler=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args).exit_code
    except DatasetUnreadable as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except (VerificationError, DivergenceError) as exc:
        logger.error("%s", exc)
        return EXIT_VERIFY
    except Yolo12Error as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())

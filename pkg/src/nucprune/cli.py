"""Command line entry point: synth, train, prune-sweep, merge, eval, report.

Exit codes: 0 success, 2 invalid arguments, 3 missing or unreadable input /
I/O failure, 4 sweep stopped early by connectivity loss.
"""
from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .autonet import TrainConfig, build_toy_network, predict, train
from .experiment import (BRANCH_HEAD, MissingCheckpoint, build_report, dump_json, load_dataset,
                         load_model, save_dataset, save_model)
from .instseg import MergeConfig, merge
from .metrics import MetricsReport, aji, dice, pq
from .pruner import METHODS, ConnectivityLoss, PruneConfig, iter_mag_prune, log2_exact, theoretical_speedup
from .synthgen import SceneConfig, make_dataset, training_pairs

log = logging.getLogger("nucprune")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PARTIAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _positive(name: str, value) -> None:
    if value < 1:
        raise UsageError(f"--{name} must be >= 1, got {value}")


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    _positive("count", args.count)
    if args.count < 2:
        raise UsageError("--count must be at least 2 (train and test split)")
    if args.size % 4:
        raise UsageError(f"--size must be divisible by 4, got {args.size}")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    cfg = SceneConfig.preset(args.dist, seed=args.seed, size=(args.size, args.size))
    train_set, test_set = make_dataset(cfg, args.count, args.split)
    save_dataset(out, train_set, test_set, {
        "distribution": args.dist, "seed": args.seed, "size": args.size,
        "count": args.count, "split": args.split,
    })
    print(f"wrote {args.count} {args.dist} scenes ({len(train_set)} train / {len(test_set)} test) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _positive("epochs", args.epochs)
    _positive("batch", args.batch)
    scenes = load_dataset(args.data, args.split)
    if not scenes:
        raise UsageError(f"no '{args.split}' scenes in {args.data}")
    pairs = training_pairs(scenes, args.branch)
    net = build_toy_network(BRANCH_HEAD[args.branch], seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, initial_lr=args.lr, batch_size=args.batch,
                      seed=args.seed, augment_flips=not args.no_flips)
    net, history = train(net, pairs, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, net, {"branch": args.branch, "epochs": args.epochs, "lr": args.lr,
                          "batch": args.batch, "seed": args.seed})
    with open(out.with_suffix(".loss.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "loss"])
        wr.writerows((i, f"{v:.6g}") for i, v in enumerate(history))
    if args.branch == "seg":
        score = np.mean([dice(predict(net, s.image) > 0.5, s.binary[0] > 0.5) for s in scenes])
        print(f"final training Dice {score:.4f}")
    else:
        score = np.mean([np.mean((predict(net, s.image) - s.distance[0]) ** 2) for s in scenes])
        print(f"final training MSE {score:.5f}")
    return EXIT_OK


def cmd_prune_sweep(args) -> int:
    try:
        log2_exact(args.max_cr)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _positive("retrain-epochs", args.retrain_epochs)
    net, meta = load_model(args.model)
    branch = meta.get("branch", "seg" if net.head == "sigmoid" else "reg")
    scenes = load_dataset(args.data, "train")
    pairs = training_pairs(scenes, branch)
    shape = scenes[0].image.shape
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    save_model(out / "base.prnw", net, {**meta, "cr": 1})
    crs: list[int] = []

    def write_sweep(status: str, error: str | None = None):
        dump_json(out / "sweep.json", {"branch": branch, "method": args.method, "max_cr": args.max_cr,
                                       "retrain_epochs": args.retrain_epochs, "seed": args.seed,
                                       "crs": crs, "status": status, "error": error})

    def checkpoint(cr, ck, report):
        save_model(out / f"cr{cr}.prnw", ck, {**meta, "cr": cr, "method": args.method})
        dump_json(out / f"cr{cr}.sparsity.json", report.to_dict())
        dump_json(out / f"cr{cr}.speedup.json", {**theoretical_speedup(ck, input_shape=shape).to_dict(),
                                                  "cr": cr})
        crs.append(cr)
        write_sweep("running")
        print(f"CR {cr}: sparsity {report.sparsity:.4f}")

    retrain = TrainConfig(epochs=args.retrain_epochs, seed=args.seed, initial_lr=args.lr,
                          batch_size=args.batch)
    cfg = PruneConfig(method=args.method, cr=args.max_cr, retrain=retrain)
    try:
        iter_mag_prune(net, cfg, pairs, on_checkpoint=checkpoint)
    except ConnectivityLoss as exc:
        write_sweep("partial", str(exc))
        print(f"sweep stopped: {exc}; kept CRs {crs}", file=sys.stderr)
        return EXIT_PARTIAL
    write_sweep("complete")
    return EXIT_OK


def cmd_merge(args) -> int:
    seg = formats.load_floatmap(args.seg)
    dist = formats.load_floatmap(args.dist)
    if seg.shape != dist.shape:
        raise UsageError(f"shape mismatch: {args.seg} is {seg.shape}, {args.dist} is {dist.shape}")
    cfg = MergeConfig(seg_threshold=args.seg_threshold, min_area=args.min_area,
                      maxima_rel_threshold=args.maxima_threshold, sigma_scale=args.sigma_scale)
    labels = merge(seg, dist, cfg)
    formats.save_labelmap(args.out, labels)
    print(f"{int(labels.max())} instances -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = formats.load_labelmap(args.pred)
    gt = formats.load_labelmap(args.gt)
    if pred.shape != gt.shape:
        raise UsageError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    row = MetricsReport(args.run_id, "inst", "eval", 1, dice=dice(pred > 0, gt > 0),
                        aji=aji(gt, pred), pq=pq(gt, pred).pq)
    formats.write_results_csv(args.out, [row])
    print(f"dice {row.dice:.4f}  aji {row.aji:.4f}  pq {row.pq:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    scenes = load_dataset(args.data, args.split)
    if not scenes:
        raise UsageError(f"no '{args.split}' scenes in {args.data}")
    rows = build_report(args.sweep, scenes, args.run_id,
                        replace(MergeConfig(), min_area=args.min_area, sigma_scale=args.sigma_scale))
    formats.write_results_csv(args.out, rows)
    print(f"{len(rows)} rows -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nucprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=40)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--dist", choices=["base", "shifted"], default="base")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", type=float, default=0.8, help="training fraction")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the seg or reg branch")
    s.add_argument("--branch", choices=["seg", "reg"], required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train", choices=["train", "test", "all"])
    s.add_argument("--no-flips", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("prune-sweep", help="iterative magnitude pruning up to --max-cr")
    s.add_argument("--model", required=True)
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--max-cr", type=int, required=True)
    s.add_argument("--retrain-epochs", type=int, default=150)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_prune_sweep)

    s = sub.add_parser("merge", help="merge seg and distance maps into instances")
    s.add_argument("--seg", required=True)
    s.add_argument("--dist", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-area", type=int, default=30)
    s.add_argument("--sigma-scale", type=float, default=0.5)
    s.add_argument("--seg-threshold", type=float, default=0.5)
    s.add_argument("--maxima-threshold", type=float, default=0.1)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("eval", help="score a predicted label map against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--run-id", default="eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="evaluate sweep checkpoints into a results CSV")
    s.add_argument("--sweep", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.add_argument("--run-id", default="run")
    s.add_argument("--min-area", type=int, default=30)
    s.add_argument("--sigma-scale", type=float, default=0.5)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        if isinstance(exc, formats.FormatError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MissingCheckpoint) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

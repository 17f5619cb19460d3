"""Command-line surface.

Commands: stats, preprocess, train, eval, gradcheck, ablate, bench.
Artifacts land under --out: metrics.json, metrics.csv, loss_curve.csv,
timing.csv, size_ordered.csv (as applicable per command).
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import tensor as T
from .cbam import ChannelAttentionParams, channel_attention_map
from .data.coco import load_coco, save_dataset
from .data.enhance import enhance
from .data.planner import plan_and_execute_augmentation, split_train_val
from .data.stats import category_stats, stats_to_csv
from .errors import InvalidParam, ParseError, RailswinError
from .metrics import evaluate, load_detections, report_to_csv, report_to_dict, size_ordered_report
from .swin import CbamPlacement
from .tensor import Tensor, grad_check
from .train import (
    bench,
    load_checkpoint,
    load_train_config,
    predict_detections,
    run_ablation,
    train,
)


def _ensure_out(args):
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    return out


def cmd_stats(args):
    data = load_coco(args.annotations, load_pixels=False)
    stats = category_stats(data)
    csv_text = stats_to_csv(stats)
    print(csv_text, end="")
    if args.out:
        out = _ensure_out(args)
        with open(os.path.join(out, "stats.csv"), "w") as fh:
            fh.write(csv_text)
    return 0


def _load_targets(path, categories):
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ParseError("augment targets must be a JSON object")
    fraction = float(doc.get("fraction", 0.8))
    by_name = {name: cid for cid, name in categories.items()}

    def resolve(side):
        raw = doc.get(side, {})
        out = {}
        for key, count in raw.items():
            if key in by_name:
                out[by_name[key]] = int(count)
            elif key.isdigit() and int(key) in categories:
                out[int(key)] = int(count)
            else:
                raise InvalidParam(f"unknown category {key!r} in targets")
        return out

    return fraction, resolve("train"), resolve("val")


def cmd_preprocess(args):
    data = load_coco(args.annotations)
    if args.enhance:
        for im in data.images:
            if im.pixels is not None:
                enhanced = enhance(im.pixels, args.enhance)
                im.pixels = enhanced
    fraction, train_targets, val_targets = _load_targets(args.augment_plan, data.categories)
    train_ds, val_ds = split_train_val(data, fraction, args.seed)
    out = _ensure_out(args)
    plans = {}
    for name, ds, targets in (("train", train_ds, train_targets), ("val", val_ds, val_targets)):
        plan, augmented = plan_and_execute_augmentation(ds, targets, args.seed, split=name)
        plans[name] = plan
        save_dataset(augmented, os.path.join(out, name))
        print(f"{name}: {len(augmented.images)} images "
              f"({len(plan.records)} synthesized)")
    with open(os.path.join(out, "plan.json"), "w") as fh:
        fh.write(json.dumps({name: json.loads(p.to_json()) for name, p in plans.items()},
                            indent=1, sort_keys=True))
        fh.write("\n")
    return 0


def cmd_train(args):
    cfg = load_train_config(args.config)
    out = _ensure_out(args)
    result = train(cfg, out_dir=out, resume=args.resume)
    if result.losses:
        print(f"trained {len(result.losses)} iterations; "
              f"final loss {result.losses[-1]:.4f}; "
              f"iter time {result.timing.mean():.4f}s ± {result.timing.std():.4f}s")
    else:
        print("nothing to train: checkpoint already covers the configured iterations")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args):
    data = load_coco(args.dataset)
    if args.dets:
        dets = load_detections(args.dets)
    elif args.checkpoint:
        _, backbone, head, _, _ = load_checkpoint(args.checkpoint)
        dets = predict_detections(backbone, head, data)
    else:
        raise InvalidParam("eval needs --dets or --checkpoint")
    report = evaluate(dets, data)
    out = _ensure_out(args)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(report_to_dict(report), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "metrics.csv"), "w") as fh:
        fh.write(report_to_csv(report))
    stats = category_stats(data)
    try:
        _, csv_text = size_ordered_report(report, stats)
        with open(os.path.join(out, "size_ordered.csv"), "w") as fh:
            fh.write(csv_text)
    except RailswinError as e:
        print(f"size-ordered report skipped: {e}", file=sys.stderr)
    print(f"mAP.50 {report.map50:.4f}  mAP.75 {report.map75:.4f}  AR@100 {report.mar100:.4f}")
    return 0


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    checks = []

    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(2, 4)))
    m2 = Tensor(rng.normal(size=(4, 2)))
    checks.append(("matmul", grad_check(lambda t: T.tsum(T.matmul(t, m2)), x)))
    checks.append(("linear", grad_check(lambda t: T.tsum(T.linear(t, w)), x)))
    checks.append(("sigmoid", grad_check(lambda t: T.tsum(T.sigmoid(t)), x)))
    checks.append(("gelu", grad_check(lambda t: T.tsum(T.gelu(t)), x)))
    probe = Tensor(rng.normal(size=(3, 4)))
    checks.append(("softmax", grad_check(lambda t: T.tsum(T.softmax(t, -1) * probe), x)))
    g = Tensor(np.ones(4))
    b = Tensor(np.zeros(4))
    checks.append(("layer_norm", grad_check(lambda t: T.tsum(T.layer_norm(t, g, b) * probe), x)))
    img = Tensor(rng.normal(size=(2, 5, 5)))
    kern = Tensor(rng.normal(size=(3, 2, 3, 3)))
    checks.append(("conv2d", grad_check(lambda t: T.tsum(T.conv2d(t, kern, 1, 1)), img)))
    feat = Tensor(rng.normal(size=(4, 3, 3)))
    cam = ChannelAttentionParams.init(4, 2, rng)
    checks.append(("channel_attention",
                   grad_check(lambda t: T.tsum(channel_attention_map(t, cam)), feat)))

    worst = 0.0
    for name, err in checks:
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:>20}: rel err {err:.3e}  [{status}]")
        worst = max(worst, err)
    return 0 if worst < 1e-4 else 2


def cmd_ablate(args):
    cfg = load_train_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    variants = [CbamPlacement.NONE, CbamPlacement.MODEL,
                CbamPlacement.STAGE, CbamPlacement.BLOCK]
    result = run_ablation(cfg, variants=variants, seeds=seeds)
    out = _ensure_out(args)
    with open(os.path.join(out, "ablation.csv"), "w") as fh:
        fh.write(result.to_csv())
    print(result.to_csv(), end="")
    return 0


def cmd_bench(args):
    cfg = load_train_config(args.config)
    timing = bench(cfg, args.iters)
    out = _ensure_out(args)
    with open(os.path.join(out, "timing.csv"), "w") as fh:
        fh.write(timing.to_csv())
    print(f"{timing.mean():.4f}s ± {timing.std():.4f}s per iteration "
          f"({len(timing.retained())} measured after {timing.warmup} warmup)")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="railswin",
                                description="Rail-surface defect detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="per-category size statistics of a COCO-style file")
    s.add_argument("annotations")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("preprocess", help="enhance, split, and balance a dataset")
    s.add_argument("annotations")
    s.add_argument("--enhance", choices=["he", "ahe", "cet", "msrcp"])
    s.add_argument("--augment-plan", required=True,
                   help="JSON: {fraction, train: {category: count}, val: {...}}")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("train", help="train from a config JSON")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score detections against ground truth")
    s.add_argument("--checkpoint")
    s.add_argument("--dets")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the core ops")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train/evaluate all four placement variants")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", default="0")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("bench", help="time training iterations")
    s.add_argument("--config", required=True)
    s.add_argument("--iters", type=int, default=30)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidParam, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RailswinError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

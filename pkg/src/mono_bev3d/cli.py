from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .bev_render import grid_to_image, rasterize_grid, render_overlay, write_image
from .checkpoint import load_checkpoint
from .config import RunConfig, resolve_config, write_resolved
from .errors import MonoBev3DError
from .evaluation import (
    IOU_THRESHOLDS,
    TIERS,
    evaluate_label_dirs,
    iou_hit_rate,
    label_dir_hit_rates,
    write_ap_table,
)
from .geometry import BevRect, Box3D, frontal_bbox
from .kitti_io import Difficulty, classify_difficulty, read_label_file, record_from_box, serialize_labels
from .logger import log_event
from .model import BranchConfig, BranchModel, composite_grad_check
from .overlap import OVERLAP_KINDS
from .synthdata import Dataset, dataset_config, load_dataset, make_dataset, split_train_val
from .training import train_stage1, train_stage2

GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def build_arg_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="Flat JSON config file")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--seed", type=int, help="Run seed (overrides the config file)")

    p = _Parser(prog="mono-bev3d", description="Monocular BEV and 3D box regression pipeline")
    sub = p.add_subparsers(dest="cmd", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic dataset")
    gen.add_argument("--n", type=int, help="Number of samples")

    train = sub.add_parser("train", parents=[common], help="Run one training stage")
    train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    train.add_argument("--dataset", help="Dataset directory written by gen-data")
    train.add_argument("--ckpt", help="Stage-1 checkpoint (stage 2; default <out>/stage1.ckpt)")

    ev = sub.add_parser("eval", parents=[common], help="AP table from label dirs or a checkpoint")
    ev.add_argument("--pred", help="Directory of predicted KITTI label files")
    ev.add_argument("--gt", help="Directory of ground-truth KITTI label files")
    ev.add_argument("--ckpt", help="Model checkpoint to evaluate on --dataset")
    ev.add_argument("--dataset", help="Dataset directory written by gen-data")
    ev.add_argument("--iou", type=float, action="append", help="IoU threshold (repeatable)")
    ev.add_argument("--tier", action="append", choices=("easy", "moderate", "hard"))
    ev.add_argument("--overlap", default="bev", choices=OVERLAP_KINDS)

    render = sub.add_parser("render-bev", parents=[common], help="Render BEV overlays and grids")
    render.add_argument("--ckpt", required=True)
    render.add_argument("--dataset", required=True)
    render.add_argument("--n", type=int, default=16, help="Number of samples to render")

    inspect = sub.add_parser("inspect-labels", parents=[common], help="Parse KITTI labels")
    inspect.add_argument("--kitti-dir", required=True, help="Directory of label .txt files")

    sub.add_parser("grad-check", parents=[common], help="Gradient check of a small composite model")
    return p


def _out(args: argparse.Namespace, cfg: RunConfig) -> Path:
    return Path(args.out or cfg.out)


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, {"n": args.n, "seed": args.seed, "out": args.out})
    out = _out(args, cfg)
    make_dataset(cfg.synth, out)
    write_resolved(cfg, out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, {"seed": args.seed, "dataset": args.dataset, "out": args.out})
    out = _out(args, cfg)
    if not cfg.train.dataset:
        raise FileNotFoundError("no dataset given (--dataset or 'dataset' in the config file)")
    ds = load_dataset(cfg.train.dataset)
    write_resolved(cfg, out)
    if args.stage == 1:
        _, history = train_stage1(ds, cfg.train, out, branch_cfg=cfg.model)
        history.write_csv(out / "history.csv")
        return 0
    ckpt = Path(args.ckpt) if args.ckpt else out / "stage1.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"stage-1 checkpoint required for stage 2, {ckpt} not found")
    _, history = train_stage2(ds, cfg.train, ckpt, out)
    history.write_csv(out / "history.csv", replace_stage=2)
    return 0


def _held_out(ds: Dataset) -> Dataset:
    _, val = split_train_val(ds)
    return val if len(val) else ds


def _export_labels(model: BranchModel, ds: Dataset, out: Path) -> Dict[str, List[float]]:
    """Predict every sample, write pred/gt label dirs, return BR3 hit rates per threshold."""
    k = dataset_config(ds).intrinsics()
    rects, boxes = model.predict(ds.crops, ds.bboxes)
    pred_dir, gt_dir = out / "pred_labels", out / "gt_labels"
    pred_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    for i, sid in enumerate(ds.ids):
        truth = Box3D(*ds.boxes[i])
        fb = frontal_bbox(k, truth)
        gt = record_from_box(truth, fb.box, truncated=fb.truncation)
        pred = record_from_box(boxes[i], fb.box, score=1.0)
        (gt_dir / f"{sid}.txt").write_text(serialize_labels([gt]), encoding="utf-8")
        (pred_dir / f"{sid}.txt").write_text(serialize_labels([pred]), encoding="utf-8")
    gts = [BevRect(*r) for r in ds.bev]
    return {"hit_rate": [iou_hit_rate(rects, gts, t) for t in IOU_THRESHOLDS]}


def _write_hit_rates(out: Path, thresholds: Sequence[float], rates: Sequence[float]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "hit_rates.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iou_thr", "hit_rate"])
        for thr, rate in zip(thresholds, rates):
            writer.writerow([repr(thr), repr(rate)])


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, {"seed": args.seed, "out": args.out})
    out = _out(args, cfg)
    thresholds = tuple(args.iou) if args.iou else IOU_THRESHOLDS
    tiers = tuple(Difficulty[t.upper()] for t in args.tier) if args.tier else TIERS
    if args.pred and args.gt:
        pred_dir, gt_dir = Path(args.pred), Path(args.gt)
        # only defined when every frame pairs one prediction with one ground truth
        rates = label_dir_hit_rates(pred_dir, gt_dir, IOU_THRESHOLDS, overlap=args.overlap)
        if rates is not None:
            _write_hit_rates(out, IOU_THRESHOLDS, rates)
    elif args.ckpt and args.dataset:
        model = load_checkpoint(args.ckpt).model
        hits = _export_labels(model, _held_out(load_dataset(args.dataset)), out)
        _write_hit_rates(out, IOU_THRESHOLDS, hits["hit_rate"])
        pred_dir, gt_dir = out / "pred_labels", out / "gt_labels"
    else:
        raise UsageError("eval needs --pred and --gt, or --ckpt and --dataset")
    table = evaluate_label_dirs(pred_dir, gt_dir, thresholds, tiers, overlap=args.overlap)
    write_ap_table(table, out)
    write_resolved(cfg, out)
    for c in table:
        sys.stdout.write(f"{c.tier.name.lower():<9} iou={c.iou_thr:.2f} ap={c.ap:.4f}\n")
    return 0


def cmd_render_bev(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, {"seed": args.seed, "out": args.out})
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.ckpt).model
    ds = _held_out(load_dataset(args.dataset))
    ds = ds.subset(range(min(max(args.n, 0), len(ds))))
    rects, _ = model.predict(ds.crops, ds.bboxes)
    for i, sid in enumerate(ds.ids):
        gt = BevRect(*ds.bev[i])
        write_image(render_overlay([rects[i]], [gt], cfg.grid), out / f"bev_{sid}.ppm")
        write_image(grid_to_image(rasterize_grid([rects[i]], cfg.grid)), out / f"grid_{sid}.pgm")
    write_resolved(cfg, out)
    log_event("render_done", out=str(out), images=2 * len(ds))
    return 0


def cmd_inspect_labels(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, {"seed": args.seed, "out": args.out})
    out = _out(args, cfg)
    root = Path(args.kitti_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    hist: Dict[str, Counter] = {}
    files = sorted(root.glob("*.txt"))
    for path in files:
        for r in read_label_file(path):
            hist.setdefault(r.class_name, Counter())[classify_difficulty(r).name.lower()] += 1
    summary: Dict[str, Any] = {
        "files": len(files),
        "classes": {c: dict(sorted(cnt.items())) for c, cnt in sorted(hist.items())},
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "labels_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    write_resolved(cfg, out)
    log_event("labels_inspected", dir=str(root), **summary)
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, {"seed": args.seed, "out": args.out})
    rng = np.random.default_rng(cfg.seed)
    bcfg = BranchConfig(
        feature_dim=4,
        crop_size=8,
        backbone_channels=[2, 3],
        br2_widths=[6, 6, 6, 256],
        br3_widths=[6, 6, 6, 6, 6, 6, 6, 4],
        br4_widths=[6, 6, 6, 6, 6, 6, 6, 8],
        dropout_p=0.0,
    )
    model = BranchModel(bcfg, rng)
    n = 2
    crops = rng.random((n, 1, bcfg.crop_size, bcfg.crop_size))
    bboxes = rng.uniform(-1.0, 1.0, (n, 4))
    res = composite_grad_check(
        model, crops, bboxes, rng.uniform(-1, 1, (n, 4)), rng.uniform(-1, 1, (n, 8)),
        max_params=400, rng=rng,
    )
    ok = res.max_rel_error <= GRAD_TOLERANCE
    log_event("grad_check", ok=ok, max_rel_error=res.max_rel_error, checked=res.checked,
              skipped=res.skipped)
    sys.stdout.write(f"max relative error {res.max_rel_error:.3e} ({res.checked} checked, "
                     f"{res.skipped} skipped at kinks)\n")
    return 0 if ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "render-bev": cmd_render_bev,
    "inspect-labels": cmd_inspect_labels,
    "grad-check": cmd_grad_check,
}


def main(argv: Optional[List[str]] = None) -> int:
    p = build_arg_parser()
    try:
        args = p.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{p.prog}: error: {exc}\n")
        return 1
    try:
        return COMMANDS[args.cmd](args)
    except UsageError as exc:
        sys.stderr.write(f"{p.prog} {args.cmd}: error: {exc}\n")
        return 1
    except (MonoBev3DError, OSError, ValueError, KeyError) as exc:
        log_event("error", action=args.cmd, error=str(exc))
        sys.stderr.write(f"{p.prog} {args.cmd}: {exc}\n")
        return 2


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())

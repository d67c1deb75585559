"""Detection scoring: greedy matching, precision/recall and 11-point AP.

Matching is pooled across frames. A detection whose best overlap above the
threshold is with an ignored ground truth (other difficulty tier, or
Ignored) is dropped rather than counted as a false positive.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import FrameMismatch, LengthMismatch
from .geometry import iou_axis_aligned
from .kitti_io import Difficulty, classify_difficulty, read_label_file
from .logger import log_event
from .overlap import load_overlap

IOU_THRESHOLDS = (0.5, 0.75, 0.9)
TIERS = (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)
RECALL_LEVELS = tuple(i / 10 for i in range(11))

IoUFn = Callable[[Any, Any], float]


@dataclass
class DetectionRecord:
    box: Any
    score: float = 1.0
    class_name: str = "Car"
    difficulty: Difficulty = Difficulty.EASY  # ground truth only


@dataclass
class PRCurve:
    points: List[Tuple[float, float]]  # (recall, precision) after each kept detection
    tp: int
    fp: int
    num_gt: int


@dataclass
class APCell:
    tier: Difficulty
    iou_thr: float
    ap: float
    num_gt: int
    num_det: int
    curve: PRCurve = field(repr=False, default_factory=lambda: PRCurve([], 0, 0, 0))


def match_detections(
    dets: Sequence[DetectionRecord],
    gts: Sequence[DetectionRecord],
    iou_thr: float,
    iou_fn: IoUFn = iou_axis_aligned,
    gt_ignored: Optional[Sequence[bool]] = None,
) -> List[Optional[bool]]:
    """Per-detection flags in input order: True (TP), False (FP) or None (dropped).

    Detections are processed by descending score, equal scores in input order.
    """
    ignored = list(gt_ignored) if gt_ignored is not None else [False] * len(gts)
    if len(ignored) != len(gts):
        raise LengthMismatch(f"{len(ignored)} ignore flags for {len(gts)} ground truths")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = [False] * len(gts)
    flags: List[Optional[bool]] = [False] * len(dets)
    for i in order:
        best, best_j = -1.0, -1
        hits_ignored = False
        for j, g in enumerate(gts):
            if used[j]:
                continue
            iou = iou_fn(dets[i].box, g.box)
            if ignored[j]:
                hits_ignored = hits_ignored or iou >= iou_thr
            elif iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thr:
            used[best_j] = True
            flags[i] = True
        elif hits_ignored:
            flags[i] = None
    return flags


def precision_recall_curve(flags: Sequence[Optional[bool]], num_gt: int) -> PRCurve:
    """Running (recall, precision); ``flags`` must already be in descending-score order."""
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    points = []
    tp = fp = 0
    for f in flags:
        if f is None:
            continue
        if f:
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt if num_gt else 0.0, tp / (tp + fp)))
    return PRCurve(points=points, tp=tp, fp=fp, num_gt=num_gt)


def ap_11point(curve: PRCurve) -> float:
    if curve.num_gt == 0:
        return 1.0 if not curve.points else 0.0
    total = 0.0
    for r in RECALL_LEVELS:
        total += max((p for rec, p in curve.points if rec >= r), default=0.0)
    return total / len(RECALL_LEVELS)


def evaluate_ap_table(
    dets_by_frame: Mapping[str, Sequence[DetectionRecord]],
    gts_by_frame: Mapping[str, Sequence[DetectionRecord]],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    tiers: Sequence[Difficulty] = TIERS,
    iou_fn: IoUFn = iou_axis_aligned,
    class_name: Optional[str] = "Car",
) -> List[APCell]:
    """AP for every (tier, threshold) cell; a tier admits ground truths of that tier or easier."""
    if set(dets_by_frame) != set(gts_by_frame):
        missing = sorted(set(dets_by_frame) ^ set(gts_by_frame))
        raise FrameMismatch(f"frames without a counterpart: {missing[:5]}")
    frames = sorted(gts_by_frame)

    def keep(r: DetectionRecord) -> bool:
        return class_name is None or r.class_name == class_name

    table: List[APCell] = []
    for tier in tiers:
        for thr in thresholds:
            pooled: List[Tuple[float, bool]] = []
            num_gt = 0
            for frame in frames:
                gts = [g for g in gts_by_frame[frame] if keep(g)]
                dets = [d for d in dets_by_frame[frame] if keep(d)]
                ignored = [g.difficulty > tier for g in gts]
                num_gt += sum(1 for x in ignored if not x)
                flags = match_detections(dets, gts, thr, iou_fn, ignored)
                pooled += [(d.score, f) for d, f in zip(dets, flags) if f is not None]
            pooled.sort(key=lambda sf: -sf[0])
            curve = precision_recall_curve([f for _, f in pooled], num_gt)
            table.append(APCell(Difficulty(tier), float(thr), ap_11point(curve), num_gt, len(pooled), curve))
    log_event(
        "eval_table",
        frames=len(frames),
        cells=[{"tier": c.tier.name.lower(), "iou_thr": c.iou_thr, "ap": c.ap} for c in table],
    )
    return table


def iou_hit_rate(dets: Sequence[Any], gts: Sequence[Any], thr: float, iou_fn: IoUFn = iou_axis_aligned) -> float:
    """Fraction of prediction/ground-truth pairs overlapping at least ``thr`` (0.0 when empty)."""
    if len(dets) != len(gts):
        raise LengthMismatch(f"{len(dets)} predictions for {len(gts)} ground truths")
    if not gts:
        return 0.0
    return sum(1 for d, g in zip(dets, gts) if iou_fn(d, g) >= thr) / len(gts)


def _label_frames(directory: Union[str, Path]) -> Dict[str, Path]:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    return {p.stem: p for p in sorted(root.glob("*.txt"))}


def evaluate_label_dirs(
    pred_dir: Union[str, Path],
    gt_dir: Union[str, Path],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    tiers: Sequence[Difficulty] = TIERS,
    overlap: str = "bev",
    class_name: str = "Car",
) -> List[APCell]:
    """Score KITTI label directories paired by file stem."""
    backend = load_overlap(overlap)
    preds, gts = _label_frames(pred_dir), _label_frames(gt_dir)
    if set(preds) != set(gts):
        missing = sorted(set(preds) ^ set(gts))
        raise FrameMismatch(f"label files without a counterpart: {missing[:5]}")

    dets_by_frame: Dict[str, List[DetectionRecord]] = {}
    gts_by_frame: Dict[str, List[DetectionRecord]] = {}
    for frame in sorted(gts):
        dets_by_frame[frame] = [
            DetectionRecord(backend.box_of(r), 1.0 if r.score is None else r.score, r.class_name)
            for r in read_label_file(preds[frame])
            if r.class_name == class_name
        ]
        gts_by_frame[frame] = [
            DetectionRecord(backend.box_of(r), 1.0, r.class_name, classify_difficulty(r))
            for r in read_label_file(gts[frame])
            if r.class_name == class_name
        ]
    return evaluate_ap_table(dets_by_frame, gts_by_frame, thresholds, tiers, backend.iou, class_name)


def label_dir_hit_rates(
    pred_dir: Union[str, Path],
    gt_dir: Union[str, Path],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    overlap: str = "bev",
    class_name: str = "Car",
) -> Optional[List[float]]:
    """Hit rate per threshold when every frame holds exactly one prediction and one ground truth.

    Returns None when some frame does not pair up one-to-one.
    """
    backend = load_overlap(overlap)
    preds, gts = _label_frames(pred_dir), _label_frames(gt_dir)
    if set(preds) != set(gts):
        missing = sorted(set(preds) ^ set(gts))
        raise FrameMismatch(f"label files without a counterpart: {missing[:5]}")
    dets: List[Any] = []
    truths: List[Any] = []
    for frame in sorted(gts):
        p = [r for r in read_label_file(preds[frame]) if r.class_name == class_name]
        g = [r for r in read_label_file(gts[frame]) if r.class_name == class_name]
        if len(p) != 1 or len(g) != 1:
            log_event("hit_rates_skipped", frame=frame, predictions=len(p), ground_truths=len(g))
            return None
        dets.append(backend.box_of(p[0]))
        truths.append(backend.box_of(g[0]))
    return [iou_hit_rate(dets, truths, thr, backend.iou) for thr in thresholds]


def _thr_token(thr: float) -> str:
    return f"{thr:.2f}".replace(".", "")


def write_ap_table(table: Sequence[APCell], out_dir: Union[str, Path]) -> Path:
    """Write ap_table.csv and one prcurve_<tier>_<thr>.csv per cell."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ap_table.csv"
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["tier", "iou_thr", "ap", "num_gt", "num_det"])
        for c in table:
            writer.writerow([c.tier.name.lower(), repr(c.iou_thr), repr(c.ap), c.num_gt, c.num_det])
    for c in table:
        with open(out / f"prcurve_{c.tier.name.lower()}_{_thr_token(c.iou_thr)}.csv", "w",
                  encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["recall", "precision"])
            for rec, prec in c.curve.points:
                writer.writerow([repr(rec), repr(prec)])
    return path

"""Two-stage training.

Stage 1 fits BR1..BR3 to the BEV corners. Stage 2 freezes them and fits BR4
to the 3D targets plus a depth penalty tying BR4's depth to the centre of the
BEV rectangle predicted by the frozen BR3.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import EmptyDataset, FreezeViolation, ShapeMismatch
from .evaluation import iou_hit_rate
from .geometry import BevRect, Box3D, TargetVector, canonicalize_rect, iou_axis_aligned, wrap_angle
from .logger import log_event
from .model import BranchConfig, BranchModel, decode_box, targets_for
from .nn import mse_loss
from .optim import OptimizerState, lr_schedule, sgd_momentum_step
from .synthdata import Dataset, augment, split_train_val

FROZEN_IN_STAGE2 = ("br1", "br2", "br3")
HIT_THRESHOLDS = (0.5, 0.75, 0.9)
EVAL_BATCH = 256


@dataclass
class TrainConfig:
    epochs_stage1: int = 50
    epochs_stage2: int = 40
    batch_size: int = 64
    lr0: float = 0.01
    decay_period: Optional[int] = None  # None: a quarter of the stage's epochs
    momentum: float = 0.9
    lambda_depth: float = 0.1
    seed: int = 0
    eval_every: int = 5
    augment: bool = True
    dataset: str = ""

    def __post_init__(self) -> None:
        if self.epochs_stage1 <= 0 or self.epochs_stage2 <= 0:
            raise ValueError("epoch counts must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_depth < 0:
            raise ValueError("lambda_depth must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def period(self, epochs: int) -> int:
        if self.decay_period is not None:
            return int(self.decay_period)
        return max(1, round(epochs * 0.25))


@dataclass
class HistoryRow:
    stage: int
    epoch: int
    lr: float
    loss_total: float
    loss_loc: float = math.nan
    loss_dim: float = math.nan
    loss_yaw: float = math.nan
    loss_depth: float = math.nan
    val_mean_iou: float = math.nan
    val_hit50: float = math.nan
    val_hit75: float = math.nan
    val_hit90: float = math.nan
    val_med_z_err: float = math.nan
    val_med_yaw_deg: float = math.nan


HISTORY_COLUMNS = tuple(f.name for f in fields(HistoryRow))


class TrainHistory:
    def __init__(self, rows: Optional[List[HistoryRow]] = None) -> None:
        self.rows: List[HistoryRow] = rows or []

    def append(self, row: HistoryRow) -> None:
        if self.rows and self.rows[-1].stage == row.stage and row.epoch <= self.rows[-1].epoch:
            raise ValueError(f"history epochs must increase, got {row.epoch} after {self.rows[-1].epoch}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            writer.writerow([_cell(getattr(r, c)) for c in HISTORY_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path: Union[str, Path], replace_stage: Optional[int] = None) -> Path:
        """Write the history; with ``replace_stage``, keep other stages' rows already in ``path``."""
        path = Path(path)
        if replace_stage is not None and path.exists():
            lines = path.read_text(encoding="utf-8").splitlines(keepends=True)[1:]
            kept = [ln for ln in lines if ln.split(",", 1)[0] != str(replace_stage)]
            header = TrainHistory().to_csv()
            path.write_text(header + "".join(kept) + self.to_csv(header=False), encoding="utf-8")
        else:
            path.write_text(self.to_csv(), encoding="utf-8")
        return path


def _cell(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


@dataclass
class EpochMetrics:
    mean_iou: float
    hit50: float
    hit75: float
    hit90: float
    med_z_err: float = math.nan
    med_x_err: float = math.nan
    med_dim_err: float = math.nan
    med_yaw_deg: float = math.nan


def evaluate_epoch(model: BranchModel, val: Dataset, stage: int = 1) -> EpochMetrics:
    """Eval-mode BEV IoU metrics, plus median 3D errors when ``stage`` is 2."""
    if len(val) == 0:
        raise EmptyDataset("validation set is empty")
    heads = ("bev", "target") if stage == 2 else ("bev",)
    bev_out, tgt_out = [], []
    for start in range(0, len(val), EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        out = model.forward(val.crops[sl], val.bboxes[sl], train=False, heads=heads)
        bev_out.append(out.bev)
        if stage == 2:
            tgt_out.append(out.target)
    preds = [canonicalize_rect(r) for r in np.concatenate(bev_out)]
    gts = [BevRect(*r) for r in val.bev]
    ious = [iou_axis_aligned(p, g) for p, g in zip(preds, gts)]
    hits = [iou_hit_rate(preds, gts, t) for t in HIT_THRESHOLDS]
    metrics = EpochMetrics(float(np.mean(ious)), *hits)
    if stage == 2:
        boxes = [decode_box(row) for row in np.concatenate(tgt_out)]
        truth = [Box3D(*row) for row in val.boxes]
        metrics.med_z_err = float(np.median([abs(b.z - t.z) for b, t in zip(boxes, truth)]))
        metrics.med_x_err = float(np.median([abs(b.x - t.x) for b, t in zip(boxes, truth)]))
        metrics.med_dim_err = float(np.median([
            (abs(b.w - t.w) + abs(b.l - t.l) + abs(b.h - t.h)) / 3.0 for b, t in zip(boxes, truth)
        ]))
        metrics.med_yaw_deg = float(np.median([
            abs(math.degrees(wrap_angle(b.yaw - t.yaw))) for b, t in zip(boxes, truth)
        ]))
    return metrics


def depth_penalty(pred_bev, pred_target) -> float:
    """(tz - z_bev)^2 with z_bev the centre depth of the BEV rect, both normalized."""
    bev = pred_bev.as_tuple() if isinstance(pred_bev, BevRect) else tuple(pred_bev)
    tz = pred_target.tz if isinstance(pred_target, TargetVector) else float(pred_target[2])
    r = tz - (bev[1] + bev[3]) / 2.0
    return r * r


def stage2_loss(
    pred: np.ndarray, target: np.ndarray, bev: np.ndarray, lambda_depth: float
) -> Tuple[float, Dict[str, float], np.ndarray]:
    """Target MSE split into location/dimension/yaw parts plus the weighted depth penalty.

    ``bev`` is treated as a constant; the returned gradient is w.r.t. ``pred`` only.
    """
    if pred.shape != target.shape or bev.shape != (pred.shape[0], 4):
        raise ShapeMismatch(f"pred {pred.shape}, target {target.shape}, bev {bev.shape}")
    n = pred.shape[0]
    diff = pred - target
    sq = diff * diff
    parts = {
        "loc": float(np.sum(sq[:, 0:3]) / n),
        "dim": float(np.sum(sq[:, 3:6]) / n),
        "yaw": float(np.sum(sq[:, 6:]) / n),
    }
    r = pred[:, 2] - (bev[:, 1] + bev[:, 3]) / 2.0
    parts["depth"] = float(np.sum(r * r) / n)
    grad = 2.0 * diff / n
    if lambda_depth != 0.0:
        grad[:, 2] += lambda_depth * 2.0 * r / n
    total = parts["loc"] + parts["dim"] + parts["yaw"] + lambda_depth * parts["depth"]
    return total, parts, grad


def _batch(ds: Dataset, idx: np.ndarray, rng: np.random.Generator, use_augment: bool):
    if not use_augment:
        return ds.crops[idx], ds.bboxes[idx], ds.bev[idx], ds.targets[idx]
    samples = [augment(ds.sample(int(i)), rng) for i in idx]
    return (
        np.stack([s.crop for s in samples])[:, None],
        np.array([s.bbox_norm.as_tuple() for s in samples]),
        np.array([s.bev_rect.as_tuple() for s in samples]),
        np.stack([s.target.as_array() for s in samples]),
    )


def _split(dataset: Dataset, val: Optional[Dataset]) -> Tuple[Dataset, Dataset]:
    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    if val is not None:
        return dataset, val
    train, held_out = split_train_val(dataset)
    if len(train) == 0:
        raise EmptyDataset("no training samples after the train/val split")
    return train, (held_out if len(held_out) else train)


def _due(epoch: int, epochs: int, cfg: TrainConfig) -> bool:
    return (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == epochs


_RESUME_NOTE = {"optimizer_velocity": "not stored; momentum restarts at zero on resume"}


def _run_stage(
    stage: int,
    model: BranchModel,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    out: Path,
    rng: np.random.Generator,
    start_epoch: int,
) -> Tuple[Path, TrainHistory]:
    epochs = cfg.epochs_stage1 if stage == 1 else cfg.epochs_stage2
    period = cfg.period(epochs)
    state = OptimizerState(lr=cfg.lr0, momentum=cfg.momentum, epoch=start_epoch)
    history = TrainHistory()
    out_dim = model.cfg.out_dim
    n = len(train)
    for epoch in range(start_epoch, epochs):
        state.epoch = epoch
        state.lr = lr_schedule(epoch, cfg.lr0, period)
        perm = rng.permutation(n)
        sums = {"total": 0.0, "loc": 0.0, "dim": 0.0, "yaw": 0.0, "depth": 0.0}
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            crops, bboxes, bev_t, tgt_t = _batch(train, idx, rng, cfg.augment)
            if stage == 1:
                pred = model.forward(crops, bboxes, train=True, rng=rng, heads=("bev",))
                loss, g = mse_loss(pred.bev, bev_t)
                model.zero_grad()
                model.backward(d_bev=g)
                parts: Dict[str, float] = {}
            else:
                pred = model.forward(crops, bboxes, train=True, rng=rng)
                loss, parts, g = stage2_loss(
                    pred.target, targets_for(tgt_t, out_dim), pred.bev, cfg.lambda_depth
                )
                model.zero_grad()
                model.backward(d_target=g)
            sgd_momentum_step(model.named_parameters(), None, state)
            sums["total"] += loss * len(idx)
            for k, v in parts.items():
                sums[k] += v * len(idx)

        row = HistoryRow(stage=stage, epoch=epoch, lr=state.lr, loss_total=sums["total"] / n)
        if stage == 2:
            row.loss_loc, row.loss_dim = sums["loc"] / n, sums["dim"] / n
            row.loss_yaw, row.loss_depth = sums["yaw"] / n, sums["depth"] / n
        if _due(epoch, epochs, cfg):
            m = evaluate_epoch(model, val, stage)
            row.val_mean_iou, row.val_hit50, row.val_hit75, row.val_hit90 = (
                m.mean_iou, m.hit50, m.hit75, m.hit90,
            )
            row.val_med_z_err, row.val_med_yaw_deg = m.med_z_err, m.med_yaw_deg
            save_checkpoint(
                model, out / f"stage{stage}_epoch{epoch + 1:04d}.ckpt",
                epoch=epoch + 1, stage=stage, rng=rng, extra=_RESUME_NOTE,
            )
        history.append(row)
        log_event("train_epoch", **asdict(row))

    final = save_checkpoint(
        model, out / f"stage{stage}.ckpt", epoch=epochs, stage=stage, rng=rng, extra=_RESUME_NOTE
    )
    return final, history


def train_stage1(
    dataset: Dataset,
    cfg: Optional[TrainConfig] = None,
    out_dir: Union[str, Path] = ".",
    branch_cfg: Optional[BranchConfig] = None,
    val: Optional[Dataset] = None,
    resume: Optional[Checkpoint] = None,
) -> Tuple[Path, TrainHistory]:
    """Fit BR1 (when trainable), BR2 and BR3 on the BEV corner MSE."""
    cfg = cfg or TrainConfig()
    train, val = _split(dataset, val)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        model, rng, start = resume.model, resume.rng(), resume.epoch
    else:
        rng = np.random.default_rng(cfg.seed)
        model, start = BranchModel(branch_cfg or BranchConfig(), rng), 0
    model.set_trainable("br1", model.cfg.backbone_trainable)
    model.set_trainable("br2", True)
    model.set_trainable("br3", True)
    model.set_trainable("br4", False)
    return _run_stage(1, model, train, val, cfg, out, rng, start)


def train_stage2(
    dataset: Dataset,
    cfg: Optional[TrainConfig] = None,
    stage1_ckpt: Union[str, Path, Checkpoint] = "stage1.ckpt",
    out_dir: Union[str, Path] = ".",
    val: Optional[Dataset] = None,
) -> Tuple[Path, TrainHistory]:
    """Fit BR4 with BR1..BR3 frozen; raises FreezeViolation if they moved."""
    cfg = cfg or TrainConfig()
    train, val = _split(dataset, val)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = stage1_ckpt if isinstance(stage1_ckpt, Checkpoint) else load_checkpoint(stage1_ckpt)
    model: BranchModel = ckpt.model
    if ckpt.stage == 2:
        rng, start = ckpt.rng(), ckpt.epoch
    else:
        rng, start = np.random.default_rng(cfg.seed + 1), 0
    for b in FROZEN_IN_STAGE2:
        model.set_trainable(b, False)
    model.set_trainable("br4", True)

    before = model.branch_digest(FROZEN_IN_STAGE2)
    final, history = _run_stage(2, model, train, val, cfg, out, rng, start)
    after = model.branch_digest(FROZEN_IN_STAGE2)
    if before != after:
        raise FreezeViolation(f"frozen branches changed during stage 2 ({before} -> {after})")
    log_event("freeze_verified", sha256=after, branches=list(FROZEN_IN_STAGE2))
    return final, history


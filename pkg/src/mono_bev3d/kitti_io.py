"""KITTI object label and calibration files.

Label row layout (devkit order)::

    type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Sequence

from .errors import InvalidBbox, MalformedLine, MalformedMatrix, MissingP2, OutOfImage
from .geometry import Box2D, Box3D, CameraIntrinsics, wrap_angle


DONT_CARE = "DontCare"


class Difficulty(IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# (min bbox height px, max occlusion, max truncation) per tier, devkit convention
DIFFICULTY_TABLE = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class LabelRecord:
    class_name: str
    truncated: float
    occluded: int
    alpha: float
    bbox: Box2D
    h: float
    w: float
    l: float  # noqa: E741
    x: float
    y: float
    z: float
    rotation_y: float
    score: Optional[float] = None

    def to_box3d(self) -> Box3D:
        return Box3D(self.x, self.y, self.z, self.w, self.l, self.h, wrap_angle(self.rotation_y))


def _floats(tokens: Sequence[str], lineno: Optional[int]) -> List[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise MalformedLine(f"{_where(lineno)}non-numeric field: {exc}") from None
    if not all(math.isfinite(v) for v in vals):
        raise MalformedLine(f"{_where(lineno)}non-finite field")
    return vals


def _where(lineno: Optional[int]) -> str:
    return f"line {lineno}: " if lineno is not None else ""


def parse_label_line(text: str, lineno: Optional[int] = None) -> LabelRecord:
    tokens = text.split()
    if len(tokens) not in (15, 16):
        raise MalformedLine(f"{_where(lineno)}expected 15 or 16 fields, got {len(tokens)}")
    class_name = tokens[0]
    vals = _floats(tokens[1:], lineno)
    occluded_f = vals[1]
    if occluded_f != int(occluded_f):
        raise MalformedLine(f"{_where(lineno)}occluded must be an integer, got {tokens[2]}")
    occluded = int(occluded_f)
    bbox = Box2D(*vals[3:7])
    h, w, l = vals[7:10]
    if class_name != DONT_CARE:
        if occluded not in (0, 1, 2, 3):
            raise MalformedLine(f"{_where(lineno)}occluded must be in 0..3, got {occluded}")
        if min(h, w, l) < 0:
            raise MalformedLine(f"{_where(lineno)}negative dimensions {h, w, l}")
        if not (bbox.x1 < bbox.x2 and bbox.y1 < bbox.y2):
            raise InvalidBbox(f"{_where(lineno)}degenerate bbox {bbox.as_tuple()}")
    return LabelRecord(
        class_name=class_name,
        truncated=vals[0],
        occluded=occluded,
        alpha=vals[2],
        bbox=bbox,
        h=h,
        w=w,
        l=l,
        x=vals[10],
        y=vals[11],
        z=vals[12],
        rotation_y=vals[13],
        score=vals[14] if len(vals) == 15 else None,
    )


def serialize_label(r: LabelRecord) -> str:
    fields = [r.class_name, f"{r.truncated:.2f}", str(int(r.occluded)), f"{r.alpha:.2f}"]
    fields += [f"{v:.2f}" for v in r.bbox.as_tuple()]
    fields += [f"{v:.2f}" for v in (r.h, r.w, r.l, r.x, r.y, r.z, r.rotation_y)]
    if r.score is not None:
        fields.append(f"{r.score:.2f}")
    return " ".join(fields)


def parse_label_file(text: str) -> List[LabelRecord]:
    records = []
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            records.append(parse_label_line(line, lineno=i))
    return records


def serialize_labels(records: Sequence[LabelRecord]) -> str:
    return "".join(serialize_label(r) + "\n" for r in records)


def read_label_file(path: str | Path) -> List[LabelRecord]:
    return parse_label_file(Path(path).read_text(encoding="utf-8"))


def parse_calib(text: str, image_w: int = 1242, image_h: int = 375) -> CameraIntrinsics:
    """Intrinsics from the ``P2:`` row; the translation column is ignored."""
    for line in text.splitlines():
        if not line.startswith("P2:"):
            continue
        tokens = line[3:].split()
        if len(tokens) != 12:
            raise MalformedMatrix(f"P2 needs 12 values, got {len(tokens)}")
        try:
            p = [float(t) for t in tokens]
        except ValueError as exc:
            raise MalformedMatrix(f"P2 has a non-numeric value: {exc}") from None
        return CameraIntrinsics(fx=p[0], fy=p[5], cx=p[2], cy=p[6], image_w=image_w, image_h=image_h)
    raise MissingP2("calibration text has no P2: row")


def classify_difficulty(r: LabelRecord) -> Difficulty:
    if r.class_name == DONT_CARE:
        return Difficulty.IGNORED
    height = r.bbox.y2 - r.bbox.y1
    for tier in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        min_h, max_occ, max_trunc = DIFFICULTY_TABLE[tier]
        if height >= min_h and r.occluded <= max_occ and r.truncated <= max_trunc:
            return tier
    return Difficulty.IGNORED


def normalize_bbox(b: Box2D, image_w: float, image_h: float) -> Box2D:
    if b.x1 < 0 or b.y1 < 0 or b.x2 > image_w or b.y2 > image_h:
        raise OutOfImage(f"bbox {b.as_tuple()} exceeds {image_w}x{image_h}")
    return Box2D(
        2.0 * b.x1 / image_w - 1.0,
        2.0 * b.y1 / image_h - 1.0,
        2.0 * b.x2 / image_w - 1.0,
        2.0 * b.y2 / image_h - 1.0,
    )


def denormalize_bbox(b: Box2D, image_w: float, image_h: float) -> Box2D:
    return Box2D(
        (b.x1 + 1.0) * image_w / 2.0,
        (b.y1 + 1.0) * image_h / 2.0,
        (b.x2 + 1.0) * image_w / 2.0,
        (b.y2 + 1.0) * image_h / 2.0,
    )


def record_from_box(
    box: Box3D,
    bbox: Box2D,
    truncated: float = 0.0,
    occluded: int = 0,
    class_name: str = "Car",
    score: Optional[float] = None,
) -> LabelRecord:
    alpha = wrap_angle(box.yaw - math.atan2(box.x, box.z))
    return LabelRecord(
        class_name=class_name,
        truncated=truncated,
        occluded=occluded,
        alpha=alpha,
        bbox=bbox,
        h=box.h,
        w=box.w,
        l=box.l,
        x=box.x,
        y=box.y,
        z=box.z,
        rotation_y=box.yaw,
        score=score,
    )


def read_split_index(path: str | Path) -> List[str]:
    """Frame ids, one per line, of an externally supplied train/val split."""
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]

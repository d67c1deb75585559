from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Protocol

from .geometry import (
    BevQuad,
    BevRect,
    bev_axis_aligned_normalized,
    bev_footprint,
    iou_axis_aligned,
    iou_rotated,
)
from .kitti_io import LabelRecord


class OverlapBackend(Protocol):
    """Matching geometry for detection scoring: how a label becomes a box, and its IoU."""

    name: str

    def box_of(self, record: LabelRecord) -> Any:
        ...

    def iou(self, a: Any, b: Any) -> float:
        ...


def _footprint(record: LabelRecord) -> Optional[BevQuad]:
    # zero-sized labels are legal; they occupy nothing and overlap nothing
    if min(record.w, record.l, record.h) <= 0:
        return None
    return bev_footprint(record.to_box3d())


@dataclass
class BevRotatedOverlap:
    """Rotated ground-plane footprints (default)."""

    name: str = "bev"

    def box_of(self, record: LabelRecord) -> Optional[BevQuad]:
        return _footprint(record)

    def iou(self, a: Optional[BevQuad], b: Optional[BevQuad]) -> float:
        if a is None or b is None:
            return 0.0
        return iou_rotated(a, b)


@dataclass
class BevAlignedOverlap:
    """Axis-aligned rectangles enclosing the footprints, as regressed by BR3."""

    name: str = "bev-aligned"

    def box_of(self, record: LabelRecord) -> Optional[BevRect]:
        quad = _footprint(record)
        return None if quad is None else bev_axis_aligned_normalized(quad, clamp=True)

    def iou(self, a: Optional[BevRect], b: Optional[BevRect]) -> float:
        if a is None or b is None:
            return 0.0
        return iou_axis_aligned(a, b)


@dataclass
class FrontalOverlap:
    """Image-plane 2D boxes."""

    name: str = "frontal"

    def box_of(self, record: LabelRecord) -> Any:
        return record.bbox

    def iou(self, a: Any, b: Any) -> float:
        return iou_axis_aligned(a, b)


OVERLAP_KINDS = ("bev", "bev-aligned", "frontal")


def load_overlap(kind: str) -> OverlapBackend:
    kind = kind.lower()
    if kind in ("bev", "bev-rotated"):
        return BevRotatedOverlap()
    if kind in ("bev-aligned", "aligned"):
        return BevAlignedOverlap()
    if kind in ("frontal", "2d"):
        return FrontalOverlap()
    raise ValueError(f"Unknown overlap kind: {kind}")

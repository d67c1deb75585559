"""Bird's-eye-view occupancy grids, overlays and binary PGM/PPM images."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .errors import UnsupportedFormat
from .geometry import BevRect, X_RANGE, Z_RANGE, denormalize_bev


BACKGROUND = (16, 16, 16)
GT_COLOR = (255, 0, 0)
PRED_COLOR = (0, 0, 255)


@dataclass
class GridConfig:
    grid_width: int = 200
    grid_height: int = 250
    x_min: float = X_RANGE[0]
    x_max: float = X_RANGE[1]
    z_min: float = Z_RANGE[0]
    z_max: float = Z_RANGE[1]

    @property
    def resolution(self) -> float:
        return (self.x_max - self.x_min) / self.grid_width

    def __post_init__(self) -> None:
        if self.grid_width <= 0 or self.grid_height <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.x_max <= self.x_min or self.z_max <= self.z_min:
            raise ValueError("grid extent must be non-empty")


@dataclass
class GridMap:
    """Occupancy cells, row 0 at the far edge (z_max) so the map reads like a top view."""

    width: int
    height: int
    resolution: float
    extent: Tuple[float, float, float, float]  # x_min, x_max, z_min, z_max
    cells: np.ndarray  # (height, width) uint8, 0 free / 1 occupied


def _cell_range(lo: float, hi: float, origin: float, step: float, count: int) -> Tuple[int, int]:
    """Indices [i0, i1) of cells whose centers origin + (i + 0.5) * step lie in [lo, hi]."""
    i0 = math.ceil((lo - origin) / step - 0.5)
    i1 = math.floor((hi - origin) / step - 0.5) + 1
    return max(0, i0), min(count, i1)


def _rect_cells(r: BevRect, cfg: GridConfig) -> Tuple[int, int, int, int]:
    """Row/column bounds (r0, r1, c0, c1) of a rect, rows counted from the far edge."""
    x1, z1, x2, z2 = denormalize_bev(r)
    x1, x2 = min(x1, x2), max(x1, x2)
    z1, z2 = min(z1, z2), max(z1, z2)
    dx = (cfg.x_max - cfg.x_min) / cfg.grid_width
    dz = (cfg.z_max - cfg.z_min) / cfg.grid_height
    c0, c1 = _cell_range(x1, x2, cfg.x_min, dx, cfg.grid_width)
    j0, j1 = _cell_range(z1, z2, cfg.z_min, dz, cfg.grid_height)
    # z index j maps to row height - 1 - j
    return cfg.grid_height - j1, cfg.grid_height - j0, c0, c1


def rasterize_grid(rects: Sequence[BevRect], cfg: GridConfig | None = None) -> GridMap:
    cfg = cfg or GridConfig()
    cells = np.zeros((cfg.grid_height, cfg.grid_width), dtype=np.uint8)
    for r in rects:
        r0, r1, c0, c1 = _rect_cells(r, cfg)
        if r0 < r1 and c0 < c1:
            cells[r0:r1, c0:c1] = 1
    return GridMap(
        width=cfg.grid_width,
        height=cfg.grid_height,
        resolution=cfg.resolution,
        extent=(cfg.x_min, cfg.x_max, cfg.z_min, cfg.z_max),
        cells=cells,
    )


def grid_to_image(grid: GridMap) -> np.ndarray:
    return (grid.cells * 255).astype(np.uint8)


def _draw_outline(img: np.ndarray, r: BevRect, cfg: GridConfig, color: Tuple[int, int, int]) -> None:
    r0, r1, c0, c1 = _rect_cells(r, cfg)
    if r0 >= r1 or c0 >= c1:
        # smaller than a cell: mark the cell under the center, if on the map
        x1, z1, x2, z2 = denormalize_bev(r)
        cx, cz = (x1 + x2) / 2.0, (z1 + z2) / 2.0
        col = math.floor((cx - cfg.x_min) / (cfg.x_max - cfg.x_min) * cfg.grid_width)
        j = math.floor((cz - cfg.z_min) / (cfg.z_max - cfg.z_min) * cfg.grid_height)
        if 0 <= col < cfg.grid_width and 0 <= j < cfg.grid_height:
            img[cfg.grid_height - 1 - j, col] = color
        return
    img[r0, c0:c1] = color
    img[r1 - 1, c0:c1] = color
    img[r0:r1, c0] = color
    img[r0:r1, c1 - 1] = color


def render_overlay(
    pred: Sequence[BevRect], gt: Sequence[BevRect], cfg: GridConfig | None = None
) -> np.ndarray:
    """RGB raster: ground truth outlined in red, then predictions in blue on top."""
    cfg = cfg or GridConfig()
    img = np.empty((cfg.grid_height, cfg.grid_width, 3), dtype=np.uint8)
    img[...] = BACKGROUND
    for r in gt:
        _draw_outline(img, r, cfg, GT_COLOR)
    for r in pred:
        _draw_outline(img, r, cfg, PRED_COLOR)
    return img


def _to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def write_image(image: np.ndarray, path: str | Path, fmt: str | None = None) -> None:
    """Binary PGM (P5) for (H, W) images, PPM (P6) for (H, W, 3); 8-bit, no header comments.

    Float images are taken to be in [0, 1].
    """
    arr = _to_uint8(np.asarray(image))
    if fmt is None:
        fmt = "PPM" if arr.ndim == 3 else "PGM"
    fmt = fmt.upper()
    if fmt == "PGM":
        if arr.ndim != 2:
            raise UnsupportedFormat(f"PGM needs a 2-D image, got shape {arr.shape}")
        magic = b"P5"
    elif fmt == "PPM":
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise UnsupportedFormat(f"PPM needs an (H, W, 3) image, got shape {arr.shape}")
        magic = b"P6"
    else:
        raise UnsupportedFormat(f"unsupported image format {fmt!r}")
    h, w = arr.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnsupportedFormat(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: only 8-bit images are supported")
    if magic == b"P5":
        shape: Tuple[int, ...] = (h, w)
    elif magic == b"P6":
        shape = (h, w, 3)
    else:
        raise UnsupportedFormat(f"{path}: unsupported magic {magic!r}")
    raster = np.frombuffer(data, dtype=np.uint8, count=int(np.prod(shape)), offset=pos)
    return raster.reshape(shape).copy()

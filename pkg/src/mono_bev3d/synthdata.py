"""Synthetic vehicle scenes standing in for real front-view imagery.

Objects are sampled from KITTI-like pose/size distributions, rendered as small
grayscale crops whose shading depends on depth and on which box face looks at
the camera, and written as an on-disk dataset (index.csv + PGM crops +
manifest.json).
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bev_render import read_image, write_image
from .errors import CannotPlace, EmptyDataset
from .geometry import (
    BevRect,
    Box2D,
    Box3D,
    CameraIntrinsics,
    TargetVector,
    bev_axis_aligned_normalized,
    bev_footprint,
    box_corners_3d,
    frontal_bbox,
    iou_rotated,
    normalize_targets,
    project_points,
    wrap_angle,
)
from .kitti_io import Difficulty, classify_difficulty, normalize_bbox, record_from_box
from .logger import log_event


FORMAT_VERSION = 1

INDEX_COLUMNS = (
    ["sample_id", "crop_path"]
    + ["bbox_x1", "bbox_y1", "bbox_x2", "bbox_y2"]
    + ["bev_x1", "bev_z1", "bev_x2", "bev_z2"]
    + ["tx", "ty", "tz", "tw", "tl", "th", "tsin", "tcos"]
    + ["x", "y", "z", "w", "l", "h", "yaw"]
    + ["difficulty"]
)

# faces as corner indices into box_corners_3d
_FACES = (
    (0, 1, 2, 3),
    (4, 5, 6, 7),
    (0, 1, 5, 4),
    (1, 2, 6, 5),
    (2, 3, 7, 6),
    (3, 0, 4, 7),
)
_EDGES = tuple((i, (i + 1) % 4) for i in range(4)) + tuple(
    (4 + i, 4 + (i + 1) % 4) for i in range(4)
) + tuple((i, i + 4) for i in range(4))

AUGMENT_PROB = 0.25


@dataclass
class SynthConfig:
    n: int = 5000
    seed: int = 0
    crop_size: int = 32
    min_objects: int = 1
    max_objects: int = 3
    fx: float = 721.5
    fy: float = 721.5
    image_w: int = 1242
    image_h: int = 375
    max_attempts: int = 100
    # pose/size distributions
    depth_min: float = 5.0
    depth_max: float = 95.0
    y_mean: float = 1.65
    y_std: float = 0.05
    w_mean: float = 1.6
    w_std: float = 0.1
    l_mean: float = 3.9
    l_std: float = 0.4
    h_mean: float = 1.5
    h_std: float = 0.1
    max_bev_overlap: float = 0.05

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.fx,
            fy=self.fy,
            cx=self.image_w / 2.0,
            cy=self.image_h / 2.0,
            image_w=self.image_w,
            image_h=self.image_h,
        )


@dataclass
class Scene:
    intrinsics: CameraIntrinsics
    objects: List[Box3D]
    seed: int


@dataclass
class Sample:
    crop: np.ndarray  # (crop_size, crop_size), values in [0, 1]
    bbox_norm: Box2D
    bev_rect: BevRect
    target: TargetVector
    box: Box3D
    difficulty: Difficulty = Difficulty.EASY
    sample_id: str = ""


@dataclass
class Dataset:
    ids: List[str]
    crops: np.ndarray  # (N, 1, S, S)
    bboxes: np.ndarray  # (N, 4) normalized
    bev: np.ndarray  # (N, 4)
    targets: np.ndarray  # (N, 8)
    boxes: np.ndarray  # (N, 7)
    difficulty: np.ndarray  # (N,) int
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            crops=self.crops[idx],
            bboxes=self.bboxes[idx],
            bev=self.bev[idx],
            targets=self.targets[idx],
            boxes=self.boxes[idx],
            difficulty=self.difficulty[idx],
            manifest=self.manifest,
        )

    def sample(self, i: int) -> Sample:
        return Sample(
            crop=self.crops[i, 0],
            bbox_norm=Box2D(*self.bboxes[i]),
            bev_rect=BevRect(*self.bev[i]),
            target=TargetVector.from_array(self.targets[i]),
            box=Box3D(*self.boxes[i]),
            difficulty=Difficulty(int(self.difficulty[i])),
            sample_id=self.ids[i],
        )

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], manifest: Optional[dict] = None) -> "Dataset":
        if not samples:
            raise EmptyDataset("no samples")
        return cls(
            ids=[s.sample_id for s in samples],
            crops=np.stack([s.crop for s in samples])[:, None].astype(np.float64),
            bboxes=np.array([s.bbox_norm.as_tuple() for s in samples], dtype=np.float64),
            bev=np.array([s.bev_rect.as_tuple() for s in samples], dtype=np.float64),
            targets=np.stack([s.target.as_array() for s in samples]),
            boxes=np.array([s.box.as_tuple() for s in samples], dtype=np.float64),
            difficulty=np.array([int(s.difficulty) for s in samples], dtype=np.int64),
            manifest=manifest or {},
        )


def _draw_box(rng: np.random.Generator, k: CameraIntrinsics, cfg: SynthConfig) -> Box3D:
    z = rng.uniform(cfg.depth_min, cfg.depth_max)
    # keep the center inside the horizontal field of view
    x_lo = max(-40.0, -k.cx * z / k.fx)
    x_hi = min(40.0, (k.image_w - k.cx) * z / k.fx)
    x = rng.uniform(x_lo, x_hi)
    y = float(np.clip(cfg.y_mean + rng.normal(0.0, cfg.y_std), 0.0, 4.0))
    w = float(np.clip(rng.normal(cfg.w_mean, cfg.w_std), 0.5, 3.0))
    l = float(np.clip(rng.normal(cfg.l_mean, cfg.l_std), 1.0, 7.0))  # noqa: E741
    h = float(np.clip(rng.normal(cfg.h_mean, cfg.h_std), 0.5, 3.0))
    yaw = wrap_angle(rng.uniform(-math.pi, math.pi))
    return Box3D(float(x), y, float(z), w, l, h, yaw)


def _placeable(k: CameraIntrinsics, b: Box3D) -> bool:
    try:
        normalize_targets(b)
        bev_axis_aligned_normalized(bev_footprint(b))
        frontal_bbox(k, b)
    except ValueError:
        return False
    return True


def sample_scene(rng: np.random.Generator, cfg: SynthConfig, seed: int = 0) -> Scene:
    k = cfg.intrinsics()
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: List[Box3D] = []
    for _ in range(count):
        for attempt in range(cfg.max_attempts):
            b = _draw_box(rng, k, cfg)
            if not _placeable(k, b):
                continue
            fp = bev_footprint(b)
            if any(iou_rotated(fp, bev_footprint(o)) > cfg.max_bev_overlap for o in objects):
                continue
            objects.append(b)
            if attempt:
                log_event("scene_resampled", seed=seed, object=len(objects), attempts=attempt + 1)
            break
        else:
            raise CannotPlace(
                f"could not place object {len(objects) + 1} of {count} after {cfg.max_attempts} attempts"
            )
    return Scene(intrinsics=k, objects=objects, seed=seed)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise in (u, v)."""
    pts = sorted(set(map(tuple, np.round(points, 12).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64)

    def cross(o, a, b) -> float:
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def _inside_convex(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    if len(poly) < 3:
        return np.zeros(u.shape, dtype=bool)
    signs = []
    for (x0, y0), (x1, y1) in zip(poly, np.roll(poly, -1, axis=0)):
        signs.append((x1 - x0) * (v - y0) - (y1 - y0) * (u - x0))
    s = np.stack(signs)
    return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def render_crop(
    k: CameraIntrinsics,
    b: Box3D,
    crop_size: int = 32,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Grayscale crop over the (clipped) frontal bbox.

    Silhouette intensity 0.9 * (1 - z / 100), the face turned most toward the
    camera +0.2, edges 1.0, background uniform noise in [0, 0.1].
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    window = frontal_bbox(k, b).box
    corners = box_corners_3d(b)
    uv = project_points(k, corners)

    step_u = window.width / crop_size
    step_v = window.height / crop_size
    centers = np.arange(crop_size) + 0.5
    u, v = np.meshgrid(window.x1 + centers * step_u, window.y1 + centers * step_v)

    img = rng.uniform(0.0, 0.1, size=(crop_size, crop_size))
    base = 0.9 * (1.0 - b.z / 100.0)
    silhouette = _inside_convex(u, v, _convex_hull(uv))
    img[silhouette] = base

    center = np.array([b.x, b.y - b.h / 2.0, b.z])
    best, best_score = None, -np.inf
    for face in _FACES:
        fc = corners[list(face)].mean(axis=0)
        normal = fc - center
        normal /= np.linalg.norm(normal)
        score = float(np.dot(normal, -fc / np.linalg.norm(fc)))
        if score > best_score:
            best, best_score = face, score
    face_mask = _inside_convex(u, v, _convex_hull(uv[list(best)])) & silhouette
    img[face_mask] = min(1.0, base + 0.2)

    n_steps = 4 * crop_size
    t = np.linspace(0.0, 1.0, n_steps)
    for i, j in _EDGES:
        pu = uv[i, 0] + t * (uv[j, 0] - uv[i, 0])
        pv = uv[i, 1] + t * (uv[j, 1] - uv[i, 1])
        cols = np.floor((pu - window.x1) / step_u).astype(np.int64)
        rows = np.floor((pv - window.y1) / step_v).astype(np.int64)
        keep = (cols >= 0) & (cols < crop_size) & (rows >= 0) & (rows < crop_size)
        img[rows[keep], cols[keep]] = 1.0
    return np.clip(img, 0.0, 1.0)


def build_sample(
    k: CameraIntrinsics,
    b: Box3D,
    crop_size: int,
    rng: np.random.Generator,
    sample_id: str = "",
) -> Sample:
    fb = frontal_bbox(k, b)
    record = record_from_box(b, fb.box, truncated=fb.truncation)
    return Sample(
        crop=render_crop(k, b, crop_size, rng),
        bbox_norm=normalize_bbox(fb.box, k.image_w, k.image_h),
        bev_rect=bev_axis_aligned_normalized(bev_footprint(b)),
        target=normalize_targets(b),
        box=b,
        difficulty=classify_difficulty(record),
        sample_id=sample_id,
    )


def flip_box(b: Box3D) -> Box3D:
    """Mirror across the camera's y-z plane: x -> -x, yaw -> pi - yaw."""
    return replace(b, x=-b.x, yaw=wrap_angle(math.pi - b.yaw))


def flip_sample(s: Sample) -> Sample:
    bb, br, t = s.bbox_norm, s.bev_rect, s.target
    return replace(
        s,
        crop=s.crop[:, ::-1].copy(),
        bbox_norm=Box2D(-bb.x2, bb.y1, -bb.x1, bb.y2),
        bev_rect=BevRect(-br.x2, br.z1, -br.x1, br.z2),
        target=replace(t, tx=-t.tx, tcos=-t.tcos),
        box=flip_box(s.box),
    )


def augment(s: Sample, rng: np.random.Generator, p: float = AUGMENT_PROB) -> Sample:
    """Flip, brightness, contrast and Gaussian noise, each applied with probability p.

    Only the flip touches labels.
    """
    do_flip, do_bright, do_contrast, do_noise = (rng.random() < p for _ in range(4))
    if do_flip:
        s = flip_sample(s)
    crop = s.crop
    if do_bright:
        crop = crop + rng.uniform(-0.2, 0.2)
    if do_contrast:
        mean = crop.mean()
        crop = (crop - mean) * rng.uniform(0.8, 1.25) + mean
    if do_noise:
        crop = crop + rng.normal(0.0, 0.02, size=crop.shape)
    return replace(s, crop=np.clip(crop, 0.0, 1.0))


def _worker_count() -> int:
    env = os.environ.get("MONO_BEV3D_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _scene_samples(cfg: SynthConfig, scene_index: int) -> List[Sample]:
    seed = cfg.seed + scene_index
    rng = np.random.default_rng(seed)
    scene = sample_scene(rng, cfg, seed=seed)
    return [build_sample(scene.intrinsics, b, cfg.crop_size, rng) for b in scene.objects]


def generate_samples(cfg: SynthConfig, workers: Optional[int] = None) -> List[Sample]:
    """First ``cfg.n`` samples in scene order; identical for any worker count."""
    workers = workers or _worker_count()
    samples: List[Sample] = []
    next_scene = 0
    chunk = max(1, workers * 4)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        while len(samples) < cfg.n:
            indices = range(next_scene, next_scene + chunk)
            for scene_samples in pool.map(lambda i: _scene_samples(cfg, i), indices):
                samples.extend(scene_samples)
            next_scene += chunk
    samples = samples[: cfg.n]
    for i, s in enumerate(samples):
        s.sample_id = f"{i:06d}"
    return samples


def _fmt(v: float) -> str:
    return repr(float(v))


def make_dataset(cfg: SynthConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    crops_dir = out / "crops"
    crops_dir.mkdir(parents=True, exist_ok=True)
    log_event("gen_data", phase="start", n=cfg.n, seed=cfg.seed, out=str(out))
    samples = generate_samples(cfg)

    with open(out / "index.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(INDEX_COLUMNS)
        for s in samples:
            crop_path = f"crops/{s.sample_id}.pgm"
            write_image(s.crop, out / crop_path, "PGM")
            writer.writerow(
                [s.sample_id, crop_path]
                + [_fmt(v) for v in s.bbox_norm.as_tuple()]
                + [_fmt(v) for v in s.bev_rect.as_tuple()]
                + [_fmt(v) for v in s.target.as_array()]
                + [_fmt(v) for v in s.box.as_tuple()]
                + [s.difficulty.name.capitalize()]
            )

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "num_samples": len(samples),
        "config": asdict(cfg),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    counts = {d.name.lower(): sum(1 for s in samples if s.difficulty == d) for d in Difficulty}
    log_event("gen_data", phase="done", n=len(samples), difficulty=counts, out=str(out))
    return out


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    index = root / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"{index} not found")
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else {}

    ids: List[str] = []
    crops, rows = [], []
    with open(index, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            ids.append(rec["sample_id"])
            crops.append(read_image(root / rec["crop_path"]).astype(np.float64) / 255.0)
            rows.append(rec)
    if not ids:
        raise EmptyDataset(f"{index} has no samples")

    def cols(names: Sequence[str]) -> np.ndarray:
        return np.array([[float(r[n]) for n in names] for r in rows], dtype=np.float64)

    return Dataset(
        ids=ids,
        crops=np.stack(crops)[:, None],
        bboxes=cols(INDEX_COLUMNS[2:6]),
        bev=cols(INDEX_COLUMNS[6:10]),
        targets=cols(INDEX_COLUMNS[10:18]),
        boxes=cols(INDEX_COLUMNS[18:25]),
        difficulty=np.array([int(Difficulty[r["difficulty"].upper()]) for r in rows], dtype=np.int64),
        manifest=manifest,
    )


def is_validation(sample_id: str) -> bool:
    return hashlib.sha256(sample_id.encode("utf-8")).digest()[0] % 5 == 0


def split_train_val(ds: Dataset) -> Tuple[Dataset, Dataset]:
    """Deterministic ~80/20 split keyed on a hash of the sample id."""
    val = [i for i, sid in enumerate(ds.ids) if is_validation(sid)]
    train = [i for i, sid in enumerate(ds.ids) if not is_validation(sid)]
    return ds.subset(train), ds.subset(val)


def dataset_config(ds: Dataset) -> SynthConfig:
    """Generation settings recorded in a dataset's manifest (defaults when absent)."""
    recorded = ds.manifest.get("config", {})
    known = {f.name for f in fields(SynthConfig)}
    return SynthConfig(**{k: v for k, v in recorded.items() if k in known})

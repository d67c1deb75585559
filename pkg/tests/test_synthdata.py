import json
import math
from pathlib import Path

import numpy as np
import pytest

from mono_bev3d.errors import CannotPlace, EmptyDataset
from mono_bev3d.geometry import Box3D, CameraIntrinsics, frontal_bbox, normalize_targets, wrap_angle
from mono_bev3d.synthdata import (
    INDEX_COLUMNS,
    Dataset,
    SynthConfig,
    augment,
    build_sample,
    dataset_config,
    flip_box,
    flip_sample,
    generate_samples,
    is_validation,
    load_dataset,
    make_dataset,
    render_crop,
    sample_scene,
    split_train_val,
)


def small_cfg(**kw) -> SynthConfig:
    base = dict(n=12, seed=3, crop_size=16)
    base.update(kw)
    return SynthConfig(**base)


def test_sample_scene_counts_and_validity():
    cfg = small_cfg()
    rng = np.random.default_rng(5)
    for _ in range(10):
        scene = sample_scene(rng, cfg)
        assert cfg.min_objects <= len(scene.objects) <= cfg.max_objects
        for b in scene.objects:
            assert cfg.depth_min <= b.z <= cfg.depth_max


def test_sample_scene_cannot_place():
    cfg = small_cfg(depth_min=99.9, depth_max=99.9, l_mean=7.0, l_std=0.0, max_attempts=5)
    with pytest.raises(CannotPlace):
        sample_scene(np.random.default_rng(0), cfg)


def test_sampled_objects_normalize_in_range():
    cfg = SynthConfig()
    rng = np.random.default_rng(11)
    objects: list = []
    while len(objects) < 10_000:
        objects += sample_scene(rng, cfg).objects
    for b in objects:
        t = normalize_targets(b)
        assert np.all(np.abs(t.as_array()[:6]) <= 1.0)


def test_render_crop_range_and_determinism():
    k = CameraIntrinsics.kitti_default()
    b = Box3D(1.0, 1.65, 15.0, 1.6, 3.9, 1.5, 0.4)
    a = render_crop(k, b, 32, np.random.default_rng(1))
    c = render_crop(k, b, 32, np.random.default_rng(1))
    assert a.shape == (32, 32)
    assert a.min() >= 0.0 and a.max() <= 1.0
    np.testing.assert_array_equal(a, c)
    # the object dominates the crop over the background noise
    assert a.mean() > 0.3


def test_closer_objects_render_brighter():
    k = CameraIntrinsics.kitti_default()
    near = render_crop(k, Box3D(0.0, 1.65, 10.0, 1.6, 3.9, 1.5, 0.0), 32, np.random.default_rng(0))
    far = render_crop(k, Box3D(0.0, 1.65, 80.0, 1.6, 3.9, 1.5, 0.0), 32, np.random.default_rng(0))
    assert near.mean() > far.mean()


def test_heading_changes_crop_shading():
    k = CameraIntrinsics.kitti_default()
    side = render_crop(k, Box3D(0.0, 1.65, 20.0, 1.6, 3.9, 1.5, 0.0), 32, np.random.default_rng(0))
    rear = render_crop(k, Box3D(0.0, 1.65, 20.0, 1.6, 3.9, 1.5, math.pi / 2), 32, np.random.default_rng(0))
    assert abs(side.mean() - rear.mean()) > 1e-3


def test_build_sample_labels_in_range():
    k = CameraIntrinsics.kitti_default()
    s = build_sample(k, Box3D(-3.0, 1.65, 25.0, 1.6, 3.9, 1.5, 1.0), 16, np.random.default_rng(0))
    assert np.all(np.abs(s.target.as_array()) <= 1.0)
    assert all(-1.0 <= v <= 1.0 for v in s.bev_rect.as_tuple())
    assert all(-1.0 <= v <= 1.0 for v in s.bbox_norm.as_tuple())
    assert s.crop.shape == (16, 16)


def test_generation_independent_of_worker_count():
    cfg = small_cfg()
    one = Dataset.from_samples(generate_samples(cfg, workers=1))
    many = Dataset.from_samples(generate_samples(cfg, workers=4))
    assert one.ids == many.ids == [f"{i:06d}" for i in range(12)]
    np.testing.assert_array_equal(one.crops, many.crops)
    np.testing.assert_array_equal(one.targets, many.targets)


def test_make_dataset_byte_reproducible(tmp_path: Path):
    cfg = small_cfg()
    a = make_dataset(cfg, tmp_path / "a")
    b = make_dataset(cfg, tmp_path / "b")
    for name in ("index.csv", "manifest.json", "crops/000000.pgm", "crops/000011.pgm"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header = (a / "index.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header.split(",") == list(INDEX_COLUMNS)
    manifest = json.loads((a / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["format_version"] == 1
    assert manifest["num_samples"] == 12
    assert manifest["seed"] == 3


def test_load_dataset_matches_generation(tmp_path: Path):
    cfg = small_cfg()
    out = make_dataset(cfg, tmp_path / "d")
    ds = load_dataset(out)
    ref = Dataset.from_samples(generate_samples(cfg))
    assert ds.ids == ref.ids
    np.testing.assert_array_equal(ds.targets, ref.targets)
    np.testing.assert_array_equal(ds.bev, ref.bev)
    np.testing.assert_array_equal(ds.difficulty, ref.difficulty)
    # crops are quantized to 8 bits on disk
    assert np.max(np.abs(ds.crops - ref.crops)) <= 0.5 / 255 + 1e-12
    assert dataset_config(ds).crop_size == 16


def test_load_dataset_missing(tmp_path: Path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")


def test_split_is_deterministic_and_disjoint():
    ds = Dataset.from_samples(generate_samples(small_cfg(n=40)))
    train, val = split_train_val(ds)
    assert len(train) + len(val) == len(ds)
    assert not set(train.ids) & set(val.ids)
    assert all(is_validation(i) for i in val.ids)
    again_train, _ = split_train_val(ds)
    assert again_train.ids == train.ids


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        Dataset.from_samples([])


def test_flip_box_is_an_involution():
    b = Box3D(3.0, 1.6, 20.0, 1.6, 3.9, 1.5, 0.7)
    f = flip_box(b)
    assert f.x == -3.0
    assert f.yaw == pytest.approx(math.pi - 0.7)
    back = flip_box(f)
    assert back.x == b.x
    assert wrap_angle(back.yaw - b.yaw) == pytest.approx(0.0, abs=1e-12)


def test_flip_sample_mirrors_labels():
    k = CameraIntrinsics.kitti_default()
    s = build_sample(k, Box3D(-3.0, 1.65, 25.0, 1.6, 3.9, 1.5, 1.0), 16, np.random.default_rng(0))
    f = flip_sample(s)
    assert f.target.tx == -s.target.tx
    assert f.target.tcos == -s.target.tcos
    assert f.target.tsin == s.target.tsin
    assert f.bbox_norm.x1 == -s.bbox_norm.x2
    assert f.bev_rect.x2 == -s.bev_rect.x1
    np.testing.assert_array_equal(f.crop[:, ::-1], s.crop)
    np.testing.assert_array_equal(flip_sample(f).crop, s.crop)


def test_augment_probabilities():
    k = CameraIntrinsics.kitti_default()
    s = build_sample(k, Box3D(-3.0, 1.65, 25.0, 1.6, 3.9, 1.5, 1.0), 16, np.random.default_rng(0))
    same = augment(s, np.random.default_rng(0), p=0.0)
    np.testing.assert_array_equal(same.crop, s.crop)
    assert same.target == s.target
    all_on = augment(s, np.random.default_rng(0), p=1.0)
    assert all_on.target.tx == -s.target.tx
    assert all_on.crop.min() >= 0.0 and all_on.crop.max() <= 1.0


def test_flip_mirrors_the_projection():
    k = CameraIntrinsics.kitti_default()
    b = Box3D(3.0, 1.6, 20.0, 1.6, 3.9, 1.5, 0.7)
    a = frontal_bbox(k, b).unclipped
    f = frontal_bbox(k, flip_box(b)).unclipped
    assert f.x1 == pytest.approx(2 * k.cx - a.x2)
    assert f.x2 == pytest.approx(2 * k.cx - a.x1)
    assert (f.y1, f.y2) == pytest.approx((a.y1, a.y2))

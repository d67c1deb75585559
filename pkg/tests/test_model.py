import math

import numpy as np
import pytest

from mono_bev3d.errors import ShapeMismatch, UnknownBranch
from mono_bev3d.model import (
    ENCODING_DIM,
    MIN_DIMENSION,
    BranchConfig,
    BranchModel,
    composite_grad_check,
    decode_box,
    semantic_concat,
    targets_for,
)
from mono_bev3d.optim import OptimizerState, sgd_momentum_step


def small_cfg(**kw) -> BranchConfig:
    base = dict(feature_dim=4, crop_size=8, backbone_channels=[2, 3], br2_widths=[6, 6, 6, ENCODING_DIM],
                br3_widths=[6] * 7 + [4], br4_widths=[6] * 7 + [8])
    base.update(kw)
    return BranchConfig(**base)


def inputs(n: int = 3, seed: int = 0, crop: int = 8):
    rng = np.random.default_rng(seed)
    crops = rng.random((n, crop, crop))
    x1 = rng.uniform(-0.9, 0.0, size=n)
    y1 = rng.uniform(-0.9, 0.0, size=n)
    bboxes = np.stack([x1, y1, x1 + 0.5, y1 + 0.5], axis=1)
    return crops, bboxes


def test_default_config_shapes():
    cfg = BranchConfig()
    assert cfg.br3_widths[-1] == 4 and cfg.br4_widths[-1] == 8
    model = BranchModel(small_cfg(), np.random.default_rng(0))
    crops, bboxes = inputs()
    out = model.forward(crops, bboxes)
    assert out.bev.shape == (3, 4)
    assert out.target.shape == (3, 8)
    assert np.all(np.abs(out.bev) <= 1.0) and np.all(np.abs(out.target) <= 1.0)
    only_bev = model.forward(crops, bboxes, heads=("bev",))
    assert only_bev.target is None
    np.testing.assert_array_equal(only_bev.bev, out.bev)


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(out_dim=9)
    with pytest.raises(ValueError):
        small_cfg(br2_widths=[6, 6, 6, 128])
    with pytest.raises(ValueError):
        small_cfg(br3_widths=[6] * 8)
    with pytest.raises(ValueError):
        small_cfg(crop_size=12)


def test_semantic_concat_order():
    f = np.full((2, 3), 1.0)
    e = np.full((2, ENCODING_DIM), 2.0)
    s = semantic_concat(f, e)
    assert s.shape == (2, 3 + ENCODING_DIM)
    assert s[:, :3].tolist() == f.tolist()
    assert np.all(s[:, 3:] == 2.0)
    with pytest.raises(ShapeMismatch):
        semantic_concat(f, np.zeros((3, ENCODING_DIM)))
    with pytest.raises(ShapeMismatch):
        semantic_concat(f, np.zeros((2, 10)))


def test_box_encoder_maps_zero_to_zero():
    model = BranchModel(small_cfg(), np.random.default_rng(1))
    out = model.br2_forward(np.zeros((2, 4)))
    assert out.shape == (2, ENCODING_DIM)
    assert not out.any()


def wide_cfg() -> BranchConfig:
    return small_cfg(feature_dim=16, backbone_channels=[8, 16], br2_widths=[32, 32, 32, ENCODING_DIM],
                     br3_widths=[32] * 7 + [4], br4_widths=[32] * 7 + [8], dropout_p=0.0)


def test_backbone_keeps_the_shading_cue():
    model = BranchModel(wide_cfg(), np.random.default_rng(2))
    crop = np.random.default_rng(3).random((1, 8, 8)) * 0.5
    dim, bright = model.backbone_forward(crop), model.backbone_forward(crop + 0.3)
    assert not np.allclose(dim, bright)


def test_distinct_boxes_give_distinct_semantic_vectors():
    model = BranchModel(wide_cfg(), np.random.default_rng(2))
    crops = np.repeat(np.random.default_rng(3).random((1, 8, 8)), 2, axis=0)
    bboxes = np.array([[-0.5, -0.2, -0.1, 0.3], [0.2, -0.4, 0.6, 0.1]])
    sem = semantic_concat(model.backbone_forward(crops), model.br2_forward(bboxes))
    np.testing.assert_array_equal(sem[0, :16], sem[1, :16])
    assert not np.allclose(sem[0], sem[1])


def test_gradients_reach_both_semantic_inputs():
    model = BranchModel(wide_cfg(), np.random.default_rng(2))
    crops, bboxes = inputs(n=4, seed=5)
    out = model.forward(crops, bboxes)
    model.zero_grad()
    model.backward(d_bev=np.ones_like(out.bev), d_target=np.ones_like(out.target))
    for branch in ("br1", "br2"):
        grads = [t.grad for name, t in model.named_parameters() if name.startswith(branch + ".")]
        assert any(g is not None and np.any(g != 0) for g in grads), branch


def test_unknown_branch():
    model = BranchModel(small_cfg(), np.random.default_rng(0))
    with pytest.raises(UnknownBranch):
        model.set_trainable("br5", False)
    with pytest.raises(UnknownBranch):
        model.trainable("backbone")
    model.set_trainable("BR4", False)
    assert not model.trainable("br4")


def test_frozen_branches_are_bit_identical_after_updates():
    model = BranchModel(small_cfg(dropout_p=0.0), np.random.default_rng(0))
    for b in ("br1", "br2", "br3"):
        model.set_trainable(b, False)
    before = model.branch_digest(["br1", "br2", "br3"])
    br4_before = model.branch_blob(["br4"])
    crops, bboxes = inputs(4)
    state = OptimizerState(lr=0.05)
    rng = np.random.default_rng(0)
    for _ in range(3):
        model.zero_grad()
        out = model.forward(crops, bboxes, train=True, rng=rng)
        model.backward(d_target=out.target - 0.3)
        sgd_momentum_step(model.named_parameters(), None, state)
    assert model.branch_digest(["br1", "br2", "br3"]) == before
    assert model.branch_blob(["br4"]) != br4_before


def test_frozen_branch_ignores_dropout():
    model = BranchModel(small_cfg(dropout_p=0.5), np.random.default_rng(0))
    model.set_trainable("br3", False)
    crops, bboxes = inputs()
    train = model.forward(crops, bboxes, train=True, rng=np.random.default_rng(5))
    evaluated = model.forward(crops, bboxes)
    np.testing.assert_array_equal(train.bev, evaluated.bev)


def test_branch_blob_length():
    model = BranchModel(small_cfg(), np.random.default_rng(0))
    count = sum(t.values.size for n, t in model.named_parameters() if n.startswith("br3."))
    assert len(model.branch_blob(["br3"])) == 8 * count
    assert len(model.branch_digest(["br1", "br2"])) == 64


def test_composite_gradients_match_finite_differences():
    model = BranchModel(small_cfg(), np.random.default_rng(3))
    crops, bboxes = inputs(3, seed=3)
    rng = np.random.default_rng(3)
    res = composite_grad_check(model, crops, bboxes, rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 8)),
                               max_params=300, rng=np.random.default_rng(0))
    assert res.checked > 0
    assert res.max_rel_error <= 1e-4


def test_seven_output_head():
    cfg = small_cfg(out_dim=7)
    assert cfg.br4_widths[-1] == 7
    model = BranchModel(cfg, np.random.default_rng(0))
    crops, bboxes = inputs()
    assert model.forward(crops, bboxes).target.shape == (3, 7)
    rects, boxes = model.predict(crops, bboxes, batch_size=2)
    assert len(rects) == len(boxes) == 3


def test_targets_for():
    t8 = np.array([[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0, 0.0]])
    assert targets_for(t8, 8) is t8
    t7 = targets_for(t8, 7)
    assert t7.shape == (1, 7)
    assert t7[0, 6] == pytest.approx(0.5)


def test_decode_box():
    box = decode_box([0.0] * 6 + [1.0, 0.0])
    assert (box.x, box.y, box.z) == (0.0, 2.0, 50.0)
    assert (box.w, box.l, box.h) == (1.5, 3.5, 1.5)
    assert box.yaw == pytest.approx(math.pi / 2)
    assert decode_box([0.0] * 6 + [0.5]).yaw == pytest.approx(math.pi / 2)
    assert decode_box([0.0] * 8).yaw == 0.0
    squashed = decode_box([0.0, 0.0, 0.0, -1.0, -1.0, -1.0, 0.0, 1.0])
    assert min(squashed.w, squashed.l, squashed.h) >= MIN_DIMENSION - 1e-12


def test_predict_returns_canonical_rects():
    model = BranchModel(small_cfg(), np.random.default_rng(2))
    crops, bboxes = inputs(5, seed=2)
    rects, _ = model.predict(crops, bboxes)
    assert all(r.x1 <= r.x2 and r.z1 <= r.z2 for r in rects)


def test_config_round_trip():
    model = BranchModel(small_cfg(), np.random.default_rng(0))
    clone = BranchModel.from_config(model.config())
    assert clone.config() == model.config()
    assert [n for n, _ in clone.named_parameters()] == [n for n, _ in model.named_parameters()]

import math

import numpy as np
import pytest

from mono_bev3d.errors import NoForwardCache, ShapeMismatch
from mono_bev3d.nn import (
    LayerSpec,
    Sequential,
    backward,
    build_network,
    forward,
    grad_check,
    mse_loss,
)


def net(input_shape, specs, seed=0):
    return build_network(input_shape, specs, np.random.default_rng(seed))


def test_mse_loss_examples():
    loss, grad = mse_loss(np.ones((1, 4)), np.zeros((1, 4)))
    assert loss == 4.0
    np.testing.assert_array_equal(grad, np.full((1, 4), 2.0))
    loss, grad = mse_loss(np.zeros((2, 3)), np.zeros((2, 3)))
    assert loss == 0.0 and not grad.any()
    with pytest.raises(ShapeMismatch):
        mse_loss(np.zeros((2, 3)), np.zeros((2, 4)))


def test_dense_forward_values():
    n = net((2,), [LayerSpec("dense", 1)])
    dense = n.layers[0]
    dense.weight.values = np.array([[2.0], [-1.0]])
    dense.bias.values = np.array([0.5])
    out = forward(n, np.array([[1.0, 3.0]]))
    assert out.tolist() == [[-0.5]]


def test_conv3x3_matches_direct_sum():
    rng = np.random.default_rng(4)
    n = net((2, 5, 6), [LayerSpec("conv3x3", 3)], seed=4)
    conv = n.layers[0]
    conv.bias.values = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 5, 6))
    out = forward(n, x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 6))
    for b in range(2):
        for o in range(3):
            for i in range(5):
                for j in range(6):
                    ref[b, o, i, j] = np.sum(xp[b, :, i:i + 3, j:j + 3] * conv.weight.values[o]) + conv.bias.values[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_pooling_shapes_and_odd_sizes():
    n = net((3, 4, 4), [LayerSpec("avgpool2"), LayerSpec("globalavgpool")])
    x = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
    out = forward(n, x)
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out, x.mean(axis=(2, 3)))
    with pytest.raises(ShapeMismatch):
        net((3, 5, 4), [LayerSpec("avgpool2")])


def test_input_shape_checked():
    n = net((4,), [LayerSpec("dense", 2)])
    with pytest.raises(ShapeMismatch):
        forward(n, np.zeros((1, 5)))
    with pytest.raises(ShapeMismatch):
        net((1, 4, 4), [LayerSpec("dense", 2)])


def test_backward_before_forward():
    n = net((4,), [LayerSpec("dense", 2), LayerSpec("relu")])
    with pytest.raises(NoForwardCache):
        backward(n, np.ones((1, 2)))


def test_mse_at_target_gives_zero_gradients():
    n = net((3,), [LayerSpec("dense", 4), LayerSpec("tanh"), LayerSpec("dense", 2)])
    x = np.random.default_rng(0).normal(size=(5, 3))
    target = forward(n, x)
    _, g = mse_loss(target, target)
    grads = backward(n, g)
    assert grads and all(not v.any() for v in grads.values())


def test_tanh_gradient_bounded_by_upstream():
    n = net((3,), [LayerSpec("tanh")])
    x = np.random.default_rng(1).normal(size=(4, 3))
    forward(n, x)
    dx = n.backward(np.ones((4, 3)))
    assert np.all(np.abs(dx) <= 1.0)


def test_dropout_modes():
    n = net((1000,), [LayerSpec("dropout", dropout_p=0.5)])
    x = np.ones((4, 1000))
    np.testing.assert_array_equal(forward(n, x), x)
    y = forward(n, x, train_mode=True, rng=np.random.default_rng(0))
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.1
    with pytest.raises(ValueError):
        forward(n, x, train_mode=True)
    zero = net((5,), [LayerSpec("dropout", dropout_p=0.0)])
    np.testing.assert_array_equal(forward(zero, x[:, :5], train_mode=True, rng=np.random.default_rng(0)), x[:, :5])


def test_dropout_averages_to_eval_output():
    n = net((6,), [LayerSpec("dense", 16), LayerSpec("relu"), LayerSpec("dropout", dropout_p=0.25),
                   LayerSpec("dense", 4)])
    n.layers[-1].weight.values[...] = np.abs(n.layers[-1].weight.values)
    x = np.random.default_rng(1).random((1, 6))
    expected = forward(n, x)[0]
    assert np.all(expected > 0)
    # one row per masked forward pass
    masked = forward(n, np.repeat(x, 10_000, axis=0), train_mode=True, rng=np.random.default_rng(2))
    np.testing.assert_allclose(masked.mean(axis=0), expected, rtol=0.02)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("maxpool")
    with pytest.raises(ValueError):
        LayerSpec("dense", 0)
    with pytest.raises(ValueError):
        LayerSpec("dropout", dropout_p=1.0)


def test_initialization_bounds():
    n = net((50,), [LayerSpec("dense", 20), LayerSpec("relu"), LayerSpec("dense", 10), LayerSpec("tanh")])
    he, xavier = n.layers[0], n.layers[2]
    assert np.abs(he.weight.values).max() <= math.sqrt(6 / 50)
    assert np.abs(xavier.weight.values).max() <= math.sqrt(6 / 30)
    assert not he.bias.values.any()


def test_frozen_parameters_get_no_gradient():
    n = net((3,), [LayerSpec("dense", 4), LayerSpec("relu"), LayerSpec("dense", 2)])
    n.layers[0].weight.frozen = True
    n.layers[0].bias.frozen = True
    x = np.random.default_rng(0).normal(size=(5, 3))
    _, g = mse_loss(forward(n, x), np.ones((5, 2)))
    grads = backward(n, g)
    assert set(grads) == {"2.weight", "2.bias"}
    assert n.layers[0].weight.grad is None
    res = grad_check(n, x, np.ones((5, 2)))
    assert res.checked + res.skipped == 4 * 2 + 2


def test_config_round_trip():
    n = net((1, 8, 8), [LayerSpec("conv3x3", 2), LayerSpec("relu"), LayerSpec("avgpool2"),
                        LayerSpec("globalavgpool"), LayerSpec("dense", 3), LayerSpec("dropout", dropout_p=0.25)])
    clone = Sequential.from_config(n.config())
    assert clone.config() == n.config()
    assert [s for s, _ in clone.named_parameters()] == [s for s, _ in n.named_parameters()]
    assert clone.output_shape == (3,)


def test_grad_check_linear_is_exact():
    n = net((3,), [LayerSpec("dense", 2)])
    rng = np.random.default_rng(0)
    res = grad_check(n, rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))
    assert res.skipped == 0
    assert res.max_rel_error < 1e-6


@pytest.mark.parametrize("kind", ["relu", "tanh"])
def test_grad_check_mlp(kind):
    n = net((5,), [LayerSpec("dense", 8), LayerSpec(kind), LayerSpec("dense", 6), LayerSpec(kind),
                   LayerSpec("dense", 3), LayerSpec("tanh")], seed=1)
    rng = np.random.default_rng(1)
    res = grad_check(n, rng.normal(size=(4, 5)), rng.uniform(-1, 1, size=(4, 3)))
    assert res.checked > 0
    assert res.max_rel_error <= 1e-4


def test_grad_check_conv_stack():
    n = net((2, 8, 8), [LayerSpec("conv3x3", 3), LayerSpec("relu"), LayerSpec("avgpool2"),
                        LayerSpec("conv3x3", 4), LayerSpec("tanh"), LayerSpec("avgpool2"),
                        LayerSpec("globalavgpool"), LayerSpec("dense", 3), LayerSpec("dropout", dropout_p=0.5),
                        LayerSpec("tanh")], seed=2)
    rng = np.random.default_rng(2)
    res = grad_check(n, rng.random((3, 2, 8, 8)), rng.uniform(-1, 1, size=(3, 3)))
    assert res.checked > 0
    assert res.max_rel_error <= 1e-4


def test_grad_check_subsamples_large_nets():
    n = net((20,), [LayerSpec("dense", 30), LayerSpec("relu"), LayerSpec("dense", 4)], seed=3)
    rng = np.random.default_rng(3)
    res = grad_check(n, rng.normal(size=(2, 20)), rng.normal(size=(2, 4)), max_params=200,
                     rng=np.random.default_rng(0))
    assert res.checked + res.skipped == 200
    assert res.max_rel_error <= 1e-4

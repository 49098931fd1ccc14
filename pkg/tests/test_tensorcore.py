import numpy as np
import pytest

from changealign import tensorcore as tc
from changealign.tensorcore import NonFiniteError, ShapeError, Tensor


def test_abs_and_midpoints():
    np.testing.assert_array_equal(tc.abs_([-1.0, 0.0, 2.0]).data, [1, 0, 2])
    assert tc.tanh([0.0]).data[0] == 0.0
    assert tc.sigmoid([0.0]).data[0] == 0.5


def test_mul_broadcasts_column():
    out = tc.mul(np.ones((2, 3)), np.array([[2.0], [3.0]]))
    np.testing.assert_array_equal(out.data, [[2, 2, 2], [3, 3, 3]])


def test_broadcast_gradient_sums_back():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.array([[2.0], [3.0]]), requires_grad=True)
    tc.mul(a, b).backward()
    np.testing.assert_array_equal(b.grad, [[3], [3]])
    np.testing.assert_array_equal(a.grad, [[2, 2, 2], [3, 3, 3]])


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError):
        tc.add(np.ones((2, 3)), np.ones((3, 2)))


def test_division_by_zero_is_reported():
    with pytest.raises(NonFiniteError):
        tc.div([1.0], [0.0])


def test_values_are_float32_by_default():
    assert tc.add([1.0], [2.0]).data.dtype == np.float32
    with tc.precision(np.float64):
        assert tc.add([1.0], [2.0]).data.dtype == np.float64


def test_sigmoid_is_stable_for_large_inputs():
    out = tc.sigmoid([-1000.0, 1000.0]).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError):
        tc.elementwise("cube", [1.0])


def test_conv_ones_kernel_counts_neighbours():
    out = tc.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1).data[0]
    assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6


def test_conv_identity_and_bias_only():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(tc.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)).data, x)
    out = tc.conv2d(x, np.zeros((1, 1, 3, 3)), np.array([0.7]), padding=1).data
    np.testing.assert_array_equal(out, np.full((1, 4, 5), np.float32(0.7)))


def test_conv_is_cross_correlation():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    out = tc.conv2d(x, w, padding=1).data[0]
    # a unit impulse through cross-correlation returns the flipped kernel
    np.testing.assert_array_equal(out, w[0, 0, ::-1, ::-1])


def test_conv_stride_two_with_asymmetric_padding():
    out = tc.conv2d(np.ones((1, 96, 96)), np.ones((1, 1, 3, 3)), stride=2, padding=(0, 1))
    assert out.shape == (1, 48, 48)


def test_conv_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        tc.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        tc.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        tc.conv2d(np.ones((1, 6, 6)), np.ones((1, 1, 3, 3)), stride=2, padding=1)


def test_gap_values_and_gradient():
    assert tc.gap(np.full((1, 3, 3), 2.5)).data[0] == 2.5
    assert tc.gap(np.array([[[0.0, 1.0], [2.0, 3.0]]])).data[0] == 1.5
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    tc.gap(x).backward()
    np.testing.assert_allclose(x.grad, 1 / 12)


def test_bilinear_identity_grid_is_exact():
    f = np.random.default_rng(1).standard_normal((3, 5, 7)).astype(np.float32)
    out = tc.bilinear_sample(f, tc.identity_grid(5, 7)).data
    assert np.array_equal(out, f)


def test_bilinear_ramp_half_pixel():
    f = np.tile(np.arange(6.0), (4, 1))[None]
    coords = tc.identity_grid(4, 6)
    coords[0] += 0.5
    out = tc.bilinear_sample(f, coords).data[0]
    np.testing.assert_allclose(out[:, :5], f[0, :, :5] + 0.5)


def test_bilinear_clamps_outside():
    coords = np.array([[[2.7]], [[0.0]]])
    assert tc.bilinear_sample(np.array([[[0.0, 1.0]]]), coords).data.item() == 1.0


def test_bilinear_is_linear_in_features():
    rng = np.random.default_rng(2)
    f, g = rng.standard_normal((2, 2, 5, 5))
    coords = tc.identity_grid(5, 5) + rng.uniform(-1.5, 1.5, size=(2, 5, 5))
    lhs = tc.bilinear_sample(2 * f - 3 * g, coords).data
    rhs = 2 * tc.bilinear_sample(f, coords).data - 3 * tc.bilinear_sample(g, coords).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)


def test_deterministic_ops_are_bitwise_repeatable():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    coords = tc.identity_grid(6, 6) + rng.uniform(-1, 1, size=(2, 6, 6))
    for fn in (lambda: tc.conv2d(x, w, padding=1), lambda: tc.gap(x), lambda: tc.bilinear_sample(x, coords)):
        assert np.array_equal(fn().data, fn().data)


def test_box_filter_constant_and_mean():
    np.testing.assert_allclose(tc.box_filter(np.full((1, 5, 5), 3.0), 3).data, 3.0)
    x = np.arange(25.0).reshape(1, 5, 5)
    assert tc.box_filter(x, 3).data[0, 2, 2] == pytest.approx(x[0, 1:4, 1:4].mean())


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tc.sum_(tc.square(x)).backward()
    tc.sum_(tc.square(x)).backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with tc.no_grad():
        y = tc.mul(x, 2.0)
    assert y._parents == ()


def test_clip_gradient_passes_only_inside():
    x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    tc.sum_(tc.clip(x, 0.0, 1.0)).backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 0])

import numpy as np
import pytest

from changealign import tensorcore as tc
from changealign.ssca import (
    SSIM_C1,
    SscaParams,
    amplify,
    build_cues,
    channel_weights,
    dssim,
    gate_sparsity_loss,
    spatial_gate,
    spatial_gradient,
    ssca_forward,
)
from changealign.tensorcore import ShapeError


def _zero(params: SscaParams) -> SscaParams:
    for t in params.tensors().values():
        t.data[:] = 0
    return params


def test_spatial_gradient_constant_ramp_step():
    const = spatial_gradient(np.full((1, 5, 5), 0.3)).data
    np.testing.assert_allclose(const, np.sqrt(1e-8), rtol=1e-4)
    ramp = spatial_gradient(np.tile(np.arange(7.0), (6, 1))[None]).data[0]
    np.testing.assert_allclose(ramp[1:-1, 1:-1], 1.0, atol=1e-4)
    step = np.zeros((1, 4, 8))
    step[:, :, 4:] = 2.0
    mag = spatial_gradient(step).data[0]
    np.testing.assert_allclose(mag[:, 3], 1.0, atol=1e-4)
    np.testing.assert_allclose(mag[:, 4], 1.0, atol=1e-4)
    assert mag.max() == pytest.approx(1.0, abs=1e-4)


def test_dssim_identical_is_zero():
    x = np.random.default_rng(0).uniform(size=(3, 10, 10))
    assert np.all(dssim(x, x).data == 0.0)


def test_dssim_anticorrelated_tends_to_one():
    # period-3 columns: every interior 3×3 window has zero mean
    x = np.tile(np.array([1.0, -1.0, 0.0]), (9, 3))[None]
    out = dssim(x, -x, window=3, c1=1e-12, c2=1e-12).data[0]
    np.testing.assert_allclose(out[1:-1, 1:-1], 1.0, atol=1e-3)


def test_dssim_constant_patches_closed_form():
    a, b = 0.3, 0.7
    out = dssim(np.full((1, 9, 9), a), np.full((1, 9, 9), b)).data
    expected = (1 - (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)) / 2
    np.testing.assert_allclose(out, expected, rtol=1e-5)


def test_dssim_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.uniform(size=(2, 2, 8, 8))
        d1, d2 = dssim(a, b).data, dssim(b, a).data
        assert np.array_equal(d1, d2)
        assert d1.min() >= 0 and d1.max() <= 1


def test_dssim_argument_errors():
    with pytest.raises(ShapeError):
        dssim(np.ones((1, 4, 4)), np.ones((1, 4, 5)))
    with pytest.raises(ValueError):
        dssim(np.ones((1, 4, 4)), np.ones((1, 4, 4)), window=4)


def test_cues_layout():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((4, 16, 16))
    cues = build_cues(f, f).data
    assert cues.shape == (13, 16, 16)
    assert not cues[:4].any() and not cues[12].any()
    assert np.array_equal(cues[4:8], cues[8:12])
    small = build_cues(np.array([[[0.0, 1.0], [0.0, 1.0]]]), np.zeros((1, 2, 2))).data
    np.testing.assert_array_equal(small[0], [[0, 1], [0, 1]])


def test_zero_gate_net_gives_half():
    params = _zero(SscaParams.init(2, np.random.default_rng(4)))
    m = spatial_gate(np.random.default_rng(5).uniform(size=(7, 6, 6)), params).data
    assert np.all(m == 0.5)


def test_gate_range_and_bias_monotonicity():
    rng = np.random.default_rng(6)
    params = SscaParams.init(2, rng)
    cues = rng.uniform(size=(7, 6, 6))
    m0 = spatial_gate(cues, params).data
    assert np.all((m0 > 0) & (m0 < 1))
    params.gate_conv2_b.data += 0.5
    m1 = spatial_gate(cues, params).data
    assert np.all(m1 > m0)


def test_gate_wrong_cue_count():
    with pytest.raises(ShapeError):
        spatial_gate(np.ones((6, 4, 4)), SscaParams.init(2, np.random.default_rng(0)))


def test_channel_weights_examples():
    params = _zero(SscaParams.init(3, np.random.default_rng(7)))
    np.testing.assert_array_equal(channel_weights(np.ones((3, 4, 4)), params).data, 0.5)

    one = SscaParams.init(1, np.random.default_rng(8), reduction=1)
    _zero(one)
    one.w1.data[:] = 1.0
    one.w2.data[:] = 1.0
    assert channel_weights(np.ones((1, 3, 3)), one).data[0] == pytest.approx(0.7310586, abs=1e-6)


def test_channel_weights_only_see_channel_means():
    rng = np.random.default_rng(9)
    params = SscaParams.init(4, rng)
    f = rng.standard_normal((4, 5, 5))
    flat = np.broadcast_to(f.mean(axis=(1, 2), keepdims=True), f.shape)
    np.testing.assert_allclose(channel_weights(f, params).data, channel_weights(flat, params).data, rtol=1e-6)


def test_amplify_examples():
    f = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = amplify(f, np.array([[[1.0, 0.0], [0.0, 1.0]]]), np.array([0.5]), np.array([2.0])).data
    np.testing.assert_array_equal(out, [[[2, 2], [3, 8]]])
    x = np.random.default_rng(10).standard_normal((3, 4, 4)).astype(np.float32)
    assert np.array_equal(amplify(x, np.ones((1, 4, 4)), np.ones(3), [0.0]).data, x)
    np.testing.assert_allclose(amplify(x, np.ones((1, 4, 4)), np.ones(3), [1.0]).data, 2 * x)
    with pytest.raises(ShapeError):
        amplify(x, np.ones((1, 3, 3)), np.ones(3), [1.0])


def test_sparsity_loss():
    assert gate_sparsity_loss(np.zeros((1, 2, 2))).data[0] == 0
    assert gate_sparsity_loss(np.ones((1, 2, 2))).data[0] == 1
    assert gate_sparsity_loss(np.array([[[1.0, 0.0], [0.0, 0.0]]])).data[0] == 0.25


def test_fresh_module_is_noop():
    rng = np.random.default_rng(11)
    f_t, f_t2, fused = rng.standard_normal((3, 4, 6, 6)).astype(np.float32)
    state = ssca_forward(f_t, f_t2, fused, SscaParams.init(4, rng))
    assert np.array_equal(state.amplified.data, fused)


def test_state_invariants_identical_inputs():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = SscaParams.init(2, rng)
        params.alpha.data[:] = rng.normal()
        f = rng.standard_normal((2, 5, 5))
        fused = rng.standard_normal((2, 5, 5))
        st = ssca_forward(f, f, fused, params)
        m, s = st.gate_map.data, st.channel_weights.data
        assert np.all((m > 0) & (m < 1)) and np.all((s > 0) & (s < 1))
        expected = fused * (1 + params.alpha.data[0] * m * s[:, None, None])
        np.testing.assert_allclose(st.amplified.data, expected, rtol=1e-5, atol=1e-6)


def test_params_validation_and_names():
    with pytest.raises(ValueError):
        SscaParams.init(4, np.random.default_rng(0), reduction=0)
    with pytest.raises(ValueError):
        SscaParams.init(4, np.random.default_rng(0), sparsity_weight=-1)
    p = SscaParams.init(8, np.random.default_rng(0))
    q = SscaParams.from_tensors({k: v.data for k, v in p.tensors().items()})
    assert list(q.tensors()) == list(p.tensors())
    assert p.gate_conv1_w.shape == (8, 25, 1, 1) and p.w1.shape == (2, 8)
    assert isinstance(p.alpha, tc.Tensor) and p.alpha.data[0] == 0

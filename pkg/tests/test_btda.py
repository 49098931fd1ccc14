import numpy as np
import pytest

from changealign import tensorcore as tc
from changealign.btda import (
    BtdaParams,
    align,
    bound_offsets,
    btda_forward,
    offset_head_width,
    offset_loss,
    offset_norm,
    predict_offsets,
)
from changealign.tensorcore import ShapeError


@pytest.fixture
def feats():
    rng = np.random.default_rng(0)
    return rng.standard_normal((2, 4, 6, 7)).astype(np.float32)


def test_fresh_head_predicts_zero_offsets_and_half_gate(feats):
    params = BtdaParams.init(4, np.random.default_rng(1))
    raw, gate = predict_offsets(feats[0], feats[1], params)
    assert raw.shape == (2, 6, 7) and gate.shape == (1,)
    assert not raw.data.any()
    assert gate.data[0] == 0.5


def test_head_width():
    assert offset_head_width(4) == 8 and offset_head_width(64) == 32


def test_bound_offsets_values():
    assert bound_offsets([0.0], 3.0).data[0] == 0.0
    assert bound_offsets([1.0], 3.0).data[0] == pytest.approx(2.28478, abs=1e-5)
    big = bound_offsets([50.0, -50.0], 3.0).data
    assert np.all(np.abs(big) <= 3.0)
    assert np.all(np.abs(bound_offsets([5.0, -5.0], 3.0).data) < 3.0)
    with pytest.raises(ValueError):
        bound_offsets([1.0], 0.0)


def test_offset_norm_and_loss():
    assert offset_norm(np.zeros((2, 3, 3))).data[0] == 0.0
    single = np.array([3.0, 4.0]).reshape(2, 1, 1)
    assert offset_norm(single).data[0] == pytest.approx(5 / np.sqrt(2), rel=1e-6)
    assert offset_loss([single, single]).data[0] == pytest.approx(2 * 5 / np.sqrt(2), rel=1e-6)
    with pytest.raises(ValueError):
        offset_loss([])


def test_offset_loss_is_additive_over_levels():
    rng = np.random.default_rng(2)
    levels = [rng.uniform(-3, 3, size=(2, n, n)) for n in (3, 6, 12)]
    total = offset_loss(levels).data[0]
    parts = sum(offset_norm(lv).data[0] for lv in levels)
    assert total == pytest.approx(parts, rel=1e-6)


def test_offset_norm_zero_has_zero_gradient():
    x = tc.Tensor(np.zeros((2, 2, 2)), requires_grad=True)
    offset_norm(x).backward()
    assert not x.grad.any()


def test_align_zero_gate_is_identity(feats):
    bounded = np.random.default_rng(3).uniform(-3, 3, size=(2, 6, 7))
    out = align(feats[1], bounded, [0.0]).data
    assert np.array_equal(out, feats[1])


def test_align_ramp_shift():
    ramp = np.tile(np.arange(8.0), (5, 1))[None]
    offs = np.zeros((2, 5, 8))
    offs[0] = 1.0
    out = align(ramp, offs, [1.0]).data[0]
    np.testing.assert_allclose(out[:, :7], ramp[0, :, :7] + 1)
    half = align(ramp, offs, [0.5]).data[0]
    np.testing.assert_allclose(half[:, :7], ramp[0, :, :7] + 0.5)


def test_align_shape_mismatch(feats):
    with pytest.raises(ShapeError):
        align(feats[1], np.zeros((2, 5, 5)), [1.0])


def test_fresh_forward_is_identity(feats):
    res = btda_forward(feats[0], feats[1], BtdaParams.init(4, np.random.default_rng(4)))
    assert np.array_equal(res.aligned.data, feats[1])
    assert res.offset_loss_term.data[0] == 0.0
    assert not res.displacement.any()


def test_forward_rejects_mismatched_inputs(feats):
    params = BtdaParams.init(4, np.random.default_rng(5))
    with pytest.raises(ShapeError):
        btda_forward(feats[0], feats[1][:, :5], params)
    with pytest.raises(ShapeError):
        btda_forward(feats[0][:3], feats[1][:3], params)


def test_invariants_over_random_params():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = BtdaParams.init(3, rng, delta_max=2.0)
        for t in params.tensors().values():
            t.data = (rng.standard_normal(t.shape) * 2).astype(np.float32)
        f_t, f_t2 = rng.standard_normal((2, 3, 5, 5))
        res = btda_forward(f_t, f_t2, params)
        assert np.all(np.abs(res.offsets_bounded.data) <= 2.0)
        assert 0.0 <= res.gate.data[0] <= 1.0
        assert res.aligned.shape == (3, 5, 5)


def test_params_round_trip_by_name():
    params = BtdaParams.init(4, np.random.default_rng(6), delta_max=1.5, level=1)
    copy = BtdaParams.from_tensors({k: v.data for k, v in params.tensors().items()}, 1.5, 1)
    for k, v in params.tensors().items():
        assert np.array_equal(copy.tensors()[k].data, v.data)
    with pytest.raises(ValueError):
        BtdaParams.init(4, np.random.default_rng(0), delta_max=-1.0)

"""Randomised gradient checks for every differentiable operation.

Each check draws small inputs from its seed, keeps them away from the
operation's kink set (ReLU/abs zero, integer bilinear lattice), and runs
:func:`grad_check`. Composite operations that contain many ReLUs and a
bilinear sampler use a smaller step so a perturbation does not straddle a
kink.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensorcore as tc
from .btda import BtdaParams, align, bound_offsets, btda_forward
from .gradcheck import GradReport, grad_check
from .pipeline.config import ModelConfig
from .pipeline.model import Model, downsample_mask, forward, total_loss
from .ssca import (
    SscaParams,
    amplify,
    build_cues,
    channel_weights,
    dssim,
    spatial_gate,
    spatial_gradient,
    ssca_forward,
)

COMPOSITE_EPS = 1e-5
KINK_MARGIN = 1e-3
MAX_REDRAWS = 100


def _away_from_zero(rng, shape, margin=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.5, size=shape)


def _quarter_coords(rng, h, w, ho, wo, overhang=1):
    """Sample positions at quarter-pixel offsets, some outside the image."""
    xs = rng.integers(-overhang, w + overhang - 1, size=(ho, wo)) + rng.choice([0.25, 0.75], size=(ho, wo))
    ys = rng.integers(-overhang, h + overhang - 1, size=(ho, wo)) + rng.choice([0.25, 0.75], size=(ho, wo))
    return np.stack([xs, ys])


def merge(name: str, reports: list[GradReport]) -> GradReport:
    worst = max(reports, key=lambda r: r.max_rel_err)
    return GradReport(
        name,
        max(r.max_abs_err for r in reports),
        worst.max_rel_err,
        all(r.passed for r in reports),
        sum(r.n_checked for r in reports),
        f"[{worst.op_name}] {worst.worst}" if worst.worst else "",
        [f for r in reports for f in r.failures],
    )


def check_elementwise(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    reports = []
    shape, col = (3, 4), (3, 1)
    for kind in ("add", "sub", "mul"):
        a, b = rng.standard_normal(shape), rng.standard_normal(col)
        reports.append(grad_check(lambda x, y, k=kind: tc.elementwise(k, x, y), [a, b], seed=seed, op_name=kind))
    a, b = rng.standard_normal(shape), _away_from_zero(rng, col, 0.5)
    reports.append(grad_check(lambda x, y: tc.elementwise("div", x, y), [a, b], seed=seed, op_name="div"))
    for kind in ("abs", "relu"):
        a = _away_from_zero(rng, shape)
        reports.append(grad_check(lambda x, k=kind: tc.elementwise(k, x), [a], seed=seed, op_name=kind))
    for kind in ("tanh", "sigmoid", "square", "neg"):
        a = rng.standard_normal(shape) * 1.5
        reports.append(grad_check(lambda x, k=kind: tc.elementwise(k, x), [a], seed=seed, op_name=kind))
    for kind in ("sqrt", "log"):
        a = rng.uniform(0.3, 2.0, size=shape)
        reports.append(grad_check(lambda x, k=kind: tc.elementwise(k, x), [a], seed=seed, op_name=kind))
    return merge("elementwise", reports)


def check_conv2d(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    reports = []
    for stride, pad, size in ((1, 1, 6), (2, (0, 1), 6), (1, 0, 5)):
        x = rng.standard_normal((2, size, size))
        w = rng.standard_normal((3, 2, 3, 3)) * 0.5
        b = rng.standard_normal(3)
        op = lambda x_, w_, b_, s=stride, p=pad: tc.conv2d(x_, w_, b_, stride=s, padding=p)
        reports.append(grad_check(op, [x, w, b], seed=seed, names=["x", "w", "b"], op_name=f"conv2d(s={stride},p={pad})"))
    return merge("conv2d", reports)


def check_gap(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    return grad_check(tc.gap, [rng.standard_normal((3, 4, 5))], seed=seed, op_name="gap")


def check_bilinear_sample(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((2, 5, 6))
    coords = _quarter_coords(rng, 5, 6, 4, 5)
    return grad_check(tc.bilinear_sample, [f, coords], seed=seed, names=["f", "coords"], op_name="bilinear_sample")


def check_bound_offsets(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((2, 4, 4)) * 1.5
    return grad_check(lambda r: bound_offsets(r, 3.0), [raw], seed=seed, op_name="bound_offsets")


def check_align(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    h, w = 5, 6
    f = rng.standard_normal((2, h, w))
    gate = rng.uniform(0.3, 0.9)
    # displacement at quarter-pixel offsets keeps grid + gate*bounded off the lattice
    disp = rng.choice([-1.25, -0.75, -0.25, 0.25, 0.75, 1.25], size=(2, h, w))
    bounded = disp / gate
    return grad_check(align, [f, bounded, np.array([gate])], seed=seed, names=["f_t2", "bounded", "gate"], op_name="align")


def check_spatial_gradient(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    return grad_check(spatial_gradient, [rng.standard_normal((2, 5, 6))], seed=seed, op_name="spatial_gradient")


def check_dssim(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, size=(2, 7, 7))
    noisy = np.clip(a + rng.normal(0, 0.3, size=a.shape), 0, 1)
    mixed = 0.6 * a + 0.4 * rng.uniform(0, 1, size=a.shape)
    reports = [
        grad_check(dssim, [a, noisy], seed=seed, names=["a", "b"], op_name="dssim(noisy)"),
        grad_check(dssim, [a, mixed], seed=seed, names=["a", "b"], op_name="dssim(mixed)"),
    ]
    return merge("dssim", reports)


def _random_ssca(rng, channels: int) -> SscaParams:
    p = SscaParams.init(channels, rng)
    p.alpha.data[:] = rng.uniform(0.5, 1.5)
    for t in (p.gate_conv1_b, p.b1, p.b2, p.gate_conv2_b):
        t.data[:] = rng.normal(0, 0.3, size=t.shape)
    return p


def _clear_of_kinks(*arrays) -> bool:
    return all(np.abs(a).min() > KINK_MARGIN for a in arrays)


def _redraw(draw: Callable, seed: int):
    """Call ``draw(rng)`` until it returns a point clear of ReLU/abs kinks."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_REDRAWS):
        point, kink_args = draw(rng)
        if _clear_of_kinks(*kink_args):
            return point, rng
    raise RuntimeError(f"no kink-free point after {MAX_REDRAWS} draws (seed {seed})")


def check_spatial_gate(seed: int) -> GradReport:
    c = 2

    def draw(rng):
        params = _random_ssca(rng, c)
        cues = rng.uniform(0, 1, size=(3 * c + 1, 5, 5))
        pre = tc.conv2d(cues, params.gate_conv1_w, params.gate_conv1_b).data
        return (params, cues), [pre]

    (params, cues), _ = _redraw(draw, seed)
    arrays = [cues, params.gate_conv1_w.data, params.gate_conv1_b.data, params.gate_conv2_w.data, params.gate_conv2_b.data]

    def op(cu, w1, b1, w2, b2):
        p = SscaParams(w1, b1, w2, b2, params.w1, params.b1, params.w2, params.b2, params.alpha)
        return spatial_gate(cu, p)

    names = ["cues", "conv1.w", "conv1.b", "conv2.w", "conv2.b"]
    return grad_check(op, arrays, COMPOSITE_EPS, seed=seed, names=names, op_name="spatial_gate")


def check_channel_weights(seed: int) -> GradReport:
    c = 8

    def draw(rng):
        params = _random_ssca(rng, c)
        f = rng.standard_normal((c, 3, 4))
        pre = tc.linear(tc.gap(f), params.w1, params.b1).data
        return (params, f), [pre]

    (params, f), _ = _redraw(draw, seed)
    arrays = [f, params.w1.data, params.b1.data, params.w2.data, params.b2.data]

    def op(f_, w1, b1, w2, b2):
        p = SscaParams(params.gate_conv1_w, params.gate_conv1_b, params.gate_conv2_w, params.gate_conv2_b, w1, b1, w2, b2, params.alpha)
        return channel_weights(f_, p)

    return grad_check(op, arrays, COMPOSITE_EPS, seed=seed, names=["f", "w1", "b1", "w2", "b2"], op_name="channel_weights")


def check_amplify(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    c, h, w = 3, 4, 5
    arrays = [
        rng.standard_normal((c, h, w)),
        rng.uniform(0.05, 0.95, size=(1, h, w)),
        rng.uniform(0.05, 0.95, size=c),
        np.array([rng.normal(0, 1)]),
    ]
    return grad_check(amplify, arrays, seed=seed, names=["f", "m", "s", "alpha"], op_name="amplify")


def _random_btda(rng, channels: int) -> BtdaParams:
    p = BtdaParams.init(channels, rng, delta_max=3.0)
    p.conv2_w.data[:] = rng.normal(0, 0.2, size=p.conv2_w.shape)
    p.conv2_b.data[:] = rng.normal(0, 0.5, size=2)
    p.gate_w.data[:] = rng.normal(0, 0.2, size=p.gate_w.shape)
    return p


def check_btda_forward(seed: int) -> GradReport:
    rng = np.random.default_rng(seed)
    c = 2
    params = _random_btda(rng, c)
    f_t, f_t2 = rng.standard_normal((2, c, 5, 5))
    names = ["f_t", "f_t2"] + list(params.tensors())
    arrays = [f_t, f_t2] + [t.data for t in params.tensors().values()]

    def op(a, b, *ps):
        res = btda_forward(a, b, BtdaParams(*ps, delta_max=params.delta_max))
        return tc.concat([tc.reshape(res.aligned, (-1,)), res.offset_loss_term])

    return grad_check(op, arrays, COMPOSITE_EPS, seed=seed, names=names, op_name="btda_forward")


def check_ssca_forward(seed: int) -> GradReport:
    c = 2

    def draw(rng):
        params = _random_ssca(rng, c)
        f_t = rng.uniform(0, 1, size=(c, 5, 5))
        f_t2 = np.clip(f_t + rng.normal(0, 0.3, size=f_t.shape), 0.01, 1)
        fused = rng.standard_normal((c, 5, 5))
        cues = build_cues(f_t, f_t2)
        gate_pre = tc.conv2d(cues, params.gate_conv1_w, params.gate_conv1_b).data
        mlp_pre = tc.linear(tc.gap(fused), params.w1, params.b1).data
        return (params, f_t, f_t2, fused), [f_t - f_t2, gate_pre, mlp_pre]

    (params, f_t, f_t2, fused), _ = _redraw(draw, seed)
    tensors = params.tensors()
    names = ["f_t", "f_t2", "fused"] + list(tensors)
    arrays = [f_t, f_t2, fused] + [t.data for t in tensors.values()]

    def op(a, b, f, *ps):
        return ssca_forward(a, b, f, SscaParams(*ps)).amplified

    return grad_check(op, arrays, COMPOSITE_EPS, seed=seed, names=names, op_name="ssca_forward", max_elements=40)


def tiny_config() -> ModelConfig:
    return ModelConfig.from_dict({"encoder": {"stages": 2, "base_channels": 4}, "loss_weights": {"w_off": 0.5, "w_sparse": 0.3}})


def check_total_loss(seed: int) -> GradReport:
    """End-to-end: total loss w.r.t. every parameter group of a tiny model."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    model = Model.init(cfg, seed)
    _perturb_identity_init(model, rng)
    t1 = rng.uniform(0, 1, size=(1, 16, 16))
    t2 = np.clip(t1 + rng.normal(0, 0.2, size=t1.shape), 0, 1)
    target = downsample_mask(rng.uniform(size=(16, 16)) > 0.6, cfg.downsample)
    named = model.named_parameters()
    keys = list(named)

    def op(*ps):
        m = Model.from_named(cfg, dict(zip(keys, ps)))
        res = forward(t1, t2, m)
        loss, _ = total_loss(res.prob, target, res.alignments, res.ssca, cfg.loss_weights)
        return loss

    return grad_check(op, [named[k].data for k in keys], COMPOSITE_EPS, seed=seed, names=keys, max_elements=4, op_name="total_loss")


def _perturb_identity_init(model: Model, rng) -> None:
    """Move zero-initialised BTDA/SSCA pieces off zero so every path carries gradient."""
    for p in model.btda.values():
        p.conv2_w.data[:] = rng.normal(0, 0.2, size=p.conv2_w.shape)
        p.conv2_b.data[:] = rng.normal(0, 0.5, size=2)
        p.gate_w.data[:] = rng.normal(0, 0.2, size=p.gate_w.shape)
    model.ssca.alpha.data[:] = 0.8
    for t in list(model.encoder.values()) + [model.fuse["bias"], model.head["bias"]]:
        if t.ndim == 1:
            t.data[:] = rng.normal(0, 0.1, size=t.shape)


CHECKS: dict[str, Callable[[int], GradReport]] = {
    "elementwise": check_elementwise,
    "conv2d": check_conv2d,
    "gap": check_gap,
    "bilinear_sample": check_bilinear_sample,
    "bound_offsets": check_bound_offsets,
    "align": check_align,
    "spatial_gradient": check_spatial_gradient,
    "dssim": check_dssim,
    "spatial_gate": check_spatial_gate,
    "channel_weights": check_channel_weights,
    "amplify": check_amplify,
    "btda_forward": check_btda_forward,
    "ssca_forward": check_ssca_forward,
    "total_loss": check_total_loss,
}


# ops the acceptance gate covers; the two module-level composites are extra
GATED = (
    "elementwise",
    "conv2d",
    "gap",
    "bilinear_sample",
    "bound_offsets",
    "align",
    "spatial_gradient",
    "dssim",
    "spatial_gate",
    "channel_weights",
    "amplify",
    "total_loss",
)


def run(names=None, seeds=range(20)) -> dict[str, GradReport]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s) {unknown}; known: {sorted(CHECKS)}")
    return {name: merge(name, [CHECKS[name](s) for s in seeds]) for name in names}

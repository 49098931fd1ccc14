"""Change amplifier: multi-cue spatial gate, channel weights, residual gain.

The spatial gate ``M`` (1×H×W) is predicted from a stack of change cues,
the channel weights ``s`` (C) come from a squeeze-excitation MLP on the
fused features, and the output is ``F + alpha * (M * s) * F``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import ShapeError, Tensor

SSIM_WINDOW = 7
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
GRAD_EPS = 1e-8


def gate_net_width(channels: int) -> int:
    return max(channels // 4, 8)


@dataclass
class SscaParams:
    gate_conv1_w: Tensor
    gate_conv1_b: Tensor
    gate_conv2_w: Tensor
    gate_conv2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    alpha: Tensor
    reduction: int = 4
    sparsity_weight: float = 0.0

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, reduction: int = 4, sparsity_weight: float = 0.0) -> "SscaParams":
        if reduction < 1:
            raise ValueError(f"reduction ratio must be >= 1, got {reduction}")
        if sparsity_weight < 0:
            raise ValueError(f"sparsity_weight must be >= 0, got {sparsity_weight}")
        cues = 3 * channels + 1
        mid = gate_net_width(channels)
        hidden = max(channels // reduction, 1)

        def he(shape, fan_in):
            return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        return cls(
            gate_conv1_w=he((mid, cues, 1, 1), cues),
            gate_conv1_b=zeros(mid),
            gate_conv2_w=he((1, mid, 3, 3), mid * 9),
            gate_conv2_b=zeros(1),
            w1=he((hidden, channels), channels),
            b1=zeros(hidden),
            w2=he((channels, hidden), hidden),
            b2=zeros(channels),
            alpha=zeros(1),
            reduction=reduction,
            sparsity_weight=sparsity_weight,
        )

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "gate_net.conv1.weight": self.gate_conv1_w,
            "gate_net.conv1.bias": self.gate_conv1_b,
            "gate_net.conv2.weight": self.gate_conv2_w,
            "gate_net.conv2.bias": self.gate_conv2_b,
            "channel_mlp.w1": self.w1,
            "channel_mlp.b1": self.b1,
            "channel_mlp.w2": self.w2,
            "channel_mlp.b2": self.b2,
            "alpha": self.alpha,
        }

    @classmethod
    def from_tensors(cls, tensors: dict, reduction: int = 4, sparsity_weight: float = 0.0) -> "SscaParams":
        t = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return cls(
            t["gate_net.conv1.weight"],
            t["gate_net.conv1.bias"],
            t["gate_net.conv2.weight"],
            t["gate_net.conv2.bias"],
            t["channel_mlp.w1"],
            t["channel_mlp.b1"],
            t["channel_mlp.w2"],
            t["channel_mlp.b2"],
            t["alpha"],
            reduction=reduction,
            sparsity_weight=sparsity_weight,
        )


@dataclass
class SscaState:
    cues: Tensor
    gate_map: Tensor
    channel_weights: Tensor
    amplified: Tensor


def spatial_gradient(f) -> Tensor:
    """Per-channel gradient magnitude ``sqrt(gx^2 + gy^2 + 1e-8)``."""
    f = tc.as_tensor(f)
    if f.ndim != 3 or f.shape[1] < 2 or f.shape[2] < 2:
        raise ShapeError(f"spatial_gradient needs C×H×W with H, W >= 2, got {f.shape}")
    gx = tc.finite_difference(f, axis=2)
    gy = tc.finite_difference(f, axis=1)
    return tc.sqrt(tc.add(tc.add(tc.square(gx), tc.square(gy)), GRAD_EPS))


def ssim_map(a, b, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Per-channel local SSIM with a uniform window and replicated borders."""
    a, b = tc.as_tensor(a), tc.as_tensor(b)
    # Second moments are shift invariant; centring each channel on its own
    # (constant) mean keeps E[x^2] - E[x]^2 from cancelling in float32.
    shift_a = a.data.mean(axis=(1, 2), keepdims=True)
    shift_b = b.data.mean(axis=(1, 2), keepdims=True)
    ac, bc = tc.sub(a, shift_a), tc.sub(b, shift_b)
    mc_a = tc.box_filter(ac, window)
    mc_b = tc.box_filter(bc, window)
    mu_a = tc.add(mc_a, shift_a)
    mu_b = tc.add(mc_b, shift_b)
    mu_ab = tc.mul(mu_a, mu_b)
    var_a = tc.sub(tc.box_filter(tc.mul(ac, ac), window), tc.mul(mc_a, mc_a))
    var_b = tc.sub(tc.box_filter(tc.mul(bc, bc), window), tc.mul(mc_b, mc_b))
    cov = tc.sub(tc.box_filter(tc.mul(ac, bc), window), tc.mul(mc_a, mc_b))
    num = tc.mul(tc.add(tc.mul(mu_ab, 2.0), c1), tc.add(tc.mul(cov, 2.0), c2))
    den = tc.mul(
        tc.add(tc.add(tc.mul(mu_a, mu_a), tc.mul(mu_b, mu_b)), c1),
        tc.add(tc.add(var_a, var_b), c2),
    )
    return tc.div(num, den)


def dssim(f_t, f_t2, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Channel-averaged ``(1 - SSIM) / 2`` as a ``1×H×W`` map in [0, 1]."""
    f_t, f_t2 = tc.as_tensor(f_t), tc.as_tensor(f_t2)
    if f_t.shape != f_t2.shape or f_t.ndim != 3:
        raise ShapeError(f"dssim: shapes differ or are not C×H×W: {f_t.shape}, {f_t2.shape}")
    if window % 2 == 0:
        raise ValueError(f"dssim window must be odd, got {window}")
    c, h, w = f_t.shape
    dss = tc.mul(tc.sub(1.0, ssim_map(f_t, f_t2, window, c1, c2)), 0.5)
    avg = tc.div(tc.sum_(dss, axis=0), float(c))
    # rounding in the variance terms can push a hair outside [0, 1]
    return tc.clip(avg, 0.0, 1.0)


def build_cues(f_t, f_t2_aligned) -> Tensor:
    """``[|F_t - F_t2|, grad F_t, grad F_t2, DSS]`` stacked to ``(3C+1)×H×W``."""
    f_t, f_t2_aligned = tc.as_tensor(f_t), tc.as_tensor(f_t2_aligned)
    if f_t.shape != f_t2_aligned.shape:
        raise ShapeError(f"build_cues: shape mismatch {f_t.shape} vs {f_t2_aligned.shape}")
    return tc.concat(
        [
            tc.abs_(tc.sub(f_t, f_t2_aligned)),
            spatial_gradient(f_t),
            spatial_gradient(f_t2_aligned),
            dssim(f_t, f_t2_aligned),
        ],
        axis=0,
    )


def spatial_gate(cues, params: SscaParams) -> Tensor:
    cues = tc.as_tensor(cues)
    expected = params.gate_conv1_w.shape[1]
    if cues.ndim != 3 or cues.shape[0] != expected:
        raise ShapeError(f"spatial_gate expects {expected} cue channels, got {cues.shape}")
    hidden = tc.relu(tc.conv2d(cues, params.gate_conv1_w, params.gate_conv1_b))
    return tc.sigmoid(tc.conv2d(hidden, params.gate_conv2_w, params.gate_conv2_b, padding=1))


def channel_weights(f, params: SscaParams) -> Tensor:
    f = tc.as_tensor(f)
    if f.ndim != 3 or f.shape[0] != params.channels:
        raise ShapeError(f"channel_weights expects {params.channels} channels, got {f.shape}")
    hidden = tc.relu(tc.linear(tc.gap(f), params.w1, params.b1))
    return tc.sigmoid(tc.linear(hidden, params.w2, params.b2))


def amplify(f, m, s, alpha) -> Tensor:
    """``F + alpha * (M * s) * F`` with M broadcast over channels and s over space."""
    f, m, s, alpha = (tc.as_tensor(t) for t in (f, m, s, alpha))
    c, h, w = f.shape
    if m.shape != (1, h, w) or s.shape != (c,):
        raise ShapeError(f"amplify: gate {m.shape} / weights {s.shape} do not fit features {f.shape}")
    gate = tc.mul(m, tc.reshape(s, (c, 1, 1)))
    boost = tc.mul(tc.mul(tc.reshape(alpha, (1, 1, 1)), gate), f)
    return tc.add(f, boost)


def gate_sparsity_loss(m) -> Tensor:
    return tc.mean(m)


def ssca_forward(f_t, f_t2_aligned, f_fused, params: SscaParams) -> SscaState:
    cues = build_cues(f_t, f_t2_aligned)
    m = spatial_gate(cues, params)
    s = channel_weights(f_fused, params)
    return SscaState(cues, m, s, amplify(f_fused, m, s, params.alpha))

"""Bi-temporal deformable alignment.

A small conv head looks at the concatenated pre/post features and predicts
a per-pixel 2-vector offset plus one scalar gate. Offsets are squashed to
``delta_max * tanh(raw)``, scaled by the gate, and used to bilinearly
resample the post-change features onto the pre-change grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import ShapeError, Tensor


def offset_head_width(channels: int) -> int:
    return max(channels // 2, 8)


@dataclass
class BtdaParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    delta_max: float = 3.0
    level: int = -1

    def __post_init__(self):
        if not self.delta_max > 0:
            raise ValueError(f"delta_max must be > 0, got {self.delta_max}")

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, delta_max: float = 3.0, level: int = -1) -> "BtdaParams":
        """He-initialised first layer; the offset output layer and gate start at zero."""
        mid = offset_head_width(channels)
        fan_in = 2 * channels * 9
        conv1 = rng.standard_normal((mid, 2 * channels, 3, 3)) * np.sqrt(2.0 / fan_in)
        return cls(
            conv1_w=Tensor(conv1, requires_grad=True),
            conv1_b=Tensor(np.zeros(mid), requires_grad=True),
            conv2_w=Tensor(np.zeros((2, mid, 3, 3)), requires_grad=True),
            conv2_b=Tensor(np.zeros(2), requires_grad=True),
            gate_w=Tensor(np.zeros((1, 2 * channels)), requires_grad=True),
            gate_b=Tensor(np.zeros(1), requires_grad=True),
            delta_max=delta_max,
            level=level,
        )

    @property
    def channels(self) -> int:
        return self.conv1_w.shape[1] // 2

    def tensors(self) -> dict[str, Tensor]:
        return {
            "offset_head.conv1.weight": self.conv1_w,
            "offset_head.conv1.bias": self.conv1_b,
            "offset_head.conv2.weight": self.conv2_w,
            "offset_head.conv2.bias": self.conv2_b,
            "gate_head.weight": self.gate_w,
            "gate_head.bias": self.gate_b,
        }

    @classmethod
    def from_tensors(cls, tensors: dict, delta_max: float = 3.0, level: int = -1) -> "BtdaParams":
        t = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return cls(
            t["offset_head.conv1.weight"],
            t["offset_head.conv1.bias"],
            t["offset_head.conv2.weight"],
            t["offset_head.conv2.bias"],
            t["gate_head.weight"],
            t["gate_head.bias"],
            delta_max=delta_max,
            level=level,
        )


@dataclass
class AlignmentResult:
    aligned: Tensor
    offsets_bounded: Tensor
    gate: Tensor
    offset_loss_term: Tensor
    raw_offsets: Tensor | None = field(default=None, repr=False)

    @property
    def displacement(self) -> np.ndarray:
        """The sampling displacement ``gate * bounded`` actually applied (2×H×W)."""
        return self.gate.data.reshape(1, 1, 1) * self.offsets_bounded.data


def _check_pair(f_t: Tensor, f_t2: Tensor) -> None:
    if f_t.shape != f_t2.shape or f_t.ndim != 3:
        raise ShapeError(f"temporal features must share a C×H×W shape, got {f_t.shape} and {f_t2.shape}")


def predict_offsets(f_t, f_t2, params: BtdaParams) -> tuple[Tensor, Tensor]:
    """Raw ``2×H×W`` offsets and a ``(1,)`` gate from the concatenated features."""
    f_t, f_t2 = tc.as_tensor(f_t), tc.as_tensor(f_t2)
    _check_pair(f_t, f_t2)
    if f_t.shape[0] != params.channels:
        raise ShapeError(f"BTDA built for {params.channels} channels, features have {f_t.shape[0]}")
    both = tc.concat([f_t, f_t2], axis=0)
    hidden = tc.relu(tc.conv2d(both, params.conv1_w, params.conv1_b, padding=1))
    raw = tc.conv2d(hidden, params.conv2_w, params.conv2_b, padding=1)
    gate = tc.sigmoid(tc.linear(tc.gap(both), params.gate_w, params.gate_b))
    return raw, gate


def bound_offsets(raw, delta_max: float) -> Tensor:
    if not delta_max > 0:
        raise ValueError(f"delta_max must be > 0, got {delta_max}")
    return tc.mul(tc.tanh(raw), delta_max)


def offset_norm(bounded) -> Tensor:
    """Frobenius norm of one level's offsets divided by sqrt(element count)."""
    bounded = tc.as_tensor(bounded)
    sq = tc.sum_(tc.square(bounded))
    if not sq.data[0] > 0:
        # sqrt has no derivative at 0; the subgradient 0 is used there
        return tc.mul(sq, 0.0)
    return tc.div(tc.sqrt(sq), float(np.sqrt(bounded.size)))


def offset_loss(bounded_offsets_per_level) -> Tensor:
    levels = list(bounded_offsets_per_level)
    if not levels:
        raise ValueError("offset_loss needs at least one level")
    total = offset_norm(levels[0])
    for b in levels[1:]:
        total = tc.add(total, offset_norm(b))
    return total


def align(f_t2, bounded, gate) -> Tensor:
    """Resample ``f_t2`` at ``grid + gate * bounded``."""
    f_t2, bounded, gate = tc.as_tensor(f_t2), tc.as_tensor(bounded), tc.as_tensor(gate)
    _, h, w = f_t2.shape
    if bounded.shape != (2, h, w):
        raise ShapeError(f"offsets {bounded.shape} do not match features {f_t2.shape}")
    gate = tc.reshape(gate, (1, 1, 1))
    coords = tc.add(tc.identity_grid(h, w), tc.mul(gate, bounded))
    return tc.bilinear_sample(f_t2, coords)


def btda_forward(f_t, f_t2, params: BtdaParams) -> AlignmentResult:
    raw, gate = predict_offsets(f_t, f_t2, params)
    bounded = bound_offsets(raw, params.delta_max)
    aligned = align(f_t2, bounded, gate)
    return AlignmentResult(aligned, bounded, gate, offset_norm(bounded), raw)

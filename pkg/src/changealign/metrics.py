"""Binary change-detection metrics from a global (micro-averaged) confusion matrix."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts (or, from :func:`invert_from_pro`, fractions summing to 1)."""

    tp: float
    fp: float
    fn: float
    tn: float

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise MetricsError(f"{name} must be non-negative, got {getattr(self, name)}")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricReport:
    precision: float
    recall: float
    oa: float
    f1: float
    iou: float
    kappa: float
    degenerate_flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise MetricsError(f"{name} mask must be binary (0/1), found values {np.unique(arr)[:5]}")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionMatrix:
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise MetricsError(f"pred {p.shape} and gt {g.shape} differ in shape")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionMatrix(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num, den, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return float(num / den)


def metrics_from_cm(cm: ConfusionMatrix) -> MetricReport:
    total = cm.total
    if total <= 0:
        raise MetricsError("confusion matrix is empty")
    tp, fp, fn, tn = (float(v) for v in (cm.tp, cm.fp, cm.fn, cm.tn))
    flags: list[str] = []
    p = _ratio(tp, tp + fp, "precision", flags)
    r = _ratio(tp, tp + fn, "recall", flags)
    oa = (tp + tn) / total
    f1 = _ratio(2 * p * r, p + r, "f1", flags)
    iou = _ratio(tp, tp + fp + fn, "iou", flags)
    pe = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (total * total)
    kappa = _ratio(oa - pe, 1 - pe, "kappa", flags)
    return MetricReport(p, r, oa, f1, iou, kappa, flags)


def invert_from_pro(p: float, r: float, oa: float) -> ConfusionMatrix:
    """Recover the normalised confusion matrix implied by (precision, recall, OA).

    With fractions summing to 1: ``fn = tp (1/r - 1)``, ``fp = tp (1/p - 1)``
    and ``fp + fn = 1 - oa`` fix ``tp``; then ``tn = oa - tp``.
    """
    if not (0 < p <= 1 and 0 < r <= 1):
        raise MetricsError(f"precision and recall must lie in (0, 1], got p={p}, r={r}")
    if not 0 < oa < 1:
        raise MetricsError(f"overall accuracy must lie in (0, 1), got {oa}")
    miss, spill = 1 / r - 1, 1 / p - 1
    if miss + spill == 0:
        raise MetricsError("infeasible: p = r = 1 forces oa = 1")
    tp = (1 - oa) / (miss + spill)
    if tp > 1:
        raise MetricsError(f"infeasible: tp = {tp:.6f} > 1")
    tn = oa - tp
    if tn < 0:
        raise MetricsError(f"infeasible: tn = oa - tp = {tn:.6f} < 0")
    return ConfusionMatrix(tp, tp * spill, tp * miss, tn)


def iou_from_f1(f1: float) -> float:
    return f1 / (2 - f1)

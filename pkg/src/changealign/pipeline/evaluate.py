"""Thresholded prediction, micro-averaged evaluation, and file-based inference."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..fileformats import read_pnm, write_mask, write_pnm
from ..metrics import ConfusionMatrix, MetricReport, confusion, metrics_from_cm
from ..tensorcore import ShapeError, no_grad
from .model import Model, forward, upsample_mask


@dataclass
class Prediction:
    prob: np.ndarray  # feature resolution, H'×W'
    mask: np.ndarray  # full resolution, H×W, bool
    gate_map: np.ndarray | None = None
    dssim: np.ndarray | None = None


def predict(model: Model, t1, t2, threshold: float | None = None) -> Prediction:
    threshold = model.config.threshold if threshold is None else threshold
    with no_grad():
        res = forward(t1, t2, model)
    prob = res.prob.data[0]
    mask = upsample_mask(prob > threshold, model.config.downsample)
    gate = dss = None
    if res.ssca is not None:
        gate = res.ssca.gate_map.data[0]
        dss = res.ssca.cues.data[-1]
    return Prediction(prob, mask, gate, dss)


@dataclass
class EvalResult:
    report: MetricReport
    counts: ConfusionMatrix
    per_image: list[tuple[str, ConfusionMatrix]]

    def as_json(self, **extra) -> dict:
        out = self.report.as_dict()
        out["counts"] = self.counts.as_dict()
        out.update(extra)
        return out


def evaluate_masks(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> EvalResult:
    """Accumulate one global confusion matrix over ``(id, pred, gt)`` triples."""
    if not pairs:
        raise ValueError("cannot evaluate an empty dataset")
    per_image = [(sid, confusion(pred, gt)) for sid, pred, gt in pairs]
    total = ConfusionMatrix(0, 0, 0, 0)
    for _, cm in per_image:
        total = total + cm
    return EvalResult(metrics_from_cm(total), total, per_image)


def evaluate(model: Model, dataset: Sequence, threshold: float | None = None, pred_dir=None) -> EvalResult:
    pairs = []
    for i, s in enumerate(dataset):
        sid = getattr(s, "id", f"{i:04d}")
        gt = getattr(s, "change_mask", None)
        if gt is None:
            gt = s.mask
        pred = predict(model, s.t1, s.t2, threshold)
        if pred_dir is not None:
            Path(pred_dir).mkdir(parents=True, exist_ok=True)
            write_mask(Path(pred_dir) / f"{sid}_pred.pgm", pred.mask)
        pairs.append((sid, pred.mask, gt))
    return evaluate_masks(pairs)


def _to_display(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    factor = shape[0] // arr.shape[0]
    return upsample_mask(arr, factor) if factor > 1 else arr


def infer(model: Model, t1_path, t2_path, out_path, *, threshold: float | None = None, prob_path=None, debug_dir=None) -> Prediction:
    t1, t2 = read_pnm(t1_path), read_pnm(t2_path)
    if t1.shape != t2.shape:
        raise ShapeError(f"{t1_path} {t1.shape} and {t2_path} {t2.shape} differ in size")
    pred = predict(model, t1, t2, threshold)
    write_mask(out_path, pred.mask)
    full = t1.shape[1:]
    if prob_path is not None:
        write_pnm(prob_path, _to_display(pred.prob, full))
    if debug_dir is not None:
        debug_dir = Path(debug_dir)
        debug_dir.mkdir(parents=True, exist_ok=True)
        if pred.gate_map is not None:
            write_pnm(debug_dir / "gate_map.pgm", _to_display(pred.gate_map, full))
            write_pnm(debug_dir / "dssim.pgm", _to_display(pred.dssim, full))
    return pred


def overlay(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Grey-level agreement map: TN 0, FP 1/3, FN 2/3, TP 1."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    out = np.zeros(pred.shape)
    out[pred & ~gt] = 1 / 3
    out[~pred & gt] = 2 / 3
    out[pred & gt] = 1.0
    return out

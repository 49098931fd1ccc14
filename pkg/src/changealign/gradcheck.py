"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensorcore import NonFiniteError, Tensor, precision

DEFAULT_TOL = 1e-2
# A projected-gradient entry smaller than this fraction of the largest one
# is a cancellation residue: it sits within ~100 float32 ulps of zero, so its
# relative error is noise. Such projections are redrawn.
CANCELLATION_FLOOR = 1e-5
MAX_PROJECTIONS = 50


@dataclass
class GradReport:
    op_name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool
    n_checked: int = 0
    worst: str = ""
    failures: list[str] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.op_name}: max_rel_err={self.max_rel_err:.3e} "
            f"max_abs_err={self.max_abs_err:.3e} n={self.n_checked}"
            + (f" worst={self.worst}" if self.worst else "")
        )


def _project(op, base, wrt, rng):
    args = [Tensor(x, requires_grad=i in wrt) for i, x in enumerate(base)]
    out = op(*args)
    proj = rng.standard_normal(out.shape).astype(np.float32)
    out.backward(proj)
    return proj, {i: (args[i].grad if args[i].grad is not None else np.zeros_like(base[i])) for i in wrt}


def _cancelled(grads) -> bool:
    mags = np.concatenate([np.abs(g).ravel() for g in grads])
    top = mags.max(initial=0.0)
    return bool(np.any((mags > 0) & (mags < CANCELLATION_FLOOR * top)))


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    *,
    wrt: Sequence[int] | None = None,
    names: Sequence[str] | None = None,
    seed: int = 0,
    max_elements: int | None = None,
    tol: float = DEFAULT_TOL,
    op_name: str | None = None,
) -> GradReport:
    """Compare the analytic gradient of ``op`` with central differences.

    The output is reduced to a scalar by a random projection, redrawn (up
    to ``MAX_PROJECTIONS`` times, deterministically from ``seed``) while some
    nonzero gradient entry is below ``CANCELLATION_FLOOR`` times the largest
    (vector outputs only).
    The analytic gradient is computed in float32. The numeric side re-evaluates
    ``op`` in float64 at the same (float32-rounded) point, so that its
    truncation and rounding error stays well below ``tol``.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    name = op_name or getattr(op, "__name__", "op")
    base = [np.asarray(x, dtype=np.float32) for x in inputs]
    wrt = list(range(len(base))) if wrt is None else list(wrt)
    names = list(names) if names is not None else [f"arg{i}" for i in range(len(base))]
    rng = np.random.default_rng(seed)

    try:
        for _ in range(MAX_PROJECTIONS):
            proj, analytic = _project(op, base, wrt, rng)
            # a scalar output can only be rescaled, never un-cancelled
            if proj.size == 1 or not _cancelled(analytic.values()):
                break
    except NonFiniteError as exc:
        return GradReport(name, float("inf"), float("inf"), False, failures=[f"forward/backward: {exc}"])
    proj64 = proj.astype(np.float64).ravel()

    def objective(values: list[np.ndarray]) -> float:
        with precision(np.float64):
            res = op(*[Tensor(v) for v in values])
        return float(np.dot(res.data.ravel(), proj64))

    max_abs = max_rel = 0.0
    worst = ""
    failures: list[str] = []
    n_checked = 0
    for i in wrt:
        flat_n = base[i].size
        idx = np.arange(flat_n)
        if max_elements is not None and flat_n > max_elements:
            idx = np.sort(rng.choice(flat_n, size=max_elements, replace=False))
        point = [x.astype(np.float64) for x in base]
        for j in idx:
            pos = np.unravel_index(j, base[i].shape)
            orig = point[i][pos]
            try:
                point[i][pos] = orig + eps
                fp = objective(point)
                point[i][pos] = orig - eps
                fm = objective(point)
            except NonFiniteError as exc:
                failures.append(f"{names[i]}{tuple(int(p) for p in pos)}: {exc}")
                point[i][pos] = orig
                continue
            point[i][pos] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[i][pos])
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), 1e-6)
            n_checked += 1
            max_abs = max(max_abs, abs_err)
            if rel_err > max_rel:
                max_rel = rel_err
                worst = f"{names[i]}{tuple(int(p) for p in pos)} analytic={a:.6g} numeric={numeric:.6g}"
    passed = not failures and max_rel <= tol
    return GradReport(name, max_abs, max_rel, passed, n_checked, worst, failures)

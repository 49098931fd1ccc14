"""Deterministic SGD-with-momentum trainer."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..tensorcore import NonFiniteError
from .config import ModelConfig
from .model import Model, downsample_mask, forward, make_rng, total_loss

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3
ORDER_STREAM = 0x5EED


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: "TrainState"):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainState:
    step: int
    model: Model
    velocity: dict[str, np.ndarray]
    seed: int
    history: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def snapshot(self) -> "TrainState":
        model = Model.init(self.model.config, 0)
        model.load_arrays(self.model.state_arrays())
        return TrainState(self.step, model, copy.deepcopy(self.velocity), self.seed, list(self.history))

    def meta(self) -> dict:
        return {"step": self.step, "seed": self.seed, "history": [list(h) for h in self.history]}


@dataclass
class Example:
    t1: np.ndarray
    t2: np.ndarray
    target: np.ndarray


def prepare(samples: Sequence, config: ModelConfig) -> list[Example]:
    """Pair images with their feature-resolution targets.

    ``samples`` may be :class:`SceneSample` or :class:`LoadedSample` objects.
    """
    out = []
    for s in samples:
        mask = getattr(s, "change_mask", None)
        if mask is None:
            mask = s.mask
        out.append(Example(np.asarray(s.t1, np.float32), np.asarray(s.t2, np.float32), downsample_mask(mask, config.downsample)))
    return out


def _order(seed: int, n: int):
    rng = make_rng(seed, ORDER_STREAM)
    while True:
        yield from rng.permutation(n).tolist()


def train(
    config: ModelConfig,
    dataset: Sequence,
    steps: int,
    seed: int,
    *,
    model: Model | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run ``steps`` minibatch updates; identical arguments give identical results."""
    examples = prepare(dataset, config)
    if not examples:
        raise ValueError("training dataset is empty")
    tc_ = config.train
    model = model if model is not None else Model.init(config, seed)
    params = model.active_parameters()
    state = TrainState(0, model, {k: np.zeros_like(p.data) for k, p in params.items()}, seed)
    last_good = state.snapshot()
    order = _order(seed, len(examples))
    for step in range(steps):
        for p in params.values():
            p.zero_grad()
        sums = np.zeros(4)
        try:
            # non-finite values surface as NonFiniteError, not numpy warnings
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                for _ in range(tc_.batch_size):
                    ex = examples[next(order)]
                    res = forward(ex.t1, ex.t2, model)
                    loss, comps = total_loss(res.prob, ex.target, res.alignments, res.ssca, config.loss_weights)
                    loss.backward(np.full((1,), 1.0 / tc_.batch_size, dtype=np.float32))
                    sums += [comps["total"], comps["cls"], comps["off"], comps["sparse"]]
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", last_good) from None
        means = sums / tc_.batch_size
        if not np.isfinite(means).all() or means[0] > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"step {step}: loss {means[0]} diverged", last_good)
        state.history.append((step, *map(float, means)))
        for name, p in params.items():
            g = p.grad if p.grad is not None else 0.0
            v = state.velocity[name]
            v *= tc_.momentum
            v += g
            p.data -= np.float32(tc_.lr) * v
        state.step = step + 1
        if step % 50 == 0:
            log.info("step %d loss %.5f (cls %.5f off %.5f sparse %.5f)", step, *means)
        if tc_.checkpoint_every and state.step % tc_.checkpoint_every == 0:
            last_good = state.snapshot()
            if on_checkpoint is not None:
                on_checkpoint(state)
    return state

"""Siamese change-detection model: encoder, BTDA, fusion, SSCA, head, loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensorcore as tc
from ..btda import AlignmentResult, BtdaParams, btda_forward, offset_loss
from ..fileformats import load_tensor_dir, save_tensor_dir
from ..ssca import SscaParams, SscaState, gate_sparsity_loss, ssca_forward
from ..tensorcore import NonFiniteError, ShapeError, Tensor
from .config import ModelConfig

BCE_CLAMP = 1e-6


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent Philox stream per ``(seed, stream)`` pair."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), stream])))


def _he(rng, shape, fan_in) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Model:
    """Parameters plus config. Every parameter group is always allocated,
    in a fixed RNG order, so toggling BTDA/SSCA never changes shared weights."""

    def __init__(self, config: ModelConfig, encoder: dict, btda: dict[int, BtdaParams], fuse: dict, ssca: SscaParams, head: dict):
        self.config = config
        self.encoder = encoder
        self.btda = btda
        self.fuse = fuse
        self.ssca = ssca
        self.head = head

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = make_rng(seed)
        enc = {}
        c_in = config.encoder.in_channels
        for s in range(config.encoder.stages):
            c = config.stage_channels(s)
            enc[f"stage{s}.down.weight"] = _he(rng, (c, c_in, 3, 3), c_in * 9)
            enc[f"stage{s}.down.bias"] = _zeros(c)
            enc[f"stage{s}.conv.weight"] = _he(rng, (c, c, 3, 3), c * 9)
            enc[f"stage{s}.conv.bias"] = _zeros(c)
            c_in = c
        c = config.feature_channels
        fuse = {"weight": _he(rng, (c, 2 * c, 1, 1), 2 * c), "bias": _zeros(c)}
        head = {"weight": _he(rng, (1, c, 1, 1), c), "bias": _zeros(1)}
        btda = {
            lv: BtdaParams.init(config.stage_channels(lv), rng, config.btda.delta_max, lv)
            for lv in config.btda_levels()
        }
        ssca = SscaParams.init(c, rng, config.ssca.r, config.loss_weights.w_sparse)
        return cls(config, enc, btda, fuse, ssca, head)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.items()}
        for lv, p in self.btda.items():
            out.update({f"btda.level{lv}.{k}": v for k, v in p.tensors().items()})
        out.update({f"fuse.{k}": v for k, v in self.fuse.items()})
        out.update({f"ssca.{k}": v for k, v in self.ssca.tensors().items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def active_parameters(self) -> dict[str, Tensor]:
        """Parameters that influence the output under the current config."""
        return {
            k: v
            for k, v in self.named_parameters().items()
            if not (k.startswith("btda.") and not self.config.btda.enabled)
            and not (k.startswith("ssca.") and not self.config.ssca.enabled)
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint is missing {sorted(missing)}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float32)

    def with_config(self, config: ModelConfig) -> "Model":
        """Same parameter tensors (shared, not copied) under a different config."""
        return Model(config, self.encoder, self.btda, self.fuse, self.ssca, self.head)

    def save(self, directory, extra_meta: dict | None = None) -> None:
        meta = {"config": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        save_tensor_dir(directory, self.state_arrays(), meta)

    @classmethod
    def from_named(cls, config: ModelConfig, named: dict) -> "Model":
        """Build a model around existing tensors keyed like :meth:`named_parameters`."""

        def group(prefix):
            return {k[len(prefix) :]: v for k, v in named.items() if k.startswith(prefix)}

        btda = {
            lv: BtdaParams.from_tensors(group(f"btda.level{lv}."), config.btda.delta_max, lv)
            for lv in config.btda_levels()
        }
        ssca = SscaParams.from_tensors(group("ssca."), config.ssca.r, config.loss_weights.w_sparse)
        return cls(config, group("encoder."), btda, group("fuse."), ssca, group("head."))

    @classmethod
    def load(cls, directory) -> tuple["Model", dict]:
        arrays, meta = load_tensor_dir(Path(directory))
        config = ModelConfig.from_dict(meta["config"])
        model = cls.init(config, 0)
        model.load_arrays(arrays)
        return model, meta


@dataclass
class ForwardResult:
    prob: Tensor
    alignments: list[AlignmentResult] = field(default_factory=list)
    ssca: SscaState | None = None
    features: tuple[Tensor, Tensor] | None = None


def encoder_stage(x: Tensor, model: Model, s: int) -> Tensor:
    e = model.encoder
    x = tc.relu(tc.conv2d(x, e[f"stage{s}.down.weight"], e[f"stage{s}.down.bias"], stride=2, padding=(0, 1)))
    return tc.relu(tc.conv2d(x, e[f"stage{s}.conv.weight"], e[f"stage{s}.conv.bias"], padding=1))


def _check_image(image: Tensor, config: ModelConfig) -> None:
    if image.ndim != 3 or image.shape[0] != config.encoder.in_channels:
        raise ShapeError(f"expected {config.encoder.in_channels}×H×W image, got {image.shape}")
    d = config.downsample
    if image.shape[1] % d or image.shape[2] % d:
        raise ShapeError(f"image size {image.shape[1:]} is not divisible by 2^stages = {d}")


def encode(image, model: Model) -> Tensor:
    """Deepest encoder features ``C×(H/2^S)×(W/2^S)`` for one image."""
    image = tc.as_tensor(image)
    _check_image(image, model.config)
    x = image
    for s in range(model.config.encoder.stages):
        x = encoder_stage(x, model, s)
    return x


def forward(t1, t2, model: Model) -> ForwardResult:
    """Encode both dates with shared weights, align, fuse, amplify, classify."""
    cfg = model.config
    f1, f2 = tc.as_tensor(t1), tc.as_tensor(t2)
    _check_image(f1, cfg)
    if f1.shape != f2.shape:
        raise ShapeError(f"t1 {f1.shape} and t2 {f2.shape} differ")
    alignments = []
    levels = set(cfg.btda_levels()) if cfg.btda.enabled else set()
    for s in range(cfg.encoder.stages):
        f1 = encoder_stage(f1, model, s)
        f2 = encoder_stage(f2, model, s)
        if s in levels:
            res = btda_forward(f1, f2, model.btda[s])
            alignments.append(res)
            f2 = res.aligned
    fused = tc.relu(tc.conv2d(tc.concat([f1, f2], axis=0), model.fuse["weight"], model.fuse["bias"]))
    state = None
    if cfg.ssca.enabled:
        state = ssca_forward(f1, f2, fused, model.ssca)
        fused = state.amplified
    prob = tc.sigmoid(tc.conv2d(fused, model.head["weight"], model.head["bias"]))
    return ForwardResult(prob, alignments, state, (f1, f2))


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Area-majority downsampling: a block is change when >= half its pixels are."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask {mask.shape} not divisible by {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor).astype(np.float64)
    return blocks.mean(axis=(1, 3)) >= 0.5


def upsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(mask, factor, axis=0), factor, axis=1)


def bce(prob, target) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-6, 1 - 1e-6]."""
    p = tc.clip(prob, BCE_CLAMP, 1 - BCE_CLAMP)
    y = tc.as_tensor(np.asarray(target, dtype=np.float64))
    pos = tc.mul(y, tc.log(p))
    neg = tc.mul(tc.sub(1.0, y), tc.log(tc.sub(1.0, p)))
    return tc.neg(tc.mean(tc.add(pos, neg)))


def total_loss(prob, gt_mask_downsampled, alignments, ssca_state, weights) -> tuple[Tensor, dict[str, float]]:
    """``BCE + w_off * L_off + w_sparse * mean(M)`` and its components."""
    prob = tc.as_tensor(prob)
    gt = np.asarray(gt_mask_downsampled)
    if gt.shape != prob.shape[-2:]:
        raise ShapeError(f"target {gt.shape} does not match probability map {prob.shape}")
    builders = {"cls": lambda: bce(prob, gt.reshape(prob.shape))}
    if alignments:
        builders["off"] = lambda: offset_loss([a.offsets_bounded for a in alignments])
    if ssca_state is not None:
        builders["sparse"] = lambda: gate_sparsity_loss(ssca_state.gate_map)
    terms: dict[str, Tensor] = {}
    for name, build in builders.items():
        try:
            terms[name] = build()
        except NonFiniteError as exc:
            raise NonFiniteError(f"loss component {name}: {exc}") from None
    total = terms["cls"]
    if "off" in terms and weights.w_off:
        total = tc.add(total, tc.mul(terms["off"], weights.w_off))
    if "sparse" in terms and weights.w_sparse:
        total = tc.add(total, tc.mul(terms["sparse"], weights.w_sparse))
    comps = {name: float(t.data[0]) for name, t in terms.items()}
    comps.setdefault("off", 0.0)
    comps.setdefault("sparse", 0.0)
    comps["total"] = float(total.data[0])
    for name, v in comps.items():
        if not np.isfinite(v):
            raise NonFiniteError(f"loss component {name} is not finite")
    return total, comps

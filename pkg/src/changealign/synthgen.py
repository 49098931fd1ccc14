"""Deterministic synthetic bi-temporal scenes with known warp and change mask.

T1 is a smooth blob texture. T2 is T1 resampled through a bounded
displacement field, with change objects painted on top, then a per-image
gain/bias and additive Gaussian noise. Each sample is a pure function of
its :class:`SceneSpec` (seed included); randomness comes from a Philox
counter-based generator keyed by the seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .fileformats import read_mask, read_pnm, read_tnsr, write_mask, write_pnm, write_tnsr
from .tensorcore import bilinear_sample, identity_grid, no_grad

WARP_KINDS = ("none", "translation", "affine", "smooth-field")
SHAPES = ("rect", "disk")
MAX_PLACEMENT_TRIES = 200


class SceneError(ValueError):
    pass


@dataclass
class WarpSpec:
    kind: str = "translation"
    max_displacement: float = 2.0
    translation: tuple[float, float] | None = None  # fixed (dx, dy); random when None


@dataclass
class RadiometricSpec:
    gain_range: tuple[float, float] = (0.9, 1.1)
    bias_range: tuple[float, float] = (-0.05, 0.05)
    noise_std: float = 0.02


@dataclass
class ChangeSpec:
    n_objects: int = 3
    size_range: tuple[int, int] = (12, 24)
    shape: str = "rect"


@dataclass
class SceneSpec:
    seed: int = 0
    size: tuple[int, int] = (96, 96)
    n_background_blobs: int = 24
    n_structures: int = 8  # static sharp-edged patches, present at both dates
    structure_size: tuple[int, int] = (4, 12)
    channels: int = 1
    warp: WarpSpec = field(default_factory=WarpSpec)
    radiometric: RadiometricSpec = field(default_factory=RadiometricSpec)
    changes: ChangeSpec = field(default_factory=ChangeSpec)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        h, w = self.size
        if h < 2 or w < 2:
            raise SceneError(f"size must be at least 2×2, got {self.size}")
        if self.channels not in (1, 3):
            raise SceneError(f"channels must be 1 or 3, got {self.channels}")
        if self.warp.kind not in WARP_KINDS:
            raise SceneError(f"warp kind {self.warp.kind!r} not in {WARP_KINDS}")
        if self.warp.max_displacement < 0:
            raise SceneError("max_displacement must be >= 0")
        if self.warp.translation is not None:
            if max(abs(v) for v in self.warp.translation) > self.warp.max_displacement:
                raise SceneError(f"translation {self.warp.translation} exceeds max_displacement")
        rad = self.radiometric
        if rad.noise_std < 0:
            raise SceneError("noise_std must be >= 0")
        for name, (lo, hi) in (("gain_range", rad.gain_range), ("bias_range", rad.bias_range), ("size_range", self.changes.size_range)):
            if lo > hi:
                raise SceneError(f"{name} is not ordered: {(lo, hi)}")
        if self.changes.shape not in SHAPES:
            raise SceneError(f"change shape {self.changes.shape!r} not in {SHAPES}")
        if self.changes.n_objects < 0 or self.n_background_blobs < 0 or self.n_structures < 0:
            raise SceneError("object, blob and structure counts must be >= 0")
        lo, hi = self.structure_size
        if self.n_structures and not 1 <= lo <= hi <= min(h, w):
            raise SceneError(f"structure_size {self.structure_size} does not fit a {h}×{w} image")
        if self.changes.n_objects and (self.changes.size_range[0] < 1 or self.changes.size_range[1] > min(h, w)):
            raise SceneError(f"size_range {self.changes.size_range} does not fit a {h}×{w} image")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        warp = dict(d.get("warp", {}))
        if warp.get("translation") is not None:
            warp["translation"] = tuple(warp["translation"])
        rad = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("radiometric", {}).items()}
        chg = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("changes", {}).items()}
        return cls(
            seed=int(d.get("seed", 0)),
            size=tuple(d.get("size", (96, 96))),
            n_background_blobs=int(d.get("n_background_blobs", 24)),
            n_structures=int(d.get("n_structures", 8)),
            structure_size=tuple(d.get("structure_size", (4, 12))),
            channels=int(d.get("channels", 1)),
            warp=WarpSpec(**warp),
            radiometric=RadiometricSpec(**rad),
            changes=ChangeSpec(**chg),
        )


@dataclass
class SceneSample:
    t1: np.ndarray
    t2: np.ndarray
    change_mask: np.ndarray
    true_warp: np.ndarray
    spec: SceneSpec
    clip_fraction: float = 0.0


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def blob_texture(rng: np.random.Generator, h: int, w: int, n_blobs: int, channels: int = 1) -> np.ndarray:
    """Sum of random anisotropic Gaussian blobs, rescaled to [0.1, 0.9]."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    out = np.zeros((channels, h, w))
    scale = min(h, w)
    for c in range(channels):
        img = np.zeros((h, w))
        for _ in range(n_blobs):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            sx, sy = rng.uniform(0.04, 0.15, size=2) * scale
            amp = rng.uniform(-1.0, 1.0)
            img += amp * np.exp(-0.5 * (((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2))
        lo, hi = img.min(), img.max()
        out[c] = 0.5 if hi - lo < 1e-12 else 0.1 + 0.8 * (img - lo) / (hi - lo)
    return out.astype(np.float32)


def add_structures(rng: np.random.Generator, image: np.ndarray, n: int, size_range: tuple[int, int]) -> np.ndarray:
    """Paint ``n`` flat rectangles that contrast with the texture under them.

    They stand in for buildings and roads: unchanged between dates, but
    their edges turn any misregistration into strong pseudo-change.
    """
    out = image.copy()
    c, h, w = out.shape
    lo, hi = size_range
    for _ in range(n):
        sh, sw = rng.integers(lo, hi + 1, size=2)
        y0, x0 = int(rng.integers(0, h - sh + 1)), int(rng.integers(0, w - sw + 1))
        patch = out[:, y0 : y0 + sh, x0 : x0 + sw]
        under = patch.mean(axis=(1, 2))
        value = np.where(under > 0.5, rng.uniform(0.05, 0.25, size=c), rng.uniform(0.75, 0.95, size=c))
        patch[:] = value[:, None, None]
    return out


def warp_field(rng: np.random.Generator, spec: WarpSpec, h: int, w: int) -> np.ndarray:
    """``2×H×W`` sampling displacement with every component bounded by max_displacement."""
    m = float(spec.max_displacement)
    if spec.kind == "none" or m == 0:
        return np.zeros((2, h, w), dtype=np.float32)
    if spec.kind == "translation":
        dx, dy = spec.translation if spec.translation is not None else rng.uniform(-m, m, size=2)
        field_ = np.stack([np.full((h, w), dx), np.full((h, w), dy)])
    elif spec.kind == "affine":
        ys, xs = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
        a = rng.uniform(-1, 1, size=(2, 2)) * 0.05
        t = rng.uniform(-1, 1, size=2)
        field_ = np.stack([a[0, 0] * xs + a[0, 1] * ys + t[0], a[1, 0] * xs + a[1, 1] * ys + t[1]])
        field_ *= m / np.abs(field_).max()
    else:  # smooth-field
        ys, xs = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
        field_ = np.zeros((2, h, w))
        for comp in range(2):
            for _ in range(int(rng.integers(1, 5))):
                fx, fy = rng.uniform(0.3, 1.5, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                field_[comp] += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
        peak = np.abs(field_).max()
        if peak > 0:
            field_ *= m / peak
    return np.clip(field_, -m, m).astype(np.float32)


def apply_warp(image: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """``out(p) = image(p + displacement(p))`` by bilinear sampling with clamped borders."""
    _, h, w = image.shape
    with no_grad():
        coords = identity_grid(h, w) + displacement
        return bilinear_sample(image, coords).data


def _object_mask(rng: np.random.Generator, h: int, w: int, spec: ChangeSpec, taken: np.ndarray) -> np.ndarray:
    lo, hi = spec.size_range
    ys, xs = np.ogrid[:h, :w]
    for _ in range(MAX_PLACEMENT_TRIES):
        sh, sw = rng.integers(lo, hi + 1, size=2)
        if spec.shape == "disk":
            sw = sh
        y0 = int(rng.integers(0, h - sh + 1))
        x0 = int(rng.integers(0, w - sw + 1))
        if spec.shape == "rect":
            mask = np.zeros((h, w), dtype=bool)
            mask[y0 : y0 + sh, x0 : x0 + sw] = True
        else:
            r = sh / 2
            mask = (ys - (y0 + r - 0.5)) ** 2 + (xs - (x0 + r - 0.5)) ** 2 <= r * r
        # keep a one-pixel gap between objects
        grown = mask.copy()
        grown[1:] |= mask[:-1]
        grown[:-1] |= mask[1:]
        grown[:, 1:] |= grown[:, :-1].copy()
        grown[:, :-1] |= grown[:, 1:].copy()
        if not (grown & taken).any():
            return mask
    raise SceneError(f"could not place a change object after {MAX_PLACEMENT_TRIES} tries")


def gen_scene(spec: SceneSpec) -> SceneSample:
    spec.validate()
    h, w = spec.size
    rng = rng_for(spec.seed)
    t1 = blob_texture(rng, h, w, spec.n_background_blobs, spec.channels)
    if spec.n_structures:
        t1 = add_structures(rng, t1, spec.n_structures, spec.structure_size)
    warp = warp_field(rng, spec.warp, h, w)
    t2 = apply_warp(t1, warp) if spec.warp.kind != "none" else t1.copy()

    mask = np.zeros((h, w), dtype=bool)
    for _ in range(spec.changes.n_objects):
        obj = _object_mask(rng, h, w, spec.changes, mask)
        under = t2[:, obj].mean(axis=1)
        # pick an intensity clearly away from what it covers
        value = np.where(under > 0.5, rng.uniform(0.0, 0.2, size=spec.channels), rng.uniform(0.8, 1.0, size=spec.channels))
        t2[:, obj] = value[:, None].astype(np.float32)
        mask |= obj

    rad = spec.radiometric
    gain = rng.uniform(*rad.gain_range)
    bias = rng.uniform(*rad.bias_range)
    if gain != 1 or bias != 0:
        t2 = (t2 * np.float32(gain) + np.float32(bias)).astype(np.float32)
    if rad.noise_std > 0:
        t2 = t2 + rng.normal(0.0, rad.noise_std, size=t2.shape).astype(np.float32)
    clipped = float(np.mean((t2 < 0) | (t2 > 1)))
    t2 = np.clip(t2, 0, 1).astype(np.float32)
    return SceneSample(t1, t2, mask, warp, spec, clipped)


# ---------------------------------------------------------------- datasets


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    ratios = list(ratios) + [0] * (3 - len(ratios))
    total = sum(ratios)
    if total <= 0 or any(r < 0 for r in ratios):
        raise SceneError(f"bad split ratios {ratios}")
    n_train = int(round(n * ratios[0] / total))
    n_val = min(int(round(n * ratios[1] / total)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def gen_dataset(base_seed: int, n: int, spec_template: SceneSpec, ratios=(8, 1, 1)) -> tuple[list[SceneSample], dict]:
    """Generate ``n`` samples with seeds ``base_seed + i`` and a manifest dict."""
    if n < 1:
        raise SceneError(f"n must be >= 1, got {n}")
    samples = [gen_scene(replace(spec_template, seed=base_seed + i)) for i in range(n)]
    n_train, n_val, _ = split_counts(n, ratios)
    ids = [f"{i:04d}" for i in range(n)]
    manifest = {
        "base_seed": base_seed,
        "n": n,
        "ratios": list(ratios),
        "split": {
            "train": ids[:n_train],
            "val": ids[n_train : n_train + n_val],
            "test": ids[n_train + n_val :],
        },
        "samples": [
            {
                "id": sid,
                "spec": s.spec.to_dict(),
                "clip_fraction": s.clip_fraction,
                "files": {
                    "t1": f"{sid}_t1.{_ext(s)}",
                    "t2": f"{sid}_t2.{_ext(s)}",
                    "mask": f"{sid}_mask.pgm",
                    "warp": f"{sid}_warp.tnsr",
                },
            }
            for sid, s in zip(ids, samples)
        ],
    }
    return samples, manifest


def _ext(sample: SceneSample) -> str:
    return "pgm" if sample.spec.channels == 1 else "ppm"


def write_dataset(out_dir, samples: list[SceneSample], manifest: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for entry, s in zip(manifest["samples"], samples):
        files = entry["files"]
        write_pnm(out / files["t1"], s.t1)
        write_pnm(out / files["t2"], s.t2)
        write_mask(out / files["mask"], s.change_mask)
        write_tnsr(out / files["warp"], s.true_warp)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def regenerate(manifest: dict) -> list[SceneSample]:
    return [gen_scene(SceneSpec.from_dict(e["spec"])) for e in manifest["samples"]]


@dataclass
class LoadedSample:
    id: str
    t1: np.ndarray
    t2: np.ndarray
    mask: np.ndarray
    warp: np.ndarray | None = None


def load_dataset(data_dir, split: str | None = None) -> list[LoadedSample]:
    """Read a dataset written by :func:`write_dataset` (images are 8-bit quantised)."""
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise SceneError(f"{root}: no manifest.json") from None
    wanted = None if split in (None, "all") else set(manifest["split"][split])
    out = []
    for entry in manifest["samples"]:
        if wanted is not None and entry["id"] not in wanted:
            continue
        f = entry["files"]
        warp_path = root / f["warp"]
        out.append(
            LoadedSample(
                entry["id"],
                read_pnm(root / f["t1"]),
                read_pnm(root / f["t2"]),
                read_mask(root / f["mask"]),
                read_tnsr(warp_path) if warp_path.exists() else None,
            )
        )
    return out

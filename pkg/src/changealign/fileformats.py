"""On-disk formats: TNSR tensors, parameter directories, and PGM/PPM images.

TNSR v1 layout::

    b"TNSR0001"
    uint32 little-endian header length
    UTF-8 JSON header {"shape": [...], "dtype": "f32", "order": "row-major"}
    little-endian float32 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TNSR0001"
MANIFEST = "manifest.json"


class FormatError(ValueError):
    pass


def write_tnsr(path, array) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")
    header = json.dumps({"shape": list(arr.shape), "dtype": "f32", "order": "row-major"}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def read_tnsr(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    if header.get("dtype") != "f32" or header.get("order", "row-major") != "row-major":
        raise FormatError(f"{path}: unsupported dtype/order {header}")
    shape = tuple(int(n) for n in header["shape"])
    payload = raw[12 + hlen :]
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != 4 * count:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor_dir(directory, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write each tensor to ``<name>.tnsr`` plus a JSON manifest naming them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        fname = f"{name}.tnsr"
        write_tnsr(directory / fname, arr)
        entries[name] = fname
    manifest = {"format": "TNSR v1", "tensors": entries}
    if meta:
        manifest["meta"] = meta
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_tensor_dir(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{directory}: no {MANIFEST}") from None
    tensors = {name: read_tnsr(directory / fname) for name, fname in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {})


# ---------------------------------------------------------------- PGM / PPM


def write_pnm(path, image) -> None:
    """Write an 8-bit binary PGM (H×W or 1×H×W) or PPM (3×H×W) from values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        magic, body = b"P5", img
    elif img.ndim == 3 and img.shape[0] == 3:
        magic, body = b"P6", img.transpose(1, 2, 0)
    else:
        raise FormatError(f"cannot write image of shape {img.shape} as PGM/PPM")
    h, w = img.shape[-2:]
    px = np.clip(np.rint(body * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(px.tobytes())


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError("truncated PNM header")
        tokens.append(raw[start:i])
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM as float32 in [0, 1], shape ``C×H×W``."""
    raw = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), offset = _tokens(raw, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError, FormatError) as exc:
        raise FormatError(f"{path}: bad PNM header ({exc})") from None
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise FormatError(f"{path}: unsupported PNM type {magic!r}")
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * channels
    if len(raw) - offset < n * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset)
    img = data.reshape(h, w, channels).transpose(2, 0, 1)
    return (img.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def write_mask(path, mask) -> None:
    write_pnm(path, np.asarray(mask, dtype=bool).astype(np.float64))


def read_mask(path) -> np.ndarray:
    img = read_pnm(path)
    return img[0] > 0.5

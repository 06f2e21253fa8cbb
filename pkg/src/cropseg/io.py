"""File formats: PNG images and masks, channel dumps, dataset directories."""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .nn.weights import atomic_write_bytes
from .synth import Sample

CHANNEL_MAGIC = b"CSCH"
# soil black, weed red, crop green
PALETTE = [(0, 0, 0), (255, 0, 0), (0, 255, 0)]
DEFAULT_SPLIT = (0.70, 0.15, 0.15)


class DataError(ValueError):
    """Unreadable or inconsistent input data."""


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_rgb(path) -> np.ndarray:
    """8-bit RGB or RGBA PNG as float64 in [0, 1]; alpha is dropped."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA"):
                raise DataError(f"{path}: expected an 8-bit RGB/RGBA image, got mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def _png_bytes(im: Image.Image) -> bytes:
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def write_rgb(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr, mode="RGB")))


def write_gray(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, _png_bytes(Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L")))


def write_mask(path, labels: np.ndarray) -> None:
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    im.putpalette([c for rgb in PALETTE for c in rgb])
    atomic_write_bytes(path, _png_bytes(im))


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("P", "L"):
                raise DataError(f"{path}: label masks must be palette or gray PNGs, got {im.mode}")
            arr = np.array(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    if arr.size and arr.max() > 2:
        raise DataError(f"{path}: label values must lie in {{0, 1, 2}}")
    return arr


def overlay(img: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend crop pixels toward green and weed pixels toward red."""
    out = np.asarray(img, dtype=np.float64).copy()
    colors = np.asarray(PALETTE, dtype=np.float64) / 255.0
    for cls in (1, 2):
        sel = labels == cls
        out[sel] = (1 - alpha) * out[sel] + alpha * colors[cls]
    return out


# --------------------------------------------------------------------------
# channel dumps
# --------------------------------------------------------------------------

def encode_channel(data: np.ndarray, index: int) -> bytes:
    h, w = data.shape
    return CHANNEL_MAGIC + struct.pack("<III", w, h, index) + np.asarray(data, "<f4").tobytes()


def decode_channel(buf: bytes) -> tuple[int, np.ndarray]:
    if len(buf) < 16 or buf[:4] != CHANNEL_MAGIC:
        raise DataError("not a channel file (bad magic)")
    w, h, index = struct.unpack_from("<III", buf, 4)
    if len(buf) != 16 + 4 * w * h:
        raise DataError(f"channel file holds {len(buf) - 16} data bytes, expected {4 * w * h}")
    return index, np.frombuffer(buf, "<f4", offset=16).reshape(h, w).astype(np.float32)


def visualize_channel(data: np.ndarray) -> np.ndarray:
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return np.zeros(data.shape, np.uint8)
    return np.round((data - lo) / (hi - lo) * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------
# dataset directories
# --------------------------------------------------------------------------

def split_counts(n: int, fractions=DEFAULT_SPLIT) -> tuple[int, int, int]:
    """Train/val/test sizes; 200 -> (140, 30, 30)."""
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    return n - n_val - n_test, n_val, n_test


def assign_splits(stems, fractions=DEFAULT_SPLIT, seed: int | None = None) -> dict[str, str]:
    stems = list(stems)
    order = np.arange(len(stems)) if seed is None else np.random.default_rng(seed).permutation(len(stems))
    n_tr, n_va, _ = split_counts(len(stems), fractions)
    out = {}
    for rank, i in enumerate(order):
        out[stems[i]] = "train" if rank < n_tr else "val" if rank < n_tr + n_va else "test"
    return out


def write_dataset(root, samples, fractions=DEFAULT_SPLIT, extra: dict | None = None) -> dict:
    root = Path(root)
    stems = [s.source_id or f"img{i:05d}" for i, s in enumerate(samples)]
    if len(set(stems)) != len(stems):
        raise DataError("sample ids must be unique")
    for stem, s in zip(stems, samples):
        write_rgb(root / "images" / f"{stem}.png", s.image)
        write_mask(root / "labels" / f"{stem}.png", s.labels)
    manifest = {"stems": stems, "split": assign_splits(stems, fractions),
                "fractions": list(fractions)}
    if extra:
        manifest.update(extra)
    write_json(root / "manifest.json", manifest)
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{root} has no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if "stems" not in manifest or "split" not in manifest:
        raise DataError(f"{path}: manifest needs 'stems' and 'split'")
    return manifest


def load_dataset(root, split: str | None = None) -> list[Sample]:
    """Samples of one split (or all) in manifest order."""
    root = Path(root)
    manifest = read_manifest(root)
    out = []
    for stem in manifest["stems"]:
        if split is not None and manifest["split"].get(stem) != split:
            continue
        img = read_rgb(root / "images" / f"{stem}.png")
        lab = read_mask(root / "labels" / f"{stem}.png")
        if img.shape[:2] != lab.shape:
            raise DataError(f"{stem}: image {img.shape[:2]} and labels {lab.shape} differ")
        out.append(Sample(img, lab, stem))
    return out


def image_paths(target) -> list[Path]:
    """A single PNG, or every PNG in a directory (sorted)."""
    p = Path(target)
    if p.is_dir():
        paths = sorted(p.glob("*.png"))
        if not paths:
            raise DataError(f"no PNG files in {p}")
        return paths
    if not p.exists():
        raise DataError(f"{p} does not exist")
    return [p]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p

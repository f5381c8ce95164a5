"""Instance masks, their JSON/raster file formats, and the noise model.

Masks are per-view binary images tagged with a predicted category; within one
view they never overlap.  On disk a mask set is JSON with run-length-encoded
pixels, and per-view label images are raw little-endian uint16 rasters with a
(width u32, height u32) header, 0xFFFF marking background.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import BACKGROUND

_SENTINEL = 0xFFFF


@dataclass(frozen=True)
class InstanceMask:
    category: str
    pixels: np.ndarray  # bool, (height, width)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=bool)
        if px.ndim != 2:
            raise ValueError("mask pixels must be a 2-D array")
        object.__setattr__(self, "pixels", px)

    def area(self) -> int:
        return int(self.pixels.sum())


@dataclass(frozen=True)
class MaskSet:
    """Per-view sequences of disjoint instance masks."""

    views: tuple[tuple[InstanceMask, ...], ...]

    def __post_init__(self):
        views = tuple(tuple(view) for view in self.views)
        shape = None
        for k, view in enumerate(views):
            coverage = None
            for mask in view:
                if shape is None:
                    shape = mask.pixels.shape
                elif mask.pixels.shape != shape:
                    raise ValueError("all masks must share one image shape")
                if coverage is None:
                    coverage = mask.pixels.copy()
                elif (coverage & mask.pixels).any():
                    raise ValueError(f"view {k}: masks overlap")
                else:
                    coverage |= mask.pixels
        object.__setattr__(self, "views", views)

    def __len__(self) -> int:
        return len(self.views)

    def mask_count(self) -> int:
        return sum(len(v) for v in self.views)


@dataclass(frozen=True)
class NoiseConfig:
    """Knobs for degrading ground-truth masks into 'predicted' ones."""

    erode_px: int = 0
    flip_prob: float = 0.0
    drop_prob: float = 0.0

    def __post_init__(self):
        if self.erode_px < 0:
            raise ValueError("erosion radius must be non-negative")
        for name in ("flip_prob", "drop_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")

    def is_zero(self) -> bool:
        return self.erode_px == 0 and self.flip_prob == 0.0 and self.drop_prob == 0.0


def rle_encode(pixels: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating zero-run/one-run, zeros first."""
    flat = np.asarray(pixels, dtype=bool).ravel()
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    runs = list(runs)
    total = sum(runs)
    size = shape[0] * shape[1]
    if total != size:
        raise ValueError(f"run lengths sum to {total}, expected {size}")
    flat = np.zeros(size, dtype=bool)
    pos, value = 0, False
    for run in runs:
        if run < 0:
            raise ValueError("run lengths must be non-negative")
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape)


def save_masks(mask_set: MaskSet, path) -> None:
    shape = None
    for view in mask_set.views:
        for mask in view:
            shape = mask.pixels.shape
            break
        if shape:
            break
    payload = {
        "height": None if shape is None else shape[0],
        "width": None if shape is None else shape[1],
        "views": [
            [{"category": m.category, "rle": rle_encode(m.pixels)} for m in view]
            for view in mask_set.views
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_masks(path) -> MaskSet:
    payload = json.loads(Path(path).read_text())
    if payload.get("height") is None:
        return MaskSet(tuple(() for _ in payload["views"]))
    shape = (payload["height"], payload["width"])
    views = []
    for view in payload["views"]:
        views.append(
            tuple(InstanceMask(m["category"], rle_decode(m["rle"], shape)) for m in view)
        )
    return MaskSet(tuple(views))


def masks_from_labels(label_image: np.ndarray, categories: Sequence[str]) -> tuple[InstanceMask, ...]:
    """One mask per instance id present in a label image.

    ``categories[i]`` names instance i's category; background pixels carry
    BACKGROUND and produce no mask.
    """
    labels = np.asarray(label_image)
    out = []
    for instance in np.unique(labels):
        if instance == BACKGROUND:
            continue
        out.append(InstanceMask(categories[int(instance)], labels == instance))
    return tuple(out)


def corrupt_masks(truth: MaskSet, noise: NoiseConfig, seed: int) -> MaskSet:
    """Erode, category-flip, and drop masks, independently per mask.

    Each mask gets its own RNG derived from (seed, view, index), so results
    are order-independent and drop decisions nest as drop_prob grows.
    """
    categories = sorted({m.category for view in truth.views for m in view})
    views = []
    for k, view in enumerate(truth.views):
        kept = []
        for j, mask in enumerate(view):
            rng = np.random.default_rng(np.random.SeedSequence((int(seed), k, j)))
            u_flip = rng.random()
            u_drop = rng.random()
            if u_drop < noise.drop_prob:
                continue
            pixels = mask.pixels
            if noise.erode_px > 0:
                pixels = ndimage.binary_erosion(pixels, iterations=noise.erode_px)
                if not pixels.any():
                    continue
            category = mask.category
            if u_flip < noise.flip_prob:
                others = [c for c in categories if c != category]
                if others:
                    category = others[int(rng.integers(len(others)))]
            kept.append(InstanceMask(category, pixels))
        views.append(tuple(kept))
    return MaskSet(tuple(views))


def write_label_raster(path, labels: np.ndarray) -> None:
    """Raw uint16 row-major raster with a (width u32, height u32) header."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError("label image must be 2-D")
    height, width = arr.shape
    encoded = np.where(arr == BACKGROUND, _SENTINEL, arr).astype("<u2")
    if (arr != BACKGROUND).any() and int(arr.max()) >= _SENTINEL:
        raise ValueError("label id does not fit in 16 bits")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", width, height))
        fh.write(encoded.tobytes())


def read_label_raster(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated raster header")
    width, height = struct.unpack("<II", raw[:8])
    expected = 8 + 2 * width * height
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<u2", offset=8).reshape(height, width).astype(int)
    return np.where(data == _SENTINEL, BACKGROUND, data)

"""Procedural hole masks: free-form brush strokes and smooth object-like blobs.

Masks are ``(H, W)`` uint8 arrays, 1 = missing pixel.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

BUCKETS = {
    "10-20": (0.10, 0.20),
    "20-30": (0.20, 0.30),
    "30-40": (0.30, 0.40),
    "40-50": (0.40, 0.50),
}
REGION_RANGE = (0.10, 0.40)
MAX_ATTEMPTS = 100
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class MaskGenerationError(RuntimeError):
    pass


@dataclass
class MaskSpec:
    kind: str = "mixed"  # irregular | region | mixed
    bucket: str = "any"  # a key of BUCKETS, or "any"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("irregular", "region", "mixed"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.bucket != "any" and self.bucket not in BUCKETS:
            raise ValueError(f"unknown bucket {self.bucket!r}; choose from {sorted(BUCKETS)} or 'any'")


def in_bucket(fraction: float, bounds: tuple[float, float], closed_low: bool = False) -> bool:
    lo, hi = bounds
    return (lo <= fraction if closed_low else lo < fraction) and fraction <= hi


def mask_ratio(mask: np.ndarray) -> float:
    m = np.asarray(mask)
    return float(np.count_nonzero(m)) / m.size


def _resolve_bounds(spec: MaskSpec, rng: np.random.Generator, default=None):
    if spec.bucket != "any":
        return BUCKETS[spec.bucket], False
    if default is not None:
        return default, True
    # "any": draw one evaluation bucket at random
    return BUCKETS[list(BUCKETS)[rng.integers(len(BUCKETS))]], False


def _stroke(canvas, rng, h, w, scale):
    n = int(rng.integers(4, 13))
    width = max(1, int(round(rng.uniform(10, 40) * scale)))
    x, y = rng.uniform(0, w), rng.uniform(0, h)
    angle = rng.uniform(0, 2 * np.pi)
    for _ in range(n):
        angle += rng.uniform(-np.pi / 2, np.pi / 2)
        length = rng.uniform(h / 16, h / 4)
        nx = float(np.clip(x + length * np.cos(angle), 0, w - 1))
        ny = float(np.clip(y + length * np.sin(angle), 0, h - 1))
        cv2.line(canvas, (int(x), int(y)), (int(nx), int(ny)), 1, width)
        x, y = nx, ny


def _ellipse(canvas, rng, h, w):
    center = (int(rng.uniform(0, w)), int(rng.uniform(0, h)))
    axes = (int(rng.uniform(h / 32, h / 6)) + 1, int(rng.uniform(h / 32, h / 6)) + 1)
    cv2.ellipse(canvas, center, axes, float(rng.uniform(0, 180)), 0, 360, 1, -1)


def irregular_mask(h: int, w: int, spec: MaskSpec | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Union of 1-8 brush polylines and a few ellipses, grown shape by shape until the
    hole fraction enters the bucket; attempts that overshoot are redrawn."""
    spec = spec or MaskSpec("irregular")
    if min(h, w) < 32:
        raise ValueError(f"masks need h, w >= 32, got {h}x{w}")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    bounds, _ = _resolve_bounds(spec, rng)
    scale = min(h, w) / 256
    for _ in range(MAX_ATTEMPTS):
        canvas = np.zeros((h, w), np.uint8)
        shapes = ["stroke"] * int(rng.integers(1, 9)) + ["ellipse"] * int(rng.integers(0, 4))
        rng.shuffle(shapes)
        for shape in shapes:
            if shape == "stroke":
                _stroke(canvas, rng, h, w, scale)
            else:
                _ellipse(canvas, rng, h, w)
            frac = mask_ratio(canvas)
            if frac > bounds[1]:
                break
            if in_bucket(frac, bounds):
                return canvas
    raise MaskGenerationError(f"irregular mask bucket {bounds} unreachable in {MAX_ATTEMPTS} attempts")


def region_mask(h: int, w: int, spec: MaskSpec | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """One or two smooth blobs cut from thresholded low-frequency noise."""
    spec = spec or MaskSpec("region")
    if min(h, w) < 32:
        raise ValueError(f"masks need h, w >= 32, got {h}x{w}")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    bounds, closed = _resolve_bounds(spec, rng, default=REGION_RANGE)
    for _ in range(MAX_ATTEMPTS):
        blobs = int(rng.integers(1, 3))
        field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=min(h, w) / 10,
                                        mode="reflect")
        target = rng.uniform(*bounds)
        # lower the level until the kept blobs reach the target area
        for q in np.linspace(1 - target / 4, 1 - min(1.0, 2.5 * target), 24):
            labels, count = ndimage.label(field > np.quantile(field, q), FOUR_CONNECTED)
            if count == 0:
                continue
            sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, count + 1))
            keep = np.argsort(sizes)[::-1][:blobs] + 1
            canvas = np.isin(labels, keep)
            frac = mask_ratio(canvas)
            if frac > bounds[1]:
                break
            if in_bucket(frac, bounds, closed) and frac >= target * 0.8:
                return canvas.astype(np.uint8)
    raise MaskGenerationError(f"region mask bucket {bounds} unreachable in {MAX_ATTEMPTS} attempts")


def generate_mask(h: int, w: int, spec: MaskSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if kind == "mixed":
        kind = "irregular" if rng.random() < 0.5 else "region"
    fn = irregular_mask if kind == "irregular" else region_mask
    return fn(h, w, spec, rng)


def sample_training_mask(h: int, w: int, rng: np.random.Generator, return_kind: bool = False):
    """Fair coin between an irregular mask (random bucket) and a region mask."""
    kind = "irregular" if rng.random() < 0.5 else "region"
    seed = int(rng.integers(2 ** 63))
    fn = irregular_mask if kind == "irregular" else region_mask
    mask = fn(h, w, MaskSpec(kind, "any", seed))
    return (mask, kind) if return_kind else mask


def read_mask(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(Path(path))

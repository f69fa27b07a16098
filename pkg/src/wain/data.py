"""Image corpora: folders of PNG/JPEG files and the built-in ``synthetic:shapes`` set.

Images come out as float32 ``(H, W, 3)`` arrays in [0, 1].
"""
from __future__ import annotations

import hashlib
import logging
from collections.abc import Sequence
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SYNTHETIC_PREFIX = "synthetic:shapes"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def shapes_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random two-colour gradient with a few filled rectangles and ellipses."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = (1 - t)[..., None] * c0 + t[..., None] * c1
    img = np.ascontiguousarray(img, dtype=np.float32)
    for _ in range(int(rng.integers(1, 4))):
        x0, y0 = rng.integers(0, size, 2)
        x1, y1 = rng.integers(0, size, 2)
        cv2.rectangle(img, (int(x0), int(y0)), (int(x1), int(y1)), rng.uniform(0, 1, 3).tolist(), -1)
    for _ in range(int(rng.integers(1, 4))):
        center = tuple(int(v) for v in rng.integers(0, size, 2))
        axes = tuple(int(v) for v in rng.integers(size // 16 + 1, size // 3, 2))
        cv2.ellipse(img, center, axes, float(rng.uniform(0, 180)), 0, 360,
                    rng.uniform(0, 1, 3).tolist(), -1, cv2.LINE_AA)
    return np.clip(img, 0, 1)


def center_crop_resize(img: Image.Image, size: int) -> np.ndarray:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.convert("RGB").crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


class ShapesCorpus(Sequence):
    """``n`` synthetic images; image ``i`` depends only on ``(seed, i)``."""

    def __init__(self, n: int, size: int, seed: int = 0):
        self.n, self.size, self.seed = n, size, seed
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(self.n))]
        if not -self.n <= i < self.n:
            raise IndexError(i)
        i %= self.n
        if i not in self._cache:
            self._cache[i] = shapes_image(self.size, np.random.default_rng([self.seed, i]))
        return self._cache[i]


class FolderCorpus(Sequence):
    """Image files under ``root`` in a seed-shuffled order; undecodable files are skipped."""

    def __init__(self, root, size: int, seed: int = 0):
        root = Path(root)
        files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no PNG/JPEG images under {root}")
        good = []
        self.skipped = 0
        for p in files:
            try:
                with Image.open(p) as im:
                    im.verify()
                good.append(p)
            except Exception:
                self.skipped += 1
        if self.skipped:
            log.warning("skipped %d undecodable file(s) under %s", self.skipped, root)
        if not good:
            raise FileNotFoundError(f"no decodable images under {root}")
        order = np.random.default_rng(seed).permutation(len(good))
        self.files = [good[k] for k in order]
        self.size = size

    def __len__(self):
        return len(self.files)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        with Image.open(self.files[i]) as im:
            return center_crop_resize(im, self.size)


def load_dataset(path: str, image_size: int, seed: int = 0, n: int | None = None) -> Sequence:
    """``path`` is a directory or ``synthetic:shapes[:N]`` (N defaults to ``n`` or 1000)."""
    path = str(path)
    if path.startswith(SYNTHETIC_PREFIX):
        rest = path[len(SYNTHETIC_PREFIX):]
        count = int(rest[1:]) if rest.startswith(":") else (n or 1000)
        return ShapesCorpus(count, image_size, seed)
    corpus = FolderCorpus(path, image_size, seed)
    return corpus


def corpus_digest(corpus: Sequence, limit: int | None = None) -> str:
    h = hashlib.sha256()
    for i in range(len(corpus) if limit is None else min(limit, len(corpus))):
        h.update(np.ascontiguousarray(corpus[i], dtype=np.float32).tobytes())
    return h.hexdigest()[:16]


def read_image(path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if size is None:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return center_crop_resize(im, size)


def write_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(Path(path))

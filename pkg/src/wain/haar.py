"""Average-normalized 2D Haar analysis/synthesis and the masked-input pyramid.

Tensors are laid out ``(B, C, H, W)``.  High bands are stored as ``(B, 3C, H/2, W/2)``
with the three directions interleaved per source channel: channel ``3c + k`` holds
direction ``k`` (0 horizontal, 1 vertical, 2 diagonal) of source channel ``c``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

BAND_NAMES = ("h", "v", "d")


def _check_even(x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2:
        raise ValueError(f"haar_forward needs an even height, got H={h}")
    if w % 2:
        raise ValueError(f"haar_forward needs an even width, got W={w}")


def haar_forward(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """One analysis step. Returns ``(low, high)`` at half resolution.

    For each 2x2 block ``[[p, q], [r, s]]``::

        low = (p + q + r + s) / 4
        h   = (p + q - r - s) / 4
        v   = (p - q + r - s) / 4
        d   = (p - q - r + s) / 4
    """
    _check_even(x)
    p = x[..., 0::2, 0::2]
    q = x[..., 0::2, 1::2]
    r = x[..., 1::2, 0::2]
    s = x[..., 1::2, 1::2]
    low = (p + q + r + s) / 4
    hor = (p + q - r - s) / 4
    ver = (p - q + r - s) / 4
    diag = (p - q - r + s) / 4
    b, c, h, w = low.shape
    high = torch.stack((hor, ver, diag), dim=2).reshape(b, 3 * c, h, w)
    return low, high


def split_bands(high: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    b, c3, h, w = high.shape
    if c3 % 3:
        raise ValueError(f"high band channel count {c3} is not a multiple of 3")
    bands = high.reshape(b, c3 // 3, 3, h, w)
    return bands[:, :, 0], bands[:, :, 1], bands[:, :, 2]


def haar_inverse(low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`haar_forward`; output is twice the input size."""
    if low.dim() != 4 or high.dim() != 4:
        raise ValueError("haar_inverse expects (B, C, H, W) tensors")
    if low.shape[0] != high.shape[0] or low.shape[-2:] != high.shape[-2:]:
        raise ValueError(
            f"low {tuple(low.shape)} and high {tuple(high.shape)} are not spatially congruent"
        )
    if high.shape[1] != 3 * low.shape[1]:
        raise ValueError(
            f"high has {high.shape[1]} channels, expected 3 x {low.shape[1]}"
        )
    hor, ver, diag = split_bands(high)
    p = low + hor + ver + diag
    q = low + hor - ver - diag
    r = low - hor + ver - diag
    s = low - hor - ver + diag
    b, c, h, w = low.shape
    top = torch.stack((p, q), dim=-1).reshape(b, c, h, 2 * w)
    bottom = torch.stack((r, s), dim=-1).reshape(b, c, h, 2 * w)
    return torch.stack((top, bottom), dim=-2).reshape(b, c, 2 * h, 2 * w)


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    # half-pixel centers; this is the reference convention for golden values
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def resize_nearest(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="nearest")


@dataclass
class WaveletPyramid:
    """Per-level ``(low, high)`` pairs, level 1 first.

    ``lows[l-1]`` and ``highs[l-1]`` have spatial size ``h / 2**(l-1)`` where ``h``
    is the model resolution.
    """

    lows: list[torch.Tensor]
    highs: list[torch.Tensor]
    source: torch.Tensor  # the 2h x 2w bilinear upsample fed to level 1

    @property
    def levels(self) -> int:
        return len(self.highs)

    def __iter__(self):
        return iter(zip(self.lows, self.highs))


def build_pyramid(
    image: torch.Tensor,
    mask: torch.Tensor | None = None,
    levels: int = 4,
    filter_finest: bool = False,
) -> WaveletPyramid:
    """Upsample ``image`` to twice its size and apply ``levels`` Haar steps.

    If ``mask`` (1 = missing) is given the masked pixels are zeroed first; callers
    that already zeroed them lose nothing.  With ``filter_finest`` the level-1 high
    bands come from a down-then-up resized copy of the upsampled input, which drops
    detail the model-resolution ground truth cannot hold.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    h, w = image.shape[-2:]
    if h < 2 ** levels or w < 2 ** levels:
        raise ValueError(f"image {h}x{w} is too small for {levels} Haar levels")
    if h % 2 ** (levels - 1) or w % 2 ** (levels - 1):
        raise ValueError(f"image {h}x{w} is not divisible by 2**{levels - 1}")
    if mask is not None:
        image = image * (1 - mask)
    src = resize_bilinear(image, (2 * h, 2 * w))
    lows, highs = [], []
    cur = src
    for level in range(levels):
        low, high = haar_forward(cur)
        if level == 0 and filter_finest:
            filtered = resize_bilinear(resize_bilinear(cur, (h, w)), (2 * h, 2 * w))
            _, high = haar_forward(filtered)
        lows.append(low)
        highs.append(high)
        cur = low
    return WaveletPyramid(lows, highs, src)


def dump_pyramid(pyr: WaveletPyramid, out_dir: str | Path, index: int = 0) -> list[Path]:
    """Write one PNG per band as ``L{level}_{low|h|v|d}.png`` (affinely mapped to 0..255)."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def save(arr: torch.Tensor, name: str) -> None:
        a = arr[index].detach().cpu().double().numpy().transpose(1, 2, 0)
        lo, hi = float(a.min()), float(a.max())
        scaled = np.zeros_like(a) if hi - lo < 1e-12 else (a - lo) / (hi - lo)
        u8 = np.round(scaled * 255).astype(np.uint8)
        if u8.shape[-1] == 1:
            u8 = u8[..., 0]
        path = out / name
        Image.fromarray(u8).save(path)
        written.append(path)

    for level, (low, high) in enumerate(pyr, start=1):
        save(low, f"L{level}_low.png")
        for band_name, band in zip(BAND_NAMES, split_bands(high)):
            save(band, f"L{level}_{band_name}.png")
    return written

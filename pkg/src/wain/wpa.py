"""Wavelet prior attention: reuse one relation matrix on every pyramid level and
supervise the aggregated bands (and their inverse-Haar reconstructions)."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .attention import AttentionRelation, PatchGrid, aggregate, fold_patches, unfold_patches
from .haar import WaveletPyramid, haar_inverse, resize_bilinear, resize_nearest
from .losses import balanced_l1


@dataclass
class AggregatedPyramid:
    """Aggregated high bands keyed by level (1-based). Levels outside the active
    scale set are absent."""

    highs: dict[int, torch.Tensor]
    relation: AttentionRelation | None = field(default=None, repr=False)

    @property
    def levels(self) -> list[int]:
        return sorted(self.highs)


def check_divisible(size: int, levels: int, grid: int) -> None:
    for level in range(1, levels + 1):
        side = size // 2 ** (level - 1)
        if size % 2 ** (level - 1) or side % grid:
            raise ValueError(
                f"pyramid level {level} ({side}px) is not divisible into a {grid}-patch grid"
            )


def wpa_aggregate(
    relation: AttentionRelation,
    masked_pyramid: WaveletPyramid,
    scales: tuple[int, ...] | None = None,
) -> AggregatedPyramid:
    """Aggregate the high bands of every selected level with the same relation.

    Every position is aggregated (not only hole patches), so the unmasked term of the
    wavelet loss sees the relation too.  Has no trainable state.
    """
    scales = tuple(range(1, masked_pyramid.levels + 1)) if scales is None else tuple(scales)
    rows, cols = relation.grid_rows, relation.grid_cols
    for level in scales:
        if not 1 <= level <= masked_pyramid.levels:
            raise ValueError(f"scale {level} outside pyramid levels 1..{masked_pyramid.levels}")
        h, w = masked_pyramid.highs[level - 1].shape[-2:]
        if h % rows or w % cols:
            raise ValueError(
                f"level {level} bands {h}x{w} are not divisible into the {rows}x{cols} grid"
            )
    out = {}
    for level in scales:
        grid: PatchGrid = unfold_patches(masked_pyramid.highs[level - 1], rows, cols)
        out[level] = fold_patches(aggregate(relation, grid))
    return AggregatedPyramid(out, relation)


def level_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Nearest-resize a binary mask to ``like``'s resolution (stays binary)."""
    return resize_nearest(mask.to(like.dtype), tuple(like.shape[-2:]))


def wavelet_loss(
    agg: AggregatedPyramid, gt_pyramid: WaveletPyramid, mask: torch.Tensor
) -> torch.Tensor:
    """Sum over active levels of the balanced l1 between ground-truth and aggregated bands."""
    if not agg.highs:
        raise ValueError("aggregated pyramid has no levels")
    total = 0.0
    for level, band in agg.highs.items():
        target = gt_pyramid.highs[level - 1]
        if band.shape != target.shape:
            raise ValueError(
                f"level {level}: aggregated {tuple(band.shape)} vs ground truth {tuple(target.shape)}"
            )
        total = total + balanced_l1(band, target, level_mask(mask, band))
    return total


@dataclass
class IhtChain:
    images: dict[int, torch.Tensor]  # level -> reconstruction; level 0 is 2h x 2w


def iht_chain(
    agg: AggregatedPyramid, gt_lows: list[torch.Tensor], output_image: torch.Tensor
) -> IhtChain:
    """Inverse-Haar reconstructions; level 0 uses the model output as its low band,
    deeper levels are teacher-forced with the ground-truth low band one level down."""
    if output_image is None:
        raise ValueError("iht_chain needs the model output image")
    levels = len(gt_lows)
    images = {}
    for level in range(levels):
        source = level + 1
        if source not in agg.highs:
            continue
        low = output_image if level == 0 else gt_lows[source - 1]
        images[level] = haar_inverse(low, agg.highs[source])
    return IhtChain(images)


def iht_targets(clean: torch.Tensor, gt_lows: list[torch.Tensor]) -> list[torch.Tensor]:
    """Ground-truth images per level: level 0 is the clean image upsampled to 2h x 2w."""
    h, w = clean.shape[-2:]
    return [resize_bilinear(clean, (2 * h, 2 * w))] + list(gt_lows[:-1])


def iht_chain_loss(
    agg: AggregatedPyramid,
    gt_lows: list[torch.Tensor],
    gt_images: list[torch.Tensor],
    output_image: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    if output_image is None:
        raise ValueError("iht_chain_loss needs the model output image")
    if len(gt_images) != len(gt_lows):
        raise ValueError(
            f"{len(gt_images)} ground-truth images for {len(gt_lows)} pyramid levels"
        )
    chain = iht_chain(agg, gt_lows, output_image)
    if not chain.images:
        raise ValueError("no active levels for the inverse-Haar loss")
    total = 0.0
    for level, recon in chain.images.items():
        target = gt_images[level]
        if recon.shape != target.shape:
            raise ValueError(
                f"level {level}: reconstruction {tuple(recon.shape)} vs target {tuple(target.shape)}"
            )
        total = total + balanced_l1(recon, target, level_mask(mask, recon))
    return total

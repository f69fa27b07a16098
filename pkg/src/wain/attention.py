"""Patch unfolding and the parameter-free cosine (contextual) attention.

Patches are non-overlapping tiles indexed row-major, ``i = row * grid_cols + col``.
Unfolded patch matrices are ``(B, N, P)`` with ``N = grid_rows * grid_cols`` and
``P = C * patch_h * patch_w``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

NORM_EPS = 1e-8


@dataclass
class PatchGrid:
    patches: torch.Tensor  # (B, N, C * ph * pw)
    grid_rows: int
    grid_cols: int
    channels: int
    patch_h: int
    patch_w: int


def unfold_patches(field: torch.Tensor, grid_rows: int, grid_cols: int) -> PatchGrid:
    b, c, h, w = field.shape
    if h % grid_rows or w % grid_cols:
        raise ValueError(
            f"field {h}x{w} cannot be tiled by a {grid_rows}x{grid_cols} grid"
        )
    ph, pw = h // grid_rows, w // grid_cols
    x = field.reshape(b, c, grid_rows, ph, grid_cols, pw)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, grid_rows * grid_cols, c * ph * pw)
    return PatchGrid(x, grid_rows, grid_cols, c, ph, pw)


def fold_patches(grid: PatchGrid) -> torch.Tensor:
    b, n, p = grid.patches.shape
    if n != grid.grid_rows * grid.grid_cols or p != grid.channels * grid.patch_h * grid.patch_w:
        raise ValueError(
            f"patch matrix {tuple(grid.patches.shape)} inconsistent with a "
            f"{grid.grid_rows}x{grid.grid_cols} grid of {grid.channels}x"
            f"{grid.patch_h}x{grid.patch_w} patches"
        )
    x = grid.patches.reshape(
        b, grid.grid_rows, grid.grid_cols, grid.channels, grid.patch_h, grid.patch_w
    )
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(
        b, grid.channels, grid.grid_rows * grid.patch_h, grid.grid_cols * grid.patch_w
    )


def _tile_max(mask: torch.Tensor, grid_rows: int, grid_cols: int) -> torch.Tensor:
    h, w = mask.shape[-2:]
    if h % grid_rows or w % grid_cols:
        raise ValueError(f"mask {h}x{w} cannot be tiled by a {grid_rows}x{grid_cols} grid")
    m = mask.reshape(-1, 1, h, w).to(torch.float64)
    return F.max_pool2d(m, (h // grid_rows, w // grid_cols)).flatten(1)


def patch_validity(mask: torch.Tensor, grid_rows: int, grid_cols: int) -> torch.Tensor:
    """Key eligibility per tile: ``True`` iff no pixel in the tile is masked.

    ``mask`` is ``(H, W)`` or ``(B, 1, H, W)`` with 1 = missing.  Returns ``(B, N)``
    booleans.  Raises if any sample has no eligible key.
    """
    valid = _tile_max(mask, grid_rows, grid_cols) == 0
    empty = ~valid.any(dim=1)
    if empty.any():
        idx = torch.nonzero(empty).flatten().tolist()
        raise ValueError(f"no unmasked keys: every patch is masked in sample(s) {idx}")
    return valid


def query_targets(mask: torch.Tensor, grid_rows: int, grid_cols: int) -> torch.Tensor:
    """Tiles holding at least one masked pixel, ``(B, N)`` booleans."""
    return _tile_max(mask, grid_rows, grid_cols) > 0


@dataclass
class AttentionRelation:
    R: torch.Tensor  # (B, N, N), R[b, query, key]
    valid_keys: torch.Tensor  # (B, N) bool
    grid_rows: int
    grid_cols: int


def masked_softmax(logits: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``valid`` keys; invalid keys get exactly 0."""
    keep = valid.unsqueeze(1).expand_as(logits)
    fill = torch.finfo(logits.dtype).min
    shift = logits.masked_fill(~keep, fill).amax(dim=-1, keepdim=True).detach()
    expo = torch.exp((logits - shift).masked_fill(~keep, 0.0)) * keep
    return expo / expo.sum(dim=-1, keepdim=True)


def cosine_relation(
    features: torch.Tensor,
    valid: torch.Tensor,
    temperature: float = 10.0,
    grid: tuple[int, int] | None = None,
    kind: str = "cosine",
) -> AttentionRelation:
    """Relation between every pair of feature patches.

    ``features`` is ``(B, C, H, W)`` and is unfolded on ``grid`` (default: the grid
    implied by ``valid`` being square).  ``kind="standard"`` swaps cosine similarity
    for the raw scaled dot product, which the attention ablation compares against.
    """
    if not torch.isfinite(features).all():
        raise ValueError("cosine_relation received non-finite features")
    b, n = valid.shape
    if grid is None:
        side = int(round(n ** 0.5))
        if side * side != n:
            raise ValueError(f"cannot infer a square grid from {n} patches; pass grid=")
        grid = (side, side)
    if not valid.any(dim=1).all():
        raise ValueError("no unmasked keys: attention is undefined")
    patches = unfold_patches(features, *grid).patches
    if kind == "cosine":
        norm = patches.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
        unit = patches / norm
        logits = temperature * unit @ unit.transpose(1, 2)
    elif kind == "standard":
        logits = patches @ patches.transpose(1, 2) / patches.shape[-1] ** 0.5
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    return AttentionRelation(masked_softmax(logits, valid), valid, *grid)


def aggregate(
    R: torch.Tensor | AttentionRelation,
    values: PatchGrid,
    replace_only_masked: bool = False,
    query_mask: torch.Tensor | None = None,
) -> PatchGrid:
    """``out[j] = sum_i R[j, i] * values[i]``.

    With ``replace_only_masked`` only rows where ``query_mask`` is set are
    replaced; the others keep their original patch.
    """
    rel = R.R if isinstance(R, AttentionRelation) else R
    v = values.patches
    if rel.shape[-1] != v.shape[1] or rel.shape[-2] != v.shape[1]:
        raise ValueError(f"relation {tuple(rel.shape)} does not match {v.shape[1]} patches")
    out = rel @ v
    if replace_only_masked:
        if query_mask is None:
            raise ValueError("replace_only_masked needs a query_mask")
        if query_mask.shape != v.shape[:2]:
            raise ValueError(f"query_mask {tuple(query_mask.shape)} vs patches {tuple(v.shape[:2])}")
        out = torch.where(query_mask.unsqueeze(-1), out, v)
    return PatchGrid(out, values.grid_rows, values.grid_cols, values.channels,
                     values.patch_h, values.patch_w)


def export_relation(rel: AttentionRelation | torch.Tensor, path: str | Path, index: int = 0) -> None:
    """Row-major float32 matrix preceded by its two dimensions as little-endian int32."""
    mat = rel.R if isinstance(rel, AttentionRelation) else rel
    if mat.dim() == 3:
        mat = mat[index]
    arr = np.ascontiguousarray(mat.detach().cpu().numpy(), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", *arr.shape))
        fh.write(arr.tobytes())


def import_relation(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    rows, cols = struct.unpack("<ii", raw[:8])
    return np.frombuffer(raw[8:], dtype="<f4").reshape(rows, cols)

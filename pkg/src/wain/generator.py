"""The inpainting generator: gated-conv encoder with wavelet skips, a dilated /
axial middle stack, contextual feature aggregation and a gated-conv decoder."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .attention import (AttentionRelation, aggregate, cosine_relation, fold_patches,
                        patch_validity, query_targets, unfold_patches)
from .axial import AxialStack
from .haar import WaveletPyramid, build_pyramid, resize_nearest
from .wpa import AggregatedPyramid, wpa_aggregate

CHECKPOINT_VERSION = "wain-ckpt-1"


@dataclass
class GeneratorConfig:
    image_size: int = 64
    base_channels: int = 32
    dc_count: int = 4
    at_count: int = 4
    at_heads: int = 4
    ff_expansion: int = 4
    levels: int = 4
    wpa_scales: tuple[int, ...] = (1, 2, 3, 4)
    filter_finest: bool = False
    use_wpa: bool = True
    use_at: bool = True
    temperature: float = 10.0
    attention_kind: str = "cosine"

    def __post_init__(self):
        self.wpa_scales = tuple(int(s) for s in self.wpa_scales)
        if self.dc_count + self.at_count < 1:
            raise ValueError("need at least one middle block")
        unit = 8 * 2 ** (self.levels - 1)
        if self.image_size % unit:
            raise ValueError(f"image_size {self.image_size} must be divisible by {unit}")
        if not set(self.wpa_scales) <= set(range(1, self.levels + 1)) or not self.wpa_scales:
            raise ValueError(f"wpa_scales {self.wpa_scales} must be a non-empty subset of 1..{self.levels}")
        if (4 * self.base_channels) % self.at_heads:
            raise ValueError("middle channels must be divisible by at_heads")

    @property
    def grid(self) -> int:
        return self.image_size // 8

    @property
    def middle_size(self) -> int:
        return self.image_size // 4

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GeneratorConfig":
        return cls(**json.loads(text))


class GatedConv(nn.Module):
    """Gated conv (value * sigmoid(gate)) -> instance norm -> ReLU, spectrally normalized."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, dilation=1, activation=True):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.conv = spectral_norm(nn.Conv2d(in_ch, 2 * out_ch, kernel, stride, pad, dilation))
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)
        self.activation = activation

    def gated(self, x):
        value, gate = self.conv(x).chunk(2, dim=1)
        return value * torch.sigmoid(gate)

    def forward(self, x):
        x = self.norm(self.gated(x))
        return F.relu(x) if self.activation else x


class DilatedBlock(nn.Module):
    """Residual conv(d=2) -> IN -> ReLU -> conv(d=1) -> IN."""

    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=2, dilation=2)
        self.norm1 = nn.InstanceNorm2d(ch, affine=True)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(y))


def key_validity(mask: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    """Strict key rule per sample; samples whose every tile touches the hole fall
    back to tiles holding at least one known pixel."""
    strict = query_targets(mask, rows, cols).logical_not()
    if strict.any(dim=1).all():
        return strict
    h, w = mask.shape[-2:]
    known_somewhere = F.max_pool2d(1 - mask.to(torch.float64), (h // rows, w // cols)).flatten(1) > 0
    if not known_somewhere.any(dim=1).all():
        try:
            patch_validity(mask, rows, cols)
        except ValueError as exc:
            raise ValueError(f"generator input is fully masked: {exc}") from exc
    return torch.where(strict.any(dim=1, keepdim=True), strict, known_somewhere)


@dataclass
class GeneratorOutput:
    raw: torch.Tensor
    composited: torch.Tensor
    relation: AttentionRelation
    agg_pyramid: AggregatedPyramid | None
    masked_pyramid: WaveletPyramid | None = field(default=None, repr=False)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        band_ch = 9 if cfg.use_wpa else 0
        self.stem = GatedConv(3 + 1 + band_ch, c)
        self.down1 = GatedConv(c, 2 * c, stride=2)
        self.down2 = GatedConv(2 * c + band_ch, 4 * c, stride=2)
        dim = 4 * c
        at = cfg.at_count if cfg.use_at else 0
        dcs = cfg.dc_count + (cfg.at_count - at)
        self.middle_pre = nn.Sequential(*(DilatedBlock(dim) for _ in range(dcs // 2)))
        side = cfg.middle_size
        self.axial = (AxialStack(side, side, dim, at, cfg.at_heads, cfg.ff_expansion)
                      if at > 0 else None)
        self.middle_post = nn.Sequential(*(DilatedBlock(dim) for _ in range(dcs - dcs // 2)))
        self.up1 = GatedConv(dim, 2 * c)
        self.up2 = GatedConv(2 * c, c)
        self.to_rgb = nn.Conv2d(c, 3, 3, padding=1)

    def encode(self, image, mask, pyr):
        inputs = [image, mask]
        if pyr is not None:
            inputs.append(pyr.highs[0])
        x = self.stem(torch.cat(inputs, dim=1))
        x = self.down1(x)
        if pyr is not None:
            x = torch.cat([x, resize_nearest(pyr.highs[1], tuple(x.shape[-2:]))], dim=1)
        return self.down2(x)

    def middle(self, x):
        x = self.middle_pre(x)
        if self.axial is not None:
            x = self.axial(x)
        return self.middle_post(x)

    def decode(self, x):
        x = self.up1(F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.up2(F.interpolate(x, scale_factor=2, mode="nearest"))
        return torch.sigmoid(self.to_rgb(x))

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> GeneratorOutput:
        cfg = self.cfg
        if image.shape[-2:] != mask.shape[-2:] or image.shape[0] != mask.shape[0]:
            raise ValueError(f"image {tuple(image.shape)} and mask {tuple(mask.shape)} disagree")
        mask = mask.to(image.dtype)
        image = image * (1 - mask)
        grid = cfg.grid
        valid = key_validity(mask, grid, grid)
        pyr = build_pyramid(image, None, cfg.levels, cfg.filter_finest) if cfg.use_wpa else None

        feats = self.middle(self.encode(image, mask, pyr))
        relation = cosine_relation(feats, valid, cfg.temperature, (grid, grid), cfg.attention_kind)
        queries = query_targets(mask, grid, grid)
        feats = fold_patches(aggregate(relation, unfold_patches(feats, grid, grid),
                                       replace_only_masked=True, query_mask=queries))
        agg = wpa_aggregate(relation, pyr, cfg.wpa_scales) if cfg.use_wpa else None

        raw = self.decode(feats)
        composited = raw * mask + image * (1 - mask)
        return GeneratorOutput(raw, composited, relation, agg, pyr)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def heatmap_grid(relation: AttentionRelation | torch.Tensor, query: tuple[int, int],
                 grid: tuple[int, int] | None = None, index: int = 0) -> torch.Tensor:
    """The relation row of ``query`` as a ``(rows, cols)`` grid (sums to 1)."""
    if isinstance(relation, AttentionRelation):
        mat, grid = relation.R, (relation.grid_rows, relation.grid_cols)
    else:
        mat = relation
    if mat.dim() == 3:
        mat = mat[index]
    rows, cols = grid
    r, c = query
    if not (0 <= r < rows and 0 <= c < cols):
        raise IndexError(f"query {query} outside the {rows}x{cols} patch grid")
    return mat[r * cols + c].reshape(rows, cols)


def extract_attention_heatmap(relation, query: tuple[int, int], size: tuple[int, int],
                              grid: tuple[int, int] | None = None, index: int = 0) -> torch.Tensor:
    """Relation row for ``query`` upsampled (nearest) to ``size`` and scaled so its max is 1."""
    g = heatmap_grid(relation, query, grid, index).detach()
    up = F.interpolate(g[None, None], size=size, mode="nearest")[0, 0]
    peak = up.max()
    return up / peak if peak > 0 else up


def save_checkpoint(path, generator: Generator, extra: dict[str, np.ndarray] | None = None) -> None:
    """Single ``.npz``: ``generator/<param>`` float32 arrays, the JSON config and a version tag."""
    arrays = {f"generator/{k}": v.detach().cpu().numpy().astype(np.float32)
              for k, v in generator.state_dict().items()}
    arrays["config"] = np.array(generator.cfg.to_json())
    arrays["version"] = np.array(CHECKPOINT_VERSION)
    if extra:
        arrays.update(extra)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Generator, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    version = str(arrays.get("version"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    cfg = GeneratorConfig.from_json(str(arrays["config"]))
    gen = Generator(cfg)
    state = {k[len("generator/"):]: torch.from_numpy(v) for k, v in arrays.items()
             if k.startswith("generator/")}
    gen.load_state_dict(state)
    return gen, arrays

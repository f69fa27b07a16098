"""Discriminator and the generator loss suite (adversarial, balanced l1,
perceptual, style) plus the weighted total."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

PROB_EPS = 1e-7


def balanced_l1(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the masked region plus the same over the known region.

    Region sizes count mask entries broadcast over channels, so a constant error
    ``e`` gives ``e + e``.  An empty region contributes 0.  Averaged over the batch.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if mask.dim() == 2:
        mask = mask[None, None]
    mask = mask.to(pred.dtype).expand_as(pred)
    diff = (pred - gt).abs()
    dims = tuple(range(1, pred.dim()))
    total = 0.0
    for region in (mask, 1 - mask):
        count = region.sum(dim=dims)
        err = (diff * region).sum(dim=dims)
        total = total + torch.where(count > 0, err / count.clamp_min(1), torch.zeros_like(err))
    return total.mean()


class FeatureExtractor(nn.Module):
    """Ordered, frozen feature stages used by the perceptual and style losses."""

    def __init__(self, stages: list[nn.Module], provenance: str, preprocess=None):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.provenance = provenance
        self.preprocess = preprocess
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if self.preprocess is not None:
            x = self.preprocess(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def train(self, mode: bool = True):
        # frozen: never switches to training behaviour
        return super().train(False)


def random_extractor(
    seed: int = 0,
    channels: tuple[int, ...] = (16, 32, 64, 64, 64),
    in_channels: int = 3,
    dtype: torch.dtype = torch.float32,
) -> FeatureExtractor:
    """Fixed-seed random conv pyramid; each stage halves the resolution."""
    gen = torch.Generator().manual_seed(seed)
    stages = []
    prev = in_channels
    for ch in channels:
        conv = nn.Conv2d(prev, ch, 3, stride=2, padding=1)
        with torch.no_grad():
            std = (2.0 / (prev * 9)) ** 0.5
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
            conv.bias.zero_()
        stages.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
        prev = ch
    return FeatureExtractor(stages, "fixed-random").to(dtype)


def vgg19_extractor(weights: str | None = "IMAGENET1K_V1") -> FeatureExtractor:
    """Pretrained VGG-19 stages ending at relu1_1 .. relu5_1.  Needs torchvision and
    (for ``weights``) a cached or downloadable checkpoint."""
    from torchvision.models import vgg19

    body = vgg19(weights=weights).features
    cuts = [2, 7, 12, 21, 30]
    stages, start = [], 0
    for end in cuts:
        stages.append(nn.Sequential(*body[start:end]))
        start = end
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def normalize(x):
        return (x - mean.to(x)) / std.to(x)

    return FeatureExtractor(stages, "pretrained" if weights else "fixed-random", normalize)


def perceptual_loss(pred, gt, mask, extractor: FeatureExtractor) -> torch.Tensor:
    total = 0.0
    for fp, fg in zip(extractor(pred), extractor(gt)):
        m = F.interpolate(mask.to(fp.dtype), size=fp.shape[-2:], mode="nearest")
        total = total + balanced_l1(fp, fg, m)
    return total


def gram(feat: torch.Tensor) -> torch.Tensor:
    b, c, h, w = feat.shape
    f = feat.reshape(b, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


def style_loss(pred, gt, extractor: FeatureExtractor) -> torch.Tensor:
    """Sum over stages of the mean absolute Gram-matrix difference."""
    total = 0.0
    for fp, fg in zip(extractor(pred), extractor(gt)):
        total = total + (gram(fp) - gram(fg)).abs().mean()
    return total


class Discriminator(nn.Module):
    """SN-PatchGAN: six stride-2 spectrally normalized 5x5 convs, the last one
    emitting a single-channel score grid (``size / 64`` per side, at least 1)."""

    def __init__(self, in_channels: int = 3, base_channels: int = 64):
        super().__init__()
        widths = [base_channels, 2 * base_channels, 4 * base_channels,
                  4 * base_channels, 4 * base_channels]
        layers = []
        prev = in_channels
        for ch in widths:
            layers += [spectral_norm(nn.Conv2d(prev, ch, 5, stride=2, padding=2)),
                       nn.LeakyReLU(0.2)]
            prev = ch
        layers.append(spectral_norm(nn.Conv2d(prev, 1, 5, stride=2, padding=2)))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def adversarial_pair(real_scores: torch.Tensor, fake_scores: torch.Tensor):
    """Vanilla GAN losses on raw scores: ``(d_loss, g_adv)``."""
    p_real = torch.sigmoid(real_scores).clamp(PROB_EPS, 1 - PROB_EPS)
    p_fake = torch.sigmoid(fake_scores).clamp(PROB_EPS, 1 - PROB_EPS)
    d_loss = -torch.log(p_real).mean() - torch.log(1 - p_fake).mean()
    g_adv = -torch.log(p_fake).mean()
    return d_loss, g_adv


@dataclass
class LossWeights:
    adv: float = 0.1
    per: float = 0.1
    sty: float = 250.0
    iht: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass
class LossReport:
    adv: object
    l1: object
    per: object
    sty: object
    wav: object
    iht: object
    total: object
    d_loss: object = 0.0

    KEYS = ("adv", "l1", "per", "sty", "wav", "iht", "total", "d_loss")

    def as_floats(self) -> dict[str, float]:
        return {k: _scalar(getattr(self, k)) for k in self.KEYS}

    def as_line(self) -> str:
        return " ".join(f"{k}={v:.9g}" for k, v in self.as_floats().items())


MANDATORY = ("adv", "l1", "per", "sty")


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_generator_loss(parts: dict, weights: LossWeights | None = None) -> LossReport:
    weights = weights or LossWeights()
    missing = [k for k in MANDATORY if parts.get(k) is None]
    if missing:
        raise ValueError(f"missing loss parts: {', '.join(missing)}")
    wav = parts.get("wav")
    iht = parts.get("iht")
    wav = 0.0 if wav is None else wav
    iht = 0.0 if iht is None else iht
    total = (weights.adv * parts["adv"] + parts["l1"] + weights.per * parts["per"]
             + weights.sty * parts["sty"] + wav + weights.iht * iht)
    return LossReport(parts["adv"], parts["l1"], parts["per"], parts["sty"],
                      wav, iht, total, parts.get("d_loss", 0.0))

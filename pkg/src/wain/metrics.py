"""Image quality metrics on ``(H, W, C)`` float arrays in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
EMD_BINS = 64
EMD_SIZES = (256, 128, 64, 32)


def _as_float(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _as_float(a), _as_float(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def masked_psnr(a, b, mask) -> float:
    """PSNR restricted to pixels where ``mask`` (H, W) is set."""
    a, b = _as_float(a), _as_float(b)
    sel = np.asarray(mask).astype(bool)
    if not sel.any():
        raise ValueError("empty mask")
    mse = np.mean((a[sel] - b[sel]) ** 2)
    return PSNR_CAP if mse == 0 else float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r:-r, r:-r]


def ssim(a, b) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only,
    averaged over channels."""
    a, b = _as_float(a), _as_float(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < 11:
        raise ValueError(f"SSIM needs images of at least 11x11, got {a.shape[:2]}")
    win = _gaussian_window()
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx ** 2 + my ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussian fits of two ``(n, d)`` feature sets.

    The trace of ``(S1 S2)^(1/2)`` is evaluated as the trace of the symmetric
    ``(S1^(1/2) S2 S1^(1/2))^(1/2)`` with negative eigenvalues clamped to zero.
    """
    a, b = _as_float(feats_a), _as_float(feats_b)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two vectors per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.atleast_2d(np.cov(a, rowvar=False))
    s2 = np.atleast_2d(np.cov(b, rowvar=False))
    try:
        root1 = _sym_sqrt(s1)
        cross = _sym_sqrt(root1 @ s2 @ root1)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"covariance square root failed (cond S1={np.linalg.cond(s1):.3g}, "
            f"cond S2={np.linalg.cond(s2):.3g})"
        ) from exc
    if not np.isfinite(cross).all():
        raise np.linalg.LinAlgError(
            f"non-finite covariance square root (cond S1={np.linalg.cond(s1):.3g}, "
            f"cond S2={np.linalg.cond(s2):.3g})"
        )
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(cross))


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    from skimage.color import rgb2hsv

    return rgb2hsv(np.clip(_as_float(img), 0, 1))


def _resize(img: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))
    t = t[None, None] if t.dim() == 2 else t.permute(2, 0, 1)[None]
    if nearest:
        out = F.interpolate(t, size=(size, size), mode="nearest")
    else:
        out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    out = out[0].permute(1, 2, 0).numpy()
    return out[..., 0] if np.ndim(img) == 2 else out


def histogram_emd(p: np.ndarray, q: np.ndarray) -> float:
    """1-D earth mover's distance between normalized histograms over [0, 1]:
    the sum of absolute CDF differences times the bin width."""
    p, q = _as_float(p), _as_float(q)
    return float(np.sum(np.abs(np.cumsum(p) - np.cumsum(q))) / len(p))


def _hist(values: np.ndarray, bins: int) -> np.ndarray:
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return counts / counts.sum()


def hsv_emd(pred, gt, mask, size: int, bins: int = EMD_BINS) -> float:
    """Mean over H, S and V of the EMD between masked-region histograms at ``size``."""
    pred_r = _resize(_as_float(pred), size, nearest=False)
    gt_r = _resize(_as_float(gt), size, nearest=False)
    m = _resize(np.asarray(mask, dtype=np.float64), size, nearest=True) > 0.5
    if not m.any():
        raise ValueError(f"masked region is empty after resizing to {size}")
    hp, hg = rgb_to_hsv(pred_r)[m], rgb_to_hsv(gt_r)[m]
    return float(np.mean([histogram_emd(_hist(hp[:, c], bins), _hist(hg[:, c], bins))
                          for c in range(3)]))

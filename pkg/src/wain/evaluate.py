"""Inference, bucketed evaluation and ablation sweeps."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import corpus_digest, load_dataset, read_image, write_image
from .generator import Generator, GeneratorConfig, extract_attention_heatmap, load_checkpoint
from .losses import FeatureExtractor, random_extractor
from .masks import BUCKETS, MaskSpec, generate_mask, read_mask
from .metrics import frechet_distance, hsv_emd, psnr, ssim

log = logging.getLogger(__name__)

Inpainter = Callable[[np.ndarray, np.ndarray], np.ndarray]


def emd_sizes(image_size: int) -> tuple[int, ...]:
    """The four EMD resolutions: the model size and three successive halvings."""
    return tuple(image_size // 2 ** k for k in range(4))


def generator_inpainter(gen: Generator) -> Inpainter:
    gen.eval()

    def run(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
        m = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
        with torch.no_grad():
            out = gen(x, m)
        return out.composited[0].permute(1, 2, 0).numpy()

    return run


def identity_inpainter(dataset) -> Inpainter:
    """Stub that answers with the ground truth.  :func:`evaluate` visits images in
    dataset order once per bucket, so cycling through ``dataset`` lines up."""
    n = len(dataset)
    calls = iter(range(10 ** 12))

    def run(image, mask):
        return np.asarray(dataset[next(calls) % n], dtype=np.float64)

    return run


def infer(checkpoint, image_path, mask_path, out_path, heatmap_query: tuple[int, int] | None = None):
    gen, _ = load_checkpoint(checkpoint)
    size = gen.cfg.image_size
    raw_img = read_image(image_path)
    raw_mask = read_mask(mask_path)
    if raw_img.shape[:2] != raw_mask.shape[:2]:
        raise ValueError(f"mask {raw_mask.shape[:2]} does not match image {raw_img.shape[:2]}")
    image = read_image(image_path, size)
    if raw_mask.shape != (size, size):
        m = torch.from_numpy(raw_mask.astype(np.float32))[None, None]
        side = min(raw_mask.shape)
        top, left = (raw_mask.shape[0] - side) // 2, (raw_mask.shape[1] - side) // 2
        m = m[..., top:top + side, left:left + side]
        mask = torch.nn.functional.interpolate(m, size=(size, size), mode="nearest")[0, 0].numpy()
    else:
        mask = raw_mask.astype(np.float32)
    gen.eval()
    x = torch.from_numpy(image).permute(2, 0, 1)[None]
    m = torch.from_numpy(mask.astype(np.float32))[None, None]
    with torch.no_grad():
        out = gen(x, m)
    out_path = Path(out_path)
    write_image(out_path, out.composited[0].permute(1, 2, 0).numpy())
    written = [out_path]
    if heatmap_query is not None:
        heat = extract_attention_heatmap(out.relation, heatmap_query, (size, size))
        hpath = out_path.with_name(out_path.stem + "_heatmap.png")
        write_image(hpath, heat.numpy()[..., None])
        written.append(hpath)
    return written


@dataclass
class MetricReport:
    buckets: list[str]
    values: dict[str, dict[str, float]] = field(default_factory=dict)  # bucket -> metric -> value
    counts: dict[str, int] = field(default_factory=dict)

    def metrics(self) -> list[str]:
        names: list[str] = []
        for b in self.buckets:
            for k in self.values.get(b, {}):
                if k not in names:
                    names.append(k)
        return names

    def to_table(self) -> str:
        """Tab-separated: one row per metric, one column per bucket."""
        lines = ["metric\t" + "\t".join(self.buckets)]
        for name in self.metrics():
            lines.append(name + "\t" + "\t".join(f"{self.values[b][name]:.6f}" for b in self.buckets))
        lines.append("count\t" + "\t".join(str(self.counts[b]) for b in self.buckets))
        return "\n".join(lines) + "\n"

    def to_keyvalue(self) -> str:
        lines = []
        for b in self.buckets:
            for name, v in self.values[b].items():
                lines.append(f"{b}.{name}={v:.9g}")
            lines.append(f"{b}.count={self.counts[b]}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table, kv = out / "metrics.tsv", out / "metrics.txt"
        table.write_text(self.to_table())
        kv.write_text(self.to_keyvalue())
        return table, kv


def mask_seed(seed: int, bucket: str, index: int) -> int:
    digest = hashlib.sha256(f"{seed}/{bucket}/{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _global_features(extractor: FeatureExtractor, images: list[np.ndarray]) -> np.ndarray:
    x = torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2)
    with torch.no_grad():
        feats = extractor(x.to(next(extractor.parameters()).dtype))[-1]
    return feats.mean(dim=(2, 3)).double().numpy()


def evaluate(
    inpaint: Inpainter | Generator | str | Path,
    dataset,
    buckets=tuple(BUCKETS),
    seed: int = 0,
    mask_kind: str = "mixed",
    extractor: FeatureExtractor | None = None,
) -> MetricReport:
    """Composite PSNR/SSIM, Fréchet distance and HSV EMD per mask-ratio bucket.

    Images are processed in dataset order and every reduction is a plain mean, so
    repeated calls with the same seed produce the same report.
    """
    if isinstance(inpaint, (str, Path)):
        inpaint = load_checkpoint(inpaint)[0]
    if isinstance(inpaint, Generator):
        inpaint = generator_inpainter(inpaint)
    extractor = extractor or random_extractor(1234)
    images = [np.asarray(dataset[i], dtype=np.float64) for i in range(len(dataset))]
    size = images[0].shape[0]
    sizes = emd_sizes(size)
    report = MetricReport(list(buckets))
    for bucket in buckets:
        rows = {"psnr": [], "ssim": [], **{f"emd@{s}": [] for s in sizes}}
        preds, gts = [], []
        for i, gt in enumerate(images):
            mask = generate_mask(size, size, MaskSpec(mask_kind, bucket, mask_seed(seed, bucket, i)))
            masked = gt * (1 - mask[..., None])
            pred = np.asarray(inpaint(masked, mask), dtype=np.float64)
            pred = pred * mask[..., None] + gt * (1 - mask[..., None])
            rows["psnr"].append(psnr(pred, gt))
            rows["ssim"].append(ssim(pred, gt))
            for s in sizes:
                try:
                    rows[f"emd@{s}"].append(hsv_emd(pred, gt, mask, s))
                except ValueError:
                    rows[f"emd@{s}"].append(np.nan)
            preds.append(pred)
            gts.append(gt)
        vals = {k: float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")
                for k, v in rows.items()}
        if len(images) >= 2:
            vals["fid"] = max(0.0, frechet_distance(_global_features(extractor, gts),
                                                    _global_features(extractor, preds)))
        report.values[bucket] = vals
        report.counts[bucket] = len(images)
    return report


# ablations ----------------------------------------------------------------------

def ablation_variants(base: GeneratorConfig, axis: str, splits=None) -> list[tuple[str, GeneratorConfig]]:
    if axis == "wpa":
        return [("baseline", replace(base, use_wpa=False, use_at=False)),
                ("+WPA", replace(base, use_wpa=True, use_at=False))]
    if axis == "at_count":
        total = base.dc_count + base.at_count
        splits = splits or [(total - k, k) for k in range(0, total, 2)]
        return [(f"DC{dc}/AT{at}", replace(base, dc_count=dc, at_count=at, use_at=at > 0))
                for dc, at in splits]
    if axis == "wpa_scales":
        top = base.levels
        return [("all", replace(base, wpa_scales=tuple(range(1, top + 1)), filter_finest=False)),
                ("all, finest filtered", replace(base, wpa_scales=tuple(range(1, top + 1)),
                                                  filter_finest=True)),
                ("coarse only", replace(base, wpa_scales=tuple(range(2, top + 1)), filter_finest=False))]
    if axis == "attention_kind":
        return [("cosine", replace(base, attention_kind="cosine", use_wpa=False, use_at=False)),
                ("standard", replace(base, attention_kind="standard", use_wpa=False, use_at=False))]
    raise ValueError(f"unknown ablation axis {axis!r}")


def ablate(base_cfg, axis: str, holdout, splits=None, buckets=("20-30",), eval_seed: int = 0,
           out_dir=None) -> list[dict]:
    """Train every variant on the same corpus and mask stream, evaluate on ``holdout``."""
    from .train import TrainConfig, Trainer

    rows = []
    corpus = load_dataset(base_cfg.dataset_path, base_cfg.image_size, base_cfg.seed,
                          base_cfg.dataset_size)
    digest = corpus_digest(corpus, 64)
    for name, gcfg in ablation_variants(base_cfg.generator, axis, splits):
        vdir = Path(out_dir or base_cfg.out_dir) / name.replace("/", "_").replace(" ", "").replace(",", "_")
        cfg = replace(base_cfg, generator=gcfg, out_dir=str(vdir))
        trainer = Trainer(cfg, corpus)
        trainer.run()
        report = evaluate(trainer.G, holdout, buckets, eval_seed)
        row = {"variant": name, "corpus": digest,
               "mask_seed": f"{cfg.seed}/{eval_seed}",
               "params": sum(p.numel() for p in trainer.G.parameters())}
        for b in buckets:
            for k, v in report.values[b].items():
                row[f"{b}.{k}"] = v
        rows.append(row)
        log.info("ablation %s/%s done", axis, name)
    if out_dir is not None:
        write_table(rows, Path(out_dir) / f"ablation_{axis}.tsv")
    return rows


def write_table(rows: list[dict], path) -> None:
    if not rows:
        return
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")

"""Adversarial training loop, run log, config files and resumable checkpoints."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import load_dataset, write_image
from .generator import Generator, GeneratorConfig, load_checkpoint, save_checkpoint
from .haar import build_pyramid
from .losses import (Discriminator, LossReport, LossWeights, adversarial_pair, balanced_l1,
                     perceptual_loss, random_extractor, style_loss, total_generator_loss)
from .masks import sample_training_mask
from .wpa import iht_chain_loss, iht_targets, wavelet_loss

log = logging.getLogger(__name__)

DETERMINISTIC_ENV = "WAIN_DETERMINISTIC"


class TrainingDiverged(RuntimeError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


@dataclass
class TrainConfig:
    image_size: int = 64
    batch_size: int = 8
    total_steps: int = 2000
    g_lr: float = 2e-4
    d_lr: float = 2e-5
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    decay_factor: float = 0.5
    decay_at_fraction: float = 0.8
    seed: int = 0
    dataset_path: str = "synthetic:shapes"
    dataset_size: int = 1000
    disc_channels: int = 16
    extractor_seed: int = 1234
    checkpoint_every: int = 500
    sample_every: int = 0
    out_dir: str = "runs/default"
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.generator.image_size != self.image_size:
            self.generator = GeneratorConfig(**{**asdict(self.generator), "image_size": self.image_size})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        weights = LossWeights(**data.pop("weights", {}))
        gen = GeneratorConfig(**data.pop("generator", {}))
        return cls(weights=weights, generator=gen, **data)


# flat ``section.key = value`` config files ------------------------------------

SECTIONS = {"train": None, "loss": "weights", "generator": "generator"}


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value.strip()


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    data = asdict(cfg)
    for key, value in pairs.items():
        section, _, name = key.rpartition(".")
        section = section or "train"
        if section not in SECTIONS:
            raise KeyError(f"unknown config section {section!r} in {key!r}")
        target = data if SECTIONS[section] is None else data[SECTIONS[section]]
        if name not in target or isinstance(target[name], dict):
            raise KeyError(f"unknown config key {key!r}")
        target[name] = _coerce(value, target[name])
    return TrainConfig.from_dict(data)


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    pairs = parse_config_text(Path(path).read_text()) if path else {}
    pairs.update(overrides or {})
    return apply_overrides(TrainConfig(), pairs)


def dump_config(cfg: TrainConfig) -> str:
    data = asdict(cfg)
    lines = []
    for section, attr in SECTIONS.items():
        block = data if attr is None else data[attr]
        for k, v in block.items():
            if isinstance(v, dict):
                continue
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{section}.{k} = {v}")
    return "\n".join(lines) + "\n"


# batches ------------------------------------------------------------------------

def batch_indices(step: int, batch_size: int, n: int, seed: int) -> np.ndarray:
    """Indices for ``step`` (1-based); depends only on its arguments."""
    start = (step - 1) * batch_size
    idx = []
    for pos in range(start, start + batch_size):
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
        idx.append(perm[offset])
    return np.asarray(idx)


def training_batch(corpus, step: int, cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    idx = batch_indices(step, cfg.batch_size, len(corpus), cfg.seed)
    images = np.stack([corpus[int(i)] for i in idx]).astype(np.float32)
    rng = np.random.default_rng([cfg.seed, 11, step])
    masks = np.stack([sample_training_mask(cfg.image_size, cfg.image_size, rng) for _ in idx])
    x = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    m = torch.from_numpy(masks.astype(np.float32))[:, None]
    return x, m


# losses -------------------------------------------------------------------------

def generator_parts(out, clean, mask, extractor, gcfg: GeneratorConfig) -> dict:
    parts = {
        "l1": balanced_l1(out.raw, clean, mask),
        "per": perceptual_loss(out.raw, clean, mask, extractor),
        "sty": style_loss(out.raw, clean, extractor),
    }
    if gcfg.use_wpa:
        gt = build_pyramid(clean, None, gcfg.levels, gcfg.filter_finest)
        parts["wav"] = wavelet_loss(out.agg_pyramid, gt, mask)
        parts["iht"] = iht_chain_loss(out.agg_pyramid, gt.lows, iht_targets(clean, gt.lows),
                                      out.raw, mask)
    return parts


def learning_rate(base: float, step: int, cfg: TrainConfig) -> float:
    """One decay event: steps past ``decay_at_fraction * total_steps`` use the decayed rate."""
    return base * cfg.decay_factor if step > cfg.decay_at_fraction * cfg.total_steps else base


# state --------------------------------------------------------------------------

def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for i, state in opt.state_dict()["state"].items():
        for k, v in state.items():
            out[f"{prefix}/{i}/{k}"] = torch.as_tensor(v).detach().cpu().numpy().astype(np.float32)
    return out


def _load_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, v in arrays.items():
        if key.startswith(prefix + "/"):
            _, i, k = key.split("/")
            t = torch.from_numpy(np.array(v))
            state.setdefault(int(i), {})[k] = t.reshape(()) if k == "step" else t
    sd["state"] = state
    opt.load_state_dict(sd)


@dataclass
class RunLog:
    path: Path | None = None
    records: list[dict] = field(default_factory=list)

    def append(self, step: int, report: LossReport, wall_time: float, **extra) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError(f"step {step} is not after {self.records[-1]['step']}")
        rec = {"step": step, **report.as_floats(), **extra, "wall_time": wall_time}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(format_record(rec) + "\n")

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])


def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        parts.append(f"{k}={v}" if isinstance(v, int) else f"{k}={v:.9g}")
    return " ".join(parts)


def parse_runlog(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        rec = {}
        for item in line.split():
            k, v = item.split("=", 1)
            rec[k] = int(v) if k == "step" else float(v)
        out.append(rec)
    return out


class Trainer:
    """Holds the two networks, their optimizers and the data stream.  ``run`` trains
    from the current step to ``cfg.total_steps``."""

    def __init__(self, cfg: TrainConfig, corpus=None):
        self.cfg = cfg
        self.deterministic = deterministic_mode()
        if self.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        self.G = Generator(cfg.generator)
        self.D = Discriminator(base_channels=cfg.disc_channels)
        self.extractor = random_extractor(cfg.extractor_seed)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.g_lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.d_lr, betas=betas)
        self._check_disjoint()
        self.corpus = corpus if corpus is not None else load_dataset(
            cfg.dataset_path, cfg.image_size, cfg.seed, cfg.dataset_size)
        self.step = 0
        self.out_dir = Path(cfg.out_dir)
        self.log = RunLog()

    def _check_disjoint(self) -> None:
        g_ids = {id(p) for grp in self.opt_g.param_groups for p in grp["params"]}
        d_ids = {id(p) for grp in self.opt_d.param_groups for p in grp["params"]}
        if g_ids & d_ids:
            raise RuntimeError("generator and discriminator optimizers share parameters")
        if g_ids != {id(p) for p in self.G.parameters()} or d_ids != {id(p) for p in self.D.parameters()}:
            raise RuntimeError("optimizer parameter sets do not match their networks")

    def set_lr(self, step: int) -> None:
        for grp in self.opt_g.param_groups:
            grp["lr"] = learning_rate(self.cfg.g_lr, step, self.cfg)
        for grp in self.opt_d.param_groups:
            grp["lr"] = learning_rate(self.cfg.d_lr, step, self.cfg)

    def train_step(self, step: int) -> LossReport:
        cfg = self.cfg
        self.set_lr(step)
        self.G.train()
        self.D.train()
        x, m = training_batch(self.corpus, step, cfg)
        out = self.G(x, m)

        d_loss, _ = adversarial_pair(self.D(x), self.D(out.composited.detach()))
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        for p in self.D.parameters():
            p.requires_grad_(False)
        _, g_adv = adversarial_pair(self.D(x), self.D(out.composited))
        for p in self.D.parameters():
            p.requires_grad_(True)
        parts = generator_parts(out, x, m, self.extractor, cfg.generator)
        parts["adv"] = g_adv
        parts["d_loss"] = d_loss.detach()
        report = total_generator_loss(parts, cfg.weights)
        if not (torch.isfinite(report.total) and torch.isfinite(d_loss)):
            raise TrainingDiverged(f"non-finite loss at step {step}: {report.as_line()}")
        self.opt_g.zero_grad(set_to_none=True)
        report.total.backward()
        self.opt_g.step()
        return LossReport(**report.as_floats())

    def run(self, until: int | None = None, log_path: Path | None = None) -> RunLog:
        cfg = self.cfg
        until = cfg.total_steps if until is None else until
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if log_path is not None:
            self.log.path = Path(log_path)
        elif self.log.path is None:
            self.log.path = self.out_dir / "runlog.txt"
            if self.step == 0:
                self.log.path.write_text("")
        t0 = time.perf_counter()
        while self.step < until:
            step = self.step + 1
            report = self.train_step(step)
            self.step = step
            wall = 0.0 if self.deterministic else time.perf_counter() - t0
            self.log.append(step, report, wall, g_lr=self.opt_g.param_groups[0]["lr"])
            if cfg.sample_every and step % cfg.sample_every == 0:
                self.save_samples(step)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                self.save(self.out_dir / "checkpoint.npz")
        self.save(self.out_dir / "checkpoint.npz")
        return self.log

    def save(self, path) -> None:
        extra = {f"discriminator/{k}": v.detach().cpu().numpy().astype(np.float32)
                 for k, v in self.D.state_dict().items()}
        extra.update(_optimizer_arrays("optim_g", self.opt_g))
        extra.update(_optimizer_arrays("optim_d", self.opt_d))
        extra["step"] = np.array(self.step)
        extra["train_config"] = np.array(self.cfg.to_json())
        save_checkpoint(path, self.G, extra)

    @classmethod
    def resume(cls, path, corpus=None) -> "Trainer":
        gen, arrays = load_checkpoint(path)
        cfg = TrainConfig.from_dict(json.loads(str(arrays["train_config"])))
        trainer = cls(cfg, corpus)
        trainer.G.load_state_dict(gen.state_dict())
        trainer.D.load_state_dict({k[len("discriminator/"):]: torch.from_numpy(v)
                                   for k, v in arrays.items() if k.startswith("discriminator/")})
        _load_optimizer("optim_g", trainer.opt_g, arrays)
        _load_optimizer("optim_d", trainer.opt_d, arrays)
        trainer.step = int(arrays["step"])
        return trainer

    def save_samples(self, step: int) -> None:
        x, m = training_batch(self.corpus, step, self.cfg)
        self.G.eval()
        with torch.no_grad():
            out = self.G(x[:4], m[:4])
        rows = []
        for i in range(out.raw.shape[0]):
            masked = (x[i] * (1 - m[i])).permute(1, 2, 0).numpy()
            rows.append(np.concatenate([masked, out.composited[i].permute(1, 2, 0).numpy(),
                                        x[i].permute(1, 2, 0).numpy()], axis=1))
        write_image(self.out_dir / f"samples_{step:07d}.png", np.concatenate(rows, axis=0))


def train(cfg: TrainConfig, corpus=None) -> tuple[Trainer, RunLog]:
    trainer = Trainer(cfg, corpus)
    log.info("generator parameters: %d", sum(p.numel() for p in trainer.G.parameters()))
    return trainer, trainer.run()


# pinned smoke run ---------------------------------------------------------------

SMOKE_WINDOW = 100


def smoke_config(out_dir: str = "runs/smoke", **overrides) -> TrainConfig:
    """Desk-scale run: 64 px shapes, batch 8, 2000 steps, narrow generator."""
    gen = GeneratorConfig(image_size=64, base_channels=16)
    base = dict(image_size=64, batch_size=8, total_steps=2000, seed=0,
                dataset_path="synthetic:shapes", dataset_size=1000, checkpoint_every=0,
                out_dir=out_dir, generator=gen)
    base.update(overrides)
    return TrainConfig(**base)


def loss_windows(records: list[dict], key: str = "total", window: int = SMOKE_WINDOW):
    """(early, final) means: steps ``window+1 .. 2*window`` and the last ``window`` steps."""
    steps = np.array([r["step"] for r in records])
    vals = np.array([r[key] for r in records])
    last = int(steps.max()) if len(steps) else 0
    if last < 3 * window:
        raise ValueError(f"need at least {3 * window} steps, have {last}")
    early = vals[(steps > window) & (steps <= 2 * window)]
    final = vals[steps > last - window]
    return float(early.mean()), float(final.mean())


def value_near(records: list[dict], key: str, step: int, window: int = SMOKE_WINDOW) -> float:
    """Mean of ``key`` over the ``window`` steps centred on ``step``."""
    lo, hi = step - window // 2, step + window // 2
    vals = [r[key] for r in records if lo < r["step"] <= hi]
    if not vals:
        raise ValueError(f"no records near step {step}")
    return float(np.mean(vals))


def holdout_psnr(gen: Generator, images, seed: int = 0) -> tuple[float, float]:
    """Masked-region PSNR of the generator and of mask-mean fill on ``images``.

    Mean fill paints the hole with the per-channel mean of the known pixels.
    Both numbers average the per-image PSNR over the same masks.
    """
    from .metrics import masked_psnr

    gen.eval()
    ours, base = [], []
    rng = np.random.default_rng([seed, 13])
    for img in images:
        img = np.asarray(img, dtype=np.float32)
        h, w = img.shape[:2]
        mask = sample_training_mask(h, w, rng)
        known = mask == 0
        fill = img.copy()
        fill[~known] = img[known].mean(axis=0)
        x = torch.from_numpy(img).permute(2, 0, 1)[None]
        m = torch.from_numpy(mask.astype(np.float32))[None, None]
        with torch.no_grad():
            pred = gen(x, m).composited[0].permute(1, 2, 0).numpy()
        ours.append(masked_psnr(pred, img, mask))
        base.append(masked_psnr(fill, img, mask))
    return float(np.mean(ours)), float(np.mean(base))

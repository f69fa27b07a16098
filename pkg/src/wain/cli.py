"""Command line entry point: ``wain {train,infer,eval,ablate,mask-gen,pyramid-dump}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pairs(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _train_config(args):
    from .train import load_config

    overrides = _pairs(args.set)
    for flag, key in (("steps", "total_steps"), ("batch_size", "batch_size"), ("seed", "seed"),
                      ("out", "out_dir"), ("dataset", "dataset_path"), ("image_size", "image_size")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from .train import Trainer, dump_config

    if args.resume:
        trainer = Trainer.resume(args.resume)
        if args.steps:
            trainer.cfg.total_steps = args.steps
    else:
        cfg = _train_config(args)
        trainer = Trainer(cfg)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out_dir) / "config.txt").write_text(dump_config(cfg))
    trainer.run()
    print(f"checkpoint: {trainer.out_dir / 'checkpoint.npz'}")
    return EXIT_OK


def _query(text):
    if text is None:
        return None
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--heatmap expects ROW,COL, got {text!r}") from exc
    return r, c


def cmd_infer(args) -> int:
    from .evaluate import infer

    for path in infer(args.checkpoint, args.image, args.mask, args.out, _query(args.heatmap)):
        print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluate import evaluate
    from .generator import load_checkpoint

    gen, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.dataset, gen.cfg.image_size, args.seed, args.count)
    if args.count:
        data = data[: args.count]
    report = evaluate(gen, data, args.buckets, args.seed, args.mask_kind)
    table, kv = report.write(args.out)
    sys.stdout.write(report.to_table())
    print(f"written: {table} {kv}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .data import load_dataset
    from .evaluate import ablate

    cfg = _train_config(args)
    holdout = load_dataset(args.holdout, cfg.image_size, cfg.seed + 1, args.holdout_count)
    holdout = holdout[: args.holdout_count]
    splits = None
    if args.splits:
        splits = [tuple(int(v) for v in s.split("/")) for s in args.splits.split(",")]
    rows = ablate(cfg, args.axis, holdout, splits, tuple(args.buckets), out_dir=cfg.out_dir)
    for row in rows:
        print("\t".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_mask_gen(args) -> int:
    from .masks import MaskSpec, generate_mask, mask_ratio, write_mask

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        mask = generate_mask(args.size, args.size, MaskSpec(args.kind, args.bucket, args.seed + i))
        path = out / f"mask_{i:05d}.png"
        write_mask(path, mask)
        print(f"{path}\t{mask_ratio(mask):.4f}")
    return EXIT_OK


def cmd_pyramid_dump(args) -> int:
    import numpy as np
    import torch

    from .data import read_image
    from .haar import build_pyramid, dump_pyramid
    from .masks import read_mask

    img = read_image(args.image, args.size)
    x = torch.from_numpy(img.astype(np.float64)).permute(2, 0, 1)[None]
    mask = None
    if args.mask:
        m = read_mask(args.mask)
        if m.shape != img.shape[:2]:
            raise UsageError(f"mask {m.shape} does not match image {img.shape[:2]}")
        mask = torch.from_numpy(m.astype(np.float64))[None, None]
    pyr = build_pyramid(x, mask, args.levels, args.filter_finest)
    for path in dump_pyramid(pyr, args.out):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def train_flags(sp):
        sp.add_argument("--config", help="key=value config file (section.key = value)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--image-size", type=int)
        sp.add_argument("--dataset")
        sp.add_argument("--out")

    sp = sub.add_parser("train", help="train a generator/discriminator pair")
    train_flags(sp)
    sp.add_argument("--resume", help="continue from a checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="inpaint one image")
    sp.add_argument("checkpoint")
    sp.add_argument("image")
    sp.add_argument("mask")
    sp.add_argument("out")
    sp.add_argument("--heatmap", metavar="ROW,COL", help="also write the attention heatmap for a patch")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="bucketed PSNR/SSIM/FID/EMD report")
    sp.add_argument("checkpoint")
    sp.add_argument("--dataset", default="synthetic:shapes")
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--mask-kind", default="mixed", choices=["irregular", "region", "mixed"])
    sp.add_argument("--buckets", nargs="+", default=["10-20", "20-30", "30-40", "40-50"])
    sp.add_argument("--out", default="eval")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare variants along one axis")
    train_flags(sp)
    sp.add_argument("--axis", required=True, choices=["wpa", "at_count", "wpa_scales", "attention_kind"])
    sp.add_argument("--splits", help="DC/AT splits for at_count, e.g. 8/0,6/2,4/4,2/6")
    sp.add_argument("--holdout", default="synthetic:shapes")
    sp.add_argument("--holdout-count", type=int, default=32)
    sp.add_argument("--buckets", nargs="+", default=["20-30"])
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("mask-gen", help="write procedural masks as PNG (255 = missing)")
    sp.add_argument("--kind", default="mixed", choices=["irregular", "region", "mixed"])
    sp.add_argument("--bucket", default="any")
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="masks")
    sp.set_defaults(func=cmd_mask_gen)

    sp = sub.add_parser("pyramid-dump", help="write every Haar band of an image as PNG")
    sp.add_argument("image")
    sp.add_argument("--mask")
    sp.add_argument("--size", type=int, default=None)
    sp.add_argument("--levels", type=int, default=4)
    sp.add_argument("--filter-finest", action="store_true")
    sp.add_argument("--out", default="pyramid")
    sp.set_defaults(func=cmd_pyramid_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"wain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError) as exc:
        if isinstance(exc, KeyError) and "config" in str(exc):
            print(f"wain: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"wain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"wain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

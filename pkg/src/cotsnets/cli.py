"""``cotsnets`` command line: train, eval, gen-synth, boundary.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("cotsnets")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .config import ConfigError, load_run_config, schema_text
    from .data import DatasetSpec, load_dataset
    from .trainer import fit

    if args.print_schema:
        print(schema_text())
        return EXIT_OK
    if not args.config:
        raise UsageError("--config is required")
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        run = load_run_config(args.config, overrides)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    if run.source is None or run.target is None:
        raise UsageError(f"{args.config}: both 'source' and 'target' datasets are required")
    cfg = run.train
    out = prepare_out_dir(args.out or run.output_dir, args.force)

    def load(section, domain, augment_default):
        size = tuple(section.resize_to or cfg.input_size)
        spec = DatasetSpec(section.root, section.split, size, augment_default, section.seed, domain)
        return load_dataset(spec, cfg.gaussian)

    source = load(run.source, "source", cfg.augmentation)
    target = load(run.target, "target", cfg.augmentation)
    eval_set = load(run.eval, "target", False) if run.eval else None
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    _, report = fit(cfg, source, target, eval_set, out)
    a = report.aggregate
    print(f"dice={a['dice']:.3f} iou={a['iou']:.3f} asd={a['asd']} hd95={a['hd95']} -> {out / 'metrics.json'}")
    return EXIT_OK


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like HxW, got {text!r}") from None
    return h, w


def cmd_eval(args) -> int:
    from .config import ConfigError, load_run_config
    from .data import DatasetSpec, load_dataset
    from .metrics import evaluate
    from .trainer import load_universal

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, cfg = load_universal(ckpt)
    ck_size = tuple(cfg.input_size)
    if args.input_size:
        size = _parse_size(args.input_size)
        if size != ck_size:
            raise UsageError(f"input size mismatch: requested {size[0]}x{size[1]}, "
                             f"checkpoint expects {ck_size[0]}x{ck_size[1]}")
    if args.config:
        try:
            run = load_run_config(args.config)
        except ConfigError as e:
            raise UsageError(str(e)) from None
        want = run.train.model_config().to_dict()
        have = cfg.model_config().to_dict()
        diff = sorted(k for k in want if want[k] != have.get(k))
        if diff:
            detail = ", ".join(f"{k}: config={want[k]} checkpoint={have.get(k)}" for k in diff)
            raise UsageError(f"config/checkpoint mismatch ({detail})")
    out = prepare_out_dir(args.out, args.force)
    data = load_dataset(DatasetSpec(args.data, "test", ck_size, False, 0, args.domain), cfg.gaussian)
    report = evaluate(model, data, threshold=args.threshold, spacing=args.spacing, domain=args.domain)
    (out / "metrics.json").write_text(report.to_json(indent=2))
    if args.overlays:
        write_overlays(model, data, args.domain, args.threshold, out / "overlays")
    a = report.aggregate
    print(f"dice={a['dice']:.3f} iou={a['iou']:.3f} asd={a['asd']} hd95={a['hd95']} -> {out / 'metrics.json'}")
    return EXIT_OK


def write_overlays(model, samples, domain, threshold, out_dir):
    """Image with the ground-truth contour in green and the prediction contour in red."""
    from .data import make_batch
    from .geometry import surface_coords
    from .metrics import predict_probs

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        probs = predict_probs(model, make_batch([s]).images, domain)
        pred = (probs[0, 0] > threshold).numpy()
        rgb = np.clip(np.round(s.image * 255), 0, 255).astype(np.uint8).copy()
        for mask, color in ((s.mask, (0, 255, 0)), (pred, (255, 0, 0))):
            pts = surface_coords(mask)
            if len(pts):
                rgb[pts[:, 0], pts[:, 1]] = color
        Image.fromarray(rgb).save(out_dir / f"{s.id}.png")


def cmd_gen_synth(args) -> int:
    from .data import generate_synthetic, write_dataset

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = prepare_out_dir(args.out, args.force)
    samples = generate_synthetic(args.style, args.n, seed=args.seed, size=args.size)
    write_dataset(samples, out)
    print(f"wrote {len(samples)} {args.style} samples to {out}")
    return EXIT_OK


def cmd_boundary(args) -> int:
    from .data import IMAGE_SUFFIXES, read_mask
    from .geometry import GaussianSpec, boundary_map

    try:
        spec = GaussianSpec(args.kernel, args.sigma)
    except ValueError as e:
        raise UsageError(str(e)) from None
    src = Path(args.masks)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    elif src.is_file():
        paths = [src]
    else:
        raise UsageError(f"mask path not found: {src}")
    out = prepare_out_dir(args.out, args.force)
    for p in paths:
        values = boundary_map(read_mask(p), spec).values
        Image.fromarray(np.round(values * 255).astype(np.uint8)).save(out / f"{p.stem}.png")
    print(f"wrote {len(paths)} boundary map(s) to {out}")
    return EXIT_OK


# ------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cotsnets", description="Cross-organ domain-adaptive tumour segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a YAML run config")
    t.add_argument("--config", help="run configuration (YAML)")
    t.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="override a config value; bare keys address the train section")
    t.add_argument("--out", help="output directory (default: output_dir from the config)")
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    t.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset root with images/ and masks/")
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="run config to check against the checkpoint")
    e.add_argument("--input-size", help="expected input size HxW")
    e.add_argument("--domain", default="target", choices=["source", "target"])
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--spacing", type=float, default=1.0)
    e.add_argument("--overlays", action="store_true", help="write contour overlay PNGs")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-synth", help="write a synthetic phantom dataset")
    g.add_argument("--style", required=True, choices=["ellipse_speckle", "blob_texture"])
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_synth)

    b = sub.add_parser("boundary", help="export boundary maps of mask files as PNG")
    b.add_argument("masks", help="mask PNG or directory of masks")
    b.add_argument("--kernel", type=int, default=5)
    b.add_argument("--sigma", type=float, default=1.0)
    b.add_argument("--out", required=True)
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_boundary)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"cotsnets {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - any failure past validation is a runtime error
        log.debug("command failed", exc_info=True)
        print(f"cotsnets {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

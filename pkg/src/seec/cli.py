"""Command-line interface: ``seec {encode,decode,train,eval,ablate}``.

Results go to stdout as key=value lines (or CSV for tables); diagnostics go
to stderr. Exit status is 0 on success, 1 for invalid input, 2 for file
system errors and 3 for anything unexpected.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import container, maskio, trainer
from .coder import StreamExhausted
from .model import SeecModel
from .ndtensor import ContractError

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("seec")


class UsageError(ValueError):
    """Bad combination of command-line arguments."""


def _load_model(path) -> SeecModel:
    if path is None:
        raise UsageError("--weights is required")
    return SeecModel.load(path)


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return Path(args.out)


def _load_config(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig()
    if args.config is not None:
        cfg = trainer.parse_config(Path(args.config).read_text())
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_pair(image_path, mask_path, n_classes: int):
    img = maskio.read_ppm(image_path)
    mask = maskio.load_mask(mask_path, n_classes, image_hw=img.shape[:2])
    return img, mask


# -- commands ----------------------------------------------------------------------


def cmd_encode(args) -> int:
    out = _require_out(args)
    model = _load_model(args.weights)
    img, mask = _load_pair(args.image, args.mask, model.config.N)
    blob, stats = container.encode_image(img, mask, model, roi=args.roi)
    out.write_bytes(blob)
    print(stats.line())
    return EXIT_OK


def cmd_decode(args) -> int:
    out = _require_out(args)
    model = _load_model(args.weights)
    blob = Path(args.stream).read_bytes()
    img = container.decode_image(blob, model)
    maskio.write_ppm(out, img)
    if args.mask_out:
        maskio.save_mask(args.mask_out, container.decode_mask(blob))
    head = container.read_header(blob)
    print(f"width={head.width} height={head.height} roi={int(head.roi)}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _require_out(args)
    cfg = _load_config(args)
    res = trainer.train(cfg, log=sys.stderr)
    res.model.save(out)
    print(f"best_val_bpp={res.best_val:.6f} steps={res.steps} model_hash={res.model.model_hash().hex()}")
    return EXIT_OK


def _pairs(directory: Path):
    """Sorted (stem, ppm, pgm) triples; unpaired files are reported and skipped."""
    ppm = {p.stem: p for p in directory.glob("*.ppm")}
    pgm = {p.stem: p for p in directory.glob("*.pgm")}
    for stem in sorted(set(ppm) ^ set(pgm)):
        log.warning("skipping unpaired file %s", (ppm.get(stem) or pgm.get(stem)).name)
    return [(s, ppm[s], pgm[s]) for s in sorted(set(ppm) & set(pgm))]


def cmd_eval(args) -> int:
    model = _load_model(args.weights)
    directory = Path(args.directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    parts = ("total", "latent", "mask", "pixel")
    rows = []
    for stem, ppm, pgm in _pairs(directory):
        img, mask = _load_pair(ppm, pgm, model.config.N)
        _, stats = container.encode_image(img, mask, model, roi=args.roi)
        rows.append((stem, [stats.bpp(p) for p in parts]))
    if not rows:
        raise UsageError(f"no image/mask pairs in {directory}")
    lines = ["image," + ",".join(f"bpp_{p}" for p in parts)]
    lines += [f"{stem}," + ",".join(f"{v:.6f}" for v in vals) for stem, vals in rows]
    means = [sum(v[i] for _, v in rows) / len(rows) for i in range(len(parts))]
    lines.append("mean," + ",".join(f"{v:.6f}" for v in means))
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    arms = tuple(args.arms.split(",")) if args.arms else tuple(trainer.ARMS)
    report, _ = trainer.ablate(cfg, arms=arms, log=sys.stderr)
    if args.out:
        Path(args.out).write_text(report.csv())
    sys.stdout.write(report.text())
    return EXIT_OK


# -- plumbing -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seec", description="Semantic-aware lossless image codec")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, weights=False, config=False):
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override the random seed")
        if weights:
            p.add_argument("--weights", help="model checkpoint")
        if config:
            p.add_argument("--config", help="key = value training configuration")

    p = sub.add_parser("encode", help="compress an image with its semantic mask")
    p.add_argument("image", help="input PPM (P6)")
    p.add_argument("mask", help="mask PGM (P5)")
    p.add_argument("--roi", action="store_true", help="code only the foreground losslessly")
    common(p, weights=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct an image from a .seec stream")
    p.add_argument("stream")
    p.add_argument("--mask-out", help="also write the decoded mask")
    common(p, weights=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train a model on the synthetic corpus")
    common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="bpp table for a directory of PPM/PGM pairs")
    p.add_argument("directory")
    p.add_argument("--roi", action="store_true")
    common(p, weights=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare the ablation arms")
    p.add_argument("--arms", help="comma-separated subset of " + ",".join(trainer.ARMS))
    common(p, config=True)
    p.set_defaults(func=cmd_ablate)
    return parser


_INVALID = (
    UsageError,
    ValueError,
    ContractError,
    StreamExhausted,
    maskio.MaskError,
    container.FormatError,
    container.ModelMismatchError,
)


def _setup_logging() -> None:
    # bind to the current stderr on every call so embedding callers can redirect it
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.propagate = False


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except trainer.TrainingError as exc:
        log.error("training failed: %s", exc)
        return EXIT_INTERNAL
    except _INVALID as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort classification
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

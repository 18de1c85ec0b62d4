"""Command-line entry point: ``aggseg {synth,prior-stats,train,eval,predict,blindspot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import blindspot as bs
from .config import ExperimentConfig, parse_overrides
from .data import (binarize, compute_class_prior, generate_synthetic, load_dataset, read_image, read_mask,
                   select_training_subset, write_mask)
from .exceptions import AggSegError, InputError
from .losses import CLASS_NAMES, class_weights_from_masks
from .model import ArchConfig, build_model, load_checkpoint
from .metrics import write_metrics_csv
from .trainer import evaluate_checkpoint, fit, predict_proba

logger = logging.getLogger("aggseg")

# error overlay colours for aggregate pixels
FN_COLOUR = (0, 0, 255)
FP_COLOUR = (255, 0, 0)


def _training_split(cfg: ExperimentConfig):
    root = cfg.data["root"]
    if not root:
        raise InputError("data.root is not set")
    split = load_dataset(root)
    k = int(cfg.data["k"] or 0)
    if k > 0:
        split = select_training_subset(split, k, cfg.seed)
    return split


def cmd_synth(cfg, out: Path):
    split = generate_synthetic(cfg.synth, out)
    fraction = np.mean([t.mask.mean() for t in split.labelled]) if split.labelled else float("nan")
    print(f"wrote {len(split.labelled)} labelled and {len(split.unlabelled)} unlabelled tiles to {out} "
          f"(aggregate fraction {fraction:.3f})")


def cmd_prior_stats(cfg, out: Path):
    split = _training_split(cfg)
    prior = compute_class_prior(t.mask for t in split.labelled)
    lines = ["class,mu,sigma"]
    lines += [f"{name},{mu:.6f},{sigma:.6f}" for name, mu, sigma in zip(CLASS_NAMES, prior.mu, prior.sigma)]
    text = "\n".join(lines) + "\n"
    (out / "prior.csv").write_text(text)
    print(text, end="")


def cmd_train(cfg, out: Path):
    split = _training_split(cfg)
    prior = compute_class_prior(t.mask for t in split.labelled)
    arch_kwargs = cfg.arch.to_dict()
    arch_kwargs.update(input_size=split.tile_size, with_aux=cfg.train.uses_unlabelled)
    model = build_model(ArchConfig(**arch_kwargs))
    weights = class_weights_from_masks(t.mask for t in split.labelled)
    model, history = fit(model, split, prior, cfg.train, class_weights=weights, checkpoint_dir=out)
    (out / "prior.json").write_text(json.dumps({"mu": prior.mu, "sigma": prior.sigma}) + "\n")
    last = history.records[-1]
    print(f"trained {cfg.train.variant} for {last.epoch} epochs; best epoch {history.best_epoch} "
          f"(loss {history.best_loss:.6f}); checkpoint {out / 'best.pt'}")


def _checkpoint_path(cfg, out: Path):
    path = cfg.data["checkpoint"] or str(out / "best.pt")
    if not Path(path).exists():
        raise InputError(f"checkpoint {path} not found")
    return path


def cmd_eval(cfg, out: Path):
    split = _training_split(cfg)
    tiles = split.held_out if int(cfg.data["k"] or 0) > 0 else split.labelled
    model = load_checkpoint(_checkpoint_path(cfg, out))
    _, row = evaluate_checkpoint(model, tiles, cfg.train.variant, str(cfg.data["setup"]),
                                 threshold=float(cfg.data["threshold"]))
    write_metrics_csv([row], out / "metrics.csv")
    print(", ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def error_overlay(image, pred, ref):
    """RGB uint8 image with false-negative aggregate pixels blue and false positives red."""
    rgb = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8).copy()
    rgb[(ref == 1) & (pred == 0)] = FN_COLOUR
    rgb[(ref == 0) & (pred == 1)] = FP_COLOUR
    return rgb


def cmd_predict(cfg, out: Path):
    images_dir = cfg.predict["images"] or (Path(cfg.data["root"]) / "unlabelled" / "images" if cfg.data["root"] else "")
    if not images_dir or not Path(images_dir).is_dir():
        raise InputError("predict.images must name a directory of PNG tiles")
    paths = sorted(Path(images_dir).glob("*.png"))
    if not paths:
        raise InputError(f"no PNG tiles in {images_dir}")
    model = load_checkpoint(_checkpoint_path(cfg, out))
    masks_dir = Path(cfg.predict["masks"]) if cfg.predict["masks"] else None
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if masks_dir:
        (out / "overlays").mkdir(parents=True, exist_ok=True)
    threshold = float(cfg.data["threshold"])
    for path in paths:
        image = read_image(path)
        pred = binarize(predict_proba(model, image[None])[0], threshold)
        write_mask(out / "masks" / path.name, pred)
        if masks_dir and (masks_dir / path.name).exists():
            ref = read_mask(masks_dir / path.name)
            Image.fromarray(error_overlay(image, pred, ref), mode="RGB").save(out / "overlays" / path.name)
    print(f"wrote {len(paths)} masks to {out / 'masks'}")


def cmd_blindspot(cfg, out: Path):
    b = cfg.blindspot
    priors = tuple(float(p) for p in np.atleast_1d(b["priors"]))
    model = bs.BlindSpotModel(priors, float(b["error_rate"]))
    names = tuple(b["class_names"]) if len(b["class_names"]) == len(priors) else None
    rows = bs.bias_report(model, int(b["trials"]), np.random.default_rng(cfg.seed), class_names=names)
    text = bs.report_to_csv(rows)
    (out / "blindspot.csv").write_text(text)
    print(text, end="")


COMMANDS = {
    "synth": cmd_synth,
    "prior-stats": cmd_prior_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "blindspot": cmd_blindspot,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="aggseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value experiment file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.config is not None and not args.config.exists():
            raise InputError(f"config file {args.config} not found")
        overrides = parse_overrides(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = ExperimentConfig.load(args.config, overrides)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "resolved-config").write_text(cfg.to_text())
        COMMANDS[args.command](cfg, args.out)
    except AggSegError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

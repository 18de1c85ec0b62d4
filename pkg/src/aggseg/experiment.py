"""Seeded base / cons / full ablation on generated data, scored on held-out tiles."""

from __future__ import annotations

import dataclasses
import logging
import statistics
import time

from .data import SynthConfig, compute_class_prior, generate_synthetic, select_training_subset
from .losses import class_weights_from_masks
from .metrics import write_metrics_csv
from .model import ArchConfig, build_model
from .trainer import VARIANTS, TrainConfig, evaluate_checkpoint, fit

logger = logging.getLogger(__name__)


def run_ablation(synth: SynthConfig, train: TrainConfig, seeds, k=1, arch: ArchConfig = None,
                 variants=VARIANTS, csv_path=None):
    """Train every variant for every seed; returns one metrics row per (seed, variant).

    Each seed regenerates the dataset, draws ``k`` labelled tiles per pipe for
    training and scores the main decoder on the remaining labelled tiles.
    The ``setup`` column holds the seed.
    """
    arch = arch or ArchConfig(input_size=synth.tile_size)
    rows = []
    for seed in seeds:
        full = generate_synthetic(dataclasses.replace(synth, seed=seed))
        split = select_training_subset(full, k, seed)
        prior = compute_class_prior(t.mask for t in split.labelled)
        weights = class_weights_from_masks(t.mask for t in split.labelled)
        for variant in variants:
            start = time.perf_counter()
            config = dataclasses.replace(train, variant=variant, seed=seed)
            model = build_model(dataclasses.replace(arch, input_size=synth.tile_size,
                                                    with_aux=config.uses_unlabelled))
            model, _ = fit(model, split, prior, config, class_weights=weights)
            _, row = evaluate_checkpoint(model, split.held_out, variant, str(seed))
            rows.append(row)
            logger.info("seed %s %s: MF1 %.2f (%.0f s)", seed, variant, row["MF1"], time.perf_counter() - start)
    if csv_path is not None:
        write_metrics_csv(rows, csv_path)
    return rows


def median_by_variant(rows, column):
    """Median of ``column`` across seeds, keyed by variant."""
    out = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        out[variant] = statistics.median(r[column] for r in rows if r["variant"] == variant)
    return out

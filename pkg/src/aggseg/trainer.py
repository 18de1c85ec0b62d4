"""Training loop for the base / cons / full variants and held-out evaluation."""

from __future__ import annotations

import contextlib
import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .data import DatasetSplit, binarize
from .exceptions import ConfigurationError, InputError, TrainingError
from .losses import ClassPrior, LossWeights
from .metrics import ConfusionCounts, accumulate, metrics_row
from .model import RSNet, save_checkpoint
from .perturb import PerturbConfig, perturb_latent

logger = logging.getLogger(__name__)

VARIANTS = ("base", "cons", "full")


@dataclass
class TrainConfig:
    variant: str = "full"
    epochs: int = 500
    batch_labelled: int = 4
    batch_unlabelled: int = 4
    lr_initial: float = 1e-3
    lr_decay_factor: float = 0.1
    plateau_patience_epochs: int = 25
    plateau_threshold: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay_l2: float = 1e-5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.perturb, dict):
            self.perturb = PerturbConfig(**self.perturb)
        if self.variant not in VARIANTS:
            raise ConfigurationError("variant", f"{self.variant!r} not in {VARIANTS}")
        for name in ("epochs", "batch_labelled", "batch_unlabelled", "plateau_patience_epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(name, "must be >= 1")
        if self.lr_initial <= 0:
            raise ConfigurationError("lr_initial", "must be > 0")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigurationError("lr_decay_factor", "must lie in (0, 1)")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(name, "must lie in [0, 1)")
        if self.weight_decay_l2 < 0:
            raise ConfigurationError("weight_decay_l2", "must be >= 0")

    @property
    def uses_unlabelled(self):
        return self.variant != "base"


@dataclass
class EpochRecord:
    epoch: int
    supervised: float
    consensus: Optional[float]
    prior: Optional[float]
    reconstruction: Optional[float]
    total: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = math.inf

    def append(self, record):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(record)

    @property
    def lrs(self):
        return [r.lr for r in self.records]

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` once the monitored loss has failed to
    improve by more than ``threshold`` for ``patience`` consecutive epochs."""

    def __init__(self, lr, factor=0.1, patience=25, threshold=1e-5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss):
        """Feed one epoch's loss; returns the learning rate for the next epoch."""
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def initialize_weights(model: nn.Module, seed: int = 0):
    """He-normal conv kernels (variance 2 / fan_in), zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def make_optimizer(model: nn.Module, config: TrainConfig):
    # torch adds wd * w to the gradient; an L2 term lam * sum(w**2) has gradient 2 * lam * w
    weights = [p for n, p in model.named_parameters() if p.ndim > 1]
    biases = [p for n, p in model.named_parameters() if p.ndim <= 1]
    return torch.optim.Adam(
        [{"params": weights, "weight_decay": 2.0 * config.weight_decay_l2},
         {"params": biases, "weight_decay": 0.0}],
        lr=config.lr_initial, betas=(config.adam_beta1, config.adam_beta2))


def _to_nchw(x):
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if x.ndim == 3:  # (B, H, W) masks
        return x.unsqueeze(1)
    return x.permute(0, 3, 1, 2).contiguous()


def _check_finite(components):
    for name, value in components.items():
        if value is not None and not torch.isfinite(value).all():
            raise TrainingError(f"non-finite {name} loss; aborting training")


def training_losses(model: RSNet, x_l, y_l, x_u, variant, prior=None, class_weights=(1.0, 1.0),
                    perturb_config=None, generator=None, supervised=True):
    """Loss components of one step on channels-first batches.

    The consensus target is the main decoder's output on the clean latent map,
    computed without gradient so unlabelled data never trains the main decoder.
    """
    comps = {"supervised": None, "consensus": None, "prior": None, "reconstruction": None}
    if supervised:
        y_main, _ = model(x_l)
        comps["supervised"] = L.supervised_loss(y_main, y_l, class_weights)
    if variant in ("cons", "full"):
        stem_u, skips_u = model.encode(x_u)
        with torch.no_grad():
            target = model.decode_main(stem_u, skips_u)
        z_tilde = perturb_latent(skips_u[-1], perturb_config, generator, channel_dim=1)
        y_aux, x_hat = model.decode_aux(z_tilde)
        comps["consensus"] = L.consensus_loss(target, y_aux)
        if variant == "full":
            comps["prior"] = L.prior_loss(y_aux, prior)
            comps["reconstruction"] = L.reconstruction_loss(x_hat, x_u)
    return comps


def train_step(model, optimizer, x_l, y_l, x_u, config: TrainConfig, prior=None, class_weights=(1.0, 1.0),
               generator=None, supervised=True):
    model.train()
    comps = training_losses(model, x_l, y_l, x_u, config.variant, prior, class_weights,
                            config.perturb, generator, supervised)
    _check_finite(comps)
    w = config.loss_weights
    total = L.total_loss(comps["supervised"], comps["consensus"], comps["prior"], comps["reconstruction"], w)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    out = {k: (float(v.detach()) if v is not None else None) for k, v in comps.items()}
    out["total"] = float(total.detach())
    return out


@contextlib.contextmanager
def deterministic_mode():
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def fit(model: RSNet, split: DatasetSplit, prior: ClassPrior, config: TrainConfig,
        class_weights=None, checkpoint_dir=None, init=True):
    """Train ``model`` in place; returns it with the best-training-loss weights and the history."""
    if not split.labelled:
        raise ConfigurationError("split", "no labelled training tiles")
    if config.uses_unlabelled and not split.unlabelled:
        raise ConfigurationError("split", f"variant {config.variant!r} needs unlabelled tiles")
    if config.uses_unlabelled and model.aux_decoder is None:
        raise ConfigurationError("with_aux", f"variant {config.variant!r} needs an auxiliary decoder")

    x_lab, y_lab = split.labelled_arrays()
    x_lab, y_lab = _to_nchw(x_lab), _to_nchw(y_lab)
    x_unl = _to_nchw(split.unlabelled_array()) if config.uses_unlabelled else None
    if class_weights is None:
        class_weights = L.class_weights_from_masks(t.mask for t in split.labelled)

    with deterministic_mode():
        torch.manual_seed(config.seed)
        if init:
            initialize_weights(model, config.seed)
        optimizer = make_optimizer(model, config)
        schedule = PlateauSchedule(config.lr_initial, config.lr_decay_factor,
                                   config.plateau_patience_epochs, config.plateau_threshold)
        batch_rng = np.random.default_rng(config.seed)
        perturb_gen = torch.Generator().manual_seed(int(config.seed) * 1_000_003 + int(config.perturb.seed))
        history = TrainHistory()
        best_state = copy.deepcopy(model.state_dict())
        n_lab = x_lab.shape[0]

        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            lr = schedule.lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = batch_rng.permutation(n_lab)
            sums = {}
            steps = 0
            for b in range(0, n_lab, config.batch_labelled):
                idx = order[b:b + config.batch_labelled]
                xb_u = None
                if x_unl is not None:
                    xb_u = x_unl[batch_rng.integers(0, x_unl.shape[0], size=config.batch_unlabelled)]
                step = train_step(model, optimizer, x_lab[idx], y_lab[idx], xb_u, config, prior,
                                  class_weights, perturb_gen)
                for k, v in step.items():
                    if v is not None:
                        sums[k] = sums.get(k, 0.0) + v
                steps += 1
            means = {k: v / steps for k, v in sums.items()}
            record = EpochRecord(epoch, means["supervised"], means.get("consensus"), means.get("prior"),
                                 means.get("reconstruction"), means["total"], lr, time.perf_counter() - start)
            history.append(record)
            if record.total < history.best_loss:
                history.best_loss = record.total
                history.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            schedule.step(record.total)
            logger.debug("epoch %d total %.5f lr %.1e", epoch, record.total, lr)

    final_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        extra = {"variant": config.variant, "best_epoch": history.best_epoch}
        save_checkpoint(model, checkpoint_dir / "best.pt", extra)
        final = copy.deepcopy(model)
        final.load_state_dict(final_state)
        save_checkpoint(final, checkpoint_dir / "final.pt", extra)
        history.to_jsonl(checkpoint_dir / "history.jsonl")
    return model, history


@torch.no_grad()
def predict_proba(model: RSNet, images, batch_size=8) -> np.ndarray:
    """Main-decoder aggregate scores, shape (N, H, W)."""
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    out = []
    for b in range(0, images.shape[0], batch_size):
        y, _ = model(_to_nchw(images[b:b + batch_size]))
        out.append(y[:, 0].numpy())
    return np.concatenate(out, axis=0)


def evaluate_checkpoint(model: RSNet, tiles, variant="", setup="", threshold=0.5, batch_size=8):
    """Score the main decoder on held-out labelled tiles; returns (counts, metrics row)."""
    tiles = list(tiles)
    if not tiles:
        raise InputError("held-out set is empty")
    images = np.stack([t.image for t in tiles])
    probs = predict_proba(model, images, batch_size)
    counts = ConfusionCounts(2)
    for p, t in zip(probs, tiles):
        counts = accumulate(counts, binarize(p, threshold), t.mask)
    return counts, metrics_row(counts, variant, setup)

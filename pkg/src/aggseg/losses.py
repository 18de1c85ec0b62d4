"""Loss terms of the semi-supervised objective.

Class-indexed quantities (weights, proportions, priors) use the order
``(aggregate, suspension)``. Probability maps hold the aggregate score ``s`` in a
single channel; suspension is ``1 - s``. Hard label maps store aggregate as 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .exceptions import ConfigurationError, InputError

CLASS_NAMES = ("aggregate", "suspension")
SIGMA_FLOOR = 1e-3


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(name, f"loss weight must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class ClassPrior:
    """Mean and (floored) standard deviation of per-image class proportions."""

    mu: Sequence[float]
    sigma: Sequence[float]
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        self.mu = tuple(float(v) for v in self.mu)
        self.sigma = tuple(float(v) for v in self.sigma)
        if len(self.mu) != len(self.sigma) or len(self.mu) < 2:
            raise ConfigurationError("mu", "mu and sigma need one entry per class (>= 2)")
        if abs(sum(self.mu) - 1.0) > 1e-6:
            raise ConfigurationError("mu", f"class proportions must sum to 1, got {sum(self.mu)}")
        if min(self.sigma) < self.sigma_floor:
            raise ConfigurationError("sigma", f"sigma {self.sigma} below floor {self.sigma_floor}")

    @property
    def num_classes(self):
        return len(self.mu)

    @classmethod
    def from_moments(cls, mu, sigma, sigma_floor=SIGMA_FLOOR):
        """Build a prior, lifting any sigma below the floor up to it."""
        return cls(mu, [max(float(s), sigma_floor) for s in sigma], sigma_floor)


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise InputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def class_weights_from_masks(masks) -> tuple:
    """Inverse-frequency class weights ``(aggregate, suspension)`` rescaled to mean 1."""
    total = agg = 0
    for m in masks:
        m = np.asarray(m)
        total += m.size
        agg += int(np.count_nonzero(m))
    if total == 0:
        raise InputError("cannot derive class weights from empty masks")
    freq = np.array([agg, total - agg], dtype=np.float64) / total
    # an absent class would get an infinite weight; it never occurs in the loss anyway
    freq = np.maximum(freq, 1.0 / total)
    w = 1.0 / freq
    return tuple(float(v) for v in w / w.mean())


def supervised_loss(pred, ref, class_weights=(1.0, 1.0)):
    """Weighted MSE: mean over pixels of ``w(ref) * (pred - ref)**2``."""
    ref = torch.as_tensor(ref, dtype=pred.dtype, device=pred.device)
    _check_same_shape(pred, ref, "supervised_loss")
    w_agg, w_susp = (float(w) for w in class_weights)
    if w_agg <= 0 or w_susp <= 0:
        raise InputError(f"class weights must be positive, got {class_weights}")
    weight = torch.where(ref > 0.5, w_agg, w_susp).to(pred.dtype)
    return (weight * (pred - ref) ** 2).mean()


def consensus_loss(pred_main, pred_aux):
    """MSE between main and auxiliary predictions; the main map is a fixed target."""
    _check_same_shape(pred_main, pred_aux, "consensus_loss")
    return ((pred_aux - pred_main.detach()) ** 2).mean()


def soft_class_proportions(pred):
    """Per-image soft proportions, shape (batch, 2), columns (aggregate, suspension)."""
    if pred.ndim < 2:
        raise InputError("expected a batched probability map")
    p_agg = pred.reshape(pred.shape[0], -1).mean(dim=1)
    return torch.stack([p_agg, 1.0 - p_agg], dim=1)


def prior_loss(pred_aux, prior: ClassPrior):
    """Normalised squared deviation of predicted proportions from the prior, batch-averaged."""
    p = soft_class_proportions(pred_aux)
    if p.shape[1] != prior.num_classes:
        raise InputError(f"prior has {prior.num_classes} classes, prediction has {p.shape[1]}")
    mu = torch.tensor(prior.mu, dtype=p.dtype, device=p.device)
    sigma = torch.tensor(prior.sigma, dtype=p.dtype, device=p.device)
    per_image = (((p - mu) / (2.0 * sigma)) ** 2).mean(dim=1)
    return per_image.mean()


def reconstruction_loss(x_hat, x):
    x = torch.as_tensor(x, dtype=x_hat.dtype, device=x_hat.device)
    _check_same_shape(x_hat, x, "reconstruction_loss")
    return ((x_hat - x) ** 2).mean()


def total_loss(l_sup, l_cons=None, l_prior=None, l_ae=None, weights: Optional[LossWeights] = None):
    """``l_sup + w1*l_cons + w2*l_prior + w3*l_ae``; ``None`` terms are left out."""
    weights = weights or LossWeights()
    terms = [(l_sup, 1.0, "supervised"), (l_cons, weights.w1, "consensus"),
             (l_prior, weights.w2, "prior"), (l_ae, weights.w3, "reconstruction")]
    total = 0.0
    for value, w, name in terms:
        if value is None:
            continue
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not np.isfinite(v) or v < 0:
            raise InputError(f"{name} loss must be finite and >= 0, got {v}")
        total = total + w * value
    return total

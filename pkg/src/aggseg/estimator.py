"""scikit-learn style wrapper around model construction, training and prediction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import DatasetSplit, LabelledTile, UnlabelledTile, binarize, compute_class_prior
from .exceptions import InputError
from .losses import LossWeights
from .metrics import ConfusionCounts, accumulate, aggregate_metrics
from .model import DEFAULT_BLOCK_DEPTHS, ArchConfig, build_model
from .perturb import PerturbConfig
from .trainer import TrainConfig, fit, predict_proba


def check_images(X, name="X") -> np.ndarray:
    """Validate a stack of square RGB tiles, (N, H, W, 3) in [0, 1]; returns float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise InputError(f"{name} must have shape (N, S, S, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise InputError(f"{name} is empty")
    if not np.isfinite(X).all() or X.min() < 0 or X.max() > 1:
        raise InputError(f"{name} values must be finite and in [0, 1]")
    return X


def check_masks(y, X) -> np.ndarray:
    """Validate binary masks matching ``X`` spatially; returns uint8."""
    y = np.asarray(y)
    if y.shape != X.shape[:3]:
        raise InputError(f"masks must have shape {X.shape[:3]}, got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise InputError("masks must contain only 0 and 1")
    return y.astype(np.uint8)


class SemiSupervisedSegmenter(ClassifierMixin, BaseEstimator):
    """Binary aggregate/suspension segmenter.

    ``fit(X, y, X_unlabelled=None)`` trains on labelled tiles and, for the
    ``cons`` and ``full`` variants, on unlabelled tiles too. ``predict``
    returns per-pixel labels (1 = aggregate); ``score`` is the mean F1 in percent.
    """

    def __init__(self, variant="full", epochs=50, block_depths=DEFAULT_BLOCK_DEPTHS, norm="group",
                 batch_labelled=4, batch_unlabelled=4, lr_initial=1e-3, weight_decay_l2=1e-5,
                 w1=1.0, w2=1.0, w3=1.0, noise_range=(-0.3, 0.3), drop_threshold_range=(0.6, 0.9),
                 threshold=0.5, seed=0):
        self.variant = variant
        self.epochs = epochs
        self.block_depths = block_depths
        self.norm = norm
        self.batch_labelled = batch_labelled
        self.batch_unlabelled = batch_unlabelled
        self.lr_initial = lr_initial
        self.weight_decay_l2 = weight_decay_l2
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.noise_range = noise_range
        self.drop_threshold_range = drop_threshold_range
        self.threshold = threshold
        self.seed = seed

    def _train_config(self):
        return TrainConfig(
            variant=self.variant, epochs=self.epochs, batch_labelled=self.batch_labelled,
            batch_unlabelled=self.batch_unlabelled, lr_initial=self.lr_initial,
            weight_decay_l2=self.weight_decay_l2, loss_weights=LossWeights(self.w1, self.w2, self.w3),
            perturb=PerturbConfig(tuple(self.noise_range), tuple(self.drop_threshold_range)), seed=self.seed)

    def fit(self, X, y, X_unlabelled=None):
        X = check_images(X)
        y = check_masks(y, X)
        config = self._train_config()
        unlabelled = []
        if X_unlabelled is not None:
            X_unlabelled = check_images(X_unlabelled, "X_unlabelled")
            if X_unlabelled.shape[1:] != X.shape[1:]:
                raise InputError("X_unlabelled tiles must match X in size")
            unlabelled = [UnlabelledTile(img, "u", f"u_{i}") for i, img in enumerate(X_unlabelled)]
        split = DatasetSplit([LabelledTile(img, m, "p", f"p_{i}") for i, (img, m) in enumerate(zip(X, y))],
                             unlabelled, X.shape[1])
        arch = ArchConfig(input_size=X.shape[1], block_depths=tuple(self.block_depths),
                          with_aux=config.uses_unlabelled, norm=self.norm)
        self.prior_ = compute_class_prior(list(y))
        self.model_, self.history_ = fit(build_model(arch), split, self.prior_, config)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        """Aggregate probability per pixel, shape (N, H, W)."""
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_images(X))

    def predict(self, X):
        return binarize(self.predict_proba(X), self.threshold)

    def score(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        counts = accumulate(ConfusionCounts(2), self.predict(X), y)
        return aggregate_metrics(counts)[1]

"""Semi-supervised segmentation of aggregate particles in concrete cross-sections."""

from .blindspot import BlindSpotModel, bias_report, blind_spot_probability, simulate_blind_spot
from .config import ExperimentConfig
from .data import DatasetSplit, SynthConfig, compute_class_prior, generate_synthetic, load_dataset, select_training_subset
from .estimator import SemiSupervisedSegmenter
from .exceptions import (AggSegError, CapabilityError, ConfigurationError, DatasetError, GenerationError, InputError,
                         TrainingError)
from .losses import ClassPrior, LossWeights
from .metrics import ConfusionCounts, accumulate, aggregate_metrics, class_metrics
from .model import ArchConfig, RSNet, build_model, count_parameters, forward_aux, forward_main, load_checkpoint
from .perturb import PerturbConfig, perturb_latent
from .trainer import TrainConfig, evaluate_checkpoint, fit, predict_proba

__version__ = "0.1.0"

"""Latent-space perturbations fed to the auxiliary decoder: F(z) = drop(noise(z))."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch

from .exceptions import ConfigurationError


@dataclass
class PerturbConfig:
    noise_range: Tuple[float, float] = (-0.3, 0.3)
    drop_threshold_range: Tuple[float, float] = (0.6, 0.9)
    seed: int = 0

    def __post_init__(self):
        self.noise_range = tuple(float(v) for v in self.noise_range)
        self.drop_threshold_range = tuple(float(v) for v in self.drop_threshold_range)
        lo, hi = self.noise_range
        if lo > hi or abs(lo + hi) > 1e-12:
            raise ConfigurationError("noise_range", f"{self.noise_range} must be symmetric about 0")
        lo, hi = self.drop_threshold_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError("drop_threshold_range", f"{self.drop_threshold_range} must lie in (0, 1]")

    def make_generator(self):
        return torch.Generator().manual_seed(int(self.seed))


def _uniform(shape, low, high, generator, like):
    u = torch.rand(shape, generator=generator, dtype=like.dtype)
    return (low + (high - low) * u).to(like.device)


def noise_perturb(z, generator=None, noise_range=(-0.3, 0.3)):
    """Multiplicative uniform noise: ``z * N + z`` with ``N ~ U(noise_range)`` elementwise."""
    noise = _uniform(z.shape, noise_range[0], noise_range[1], generator, z)
    return z * noise + z


def drop_perturb(z, generator=None, threshold_range=(0.6, 0.9), gamma=None, channel_dim=-1):
    """Zero the strongest activations of every channel.

    Each channel of each sample is divided by its maximum absolute value; entries whose
    normalised value exceeds ``gamma`` (drawn once per call from ``threshold_range``
    unless given) are set to 0. All-zero channels pass through unchanged.
    ``channel_dim`` is -1 for channels-last tensors and 1 for channels-first.
    """
    if gamma is None:
        gamma = float(_uniform((), threshold_range[0], threshold_range[1], generator, z))
    channel_dim = channel_dim % z.ndim
    spatial = [d for d in range(1, z.ndim) if d != channel_dim]
    scale = z.detach().abs().amax(dim=spatial, keepdim=True)
    normalised = z.detach() / torch.where(scale > 0, scale, torch.ones_like(scale))
    keep = ~(normalised > gamma)
    return z * keep


def perturb_latent(z, config: PerturbConfig = None, generator=None, channel_dim=-1):
    """Noise injection followed by feature drop. Never modifies ``z`` in place."""
    config = config or PerturbConfig()
    if generator is None:
        generator = config.make_generator()
    noisy = noise_perturb(z, generator, config.noise_range)
    return drop_perturb(noisy, generator, config.drop_threshold_range, channel_dim=channel_dim)

"""Residual depthwise-separable encoder (RSNet) with a main and an auxiliary decoder.

The network modules work on channels-first tensors, as torch does. The
functional wrappers :func:`forward_main` and :func:`forward_aux` take and
return channels-last tensors ``(batch, H, W, C)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import CapabilityError, ConfigurationError, InputError

# Calibrated so that encoder + main decoder hold ~1.9M learnable scalars.
DEFAULT_BLOCK_DEPTHS = (24, 48, 96, 176, 288)

SCOPES = ("encoder", "main_decoder", "aux_decoder", "inference", "all")
NORMS = ("group", "batch", "none")


def make_norm(kind, channels):
    """Normalisation applied after a conv and before its ReLU."""
    if kind == "group":
        groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
        return nn.GroupNorm(groups, channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


@dataclass
class ArchConfig:
    input_size: int = 448
    input_channels: int = 3
    block_depths: Sequence[int] = field(default=DEFAULT_BLOCK_DEPTHS)
    num_classes: int = 2
    with_aux: bool = True
    norm: str = "group"

    def __post_init__(self):
        self.block_depths = tuple(int(d) for d in self.block_depths)
        self.validate()

    def validate(self):
        if len(self.block_depths) != 5:
            raise ConfigurationError("block_depths", f"expected 5 entries, got {len(self.block_depths)}")
        if any(d < 1 for d in self.block_depths):
            raise ConfigurationError("block_depths", "all depths must be >= 1")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigurationError("input_size", f"{self.input_size} is not divisible by 16")
        if self.input_channels < 1:
            raise ConfigurationError("input_channels", "must be >= 1")
        if self.norm not in NORMS:
            raise ConfigurationError("norm", f"{self.norm!r} not in {NORMS}")
        if self.num_classes != 2:
            raise ConfigurationError("num_classes", "only the binary task (2 classes) is supported")

    @property
    def out_channels(self):
        # binary task -> one sigmoid channel
        return 1 if self.num_classes == 2 else self.num_classes

    def to_dict(self):
        d = asdict(self)
        d["block_depths"] = list(self.block_depths)
        return d


class ConvNormReLU(nn.Module):
    def __init__(self, channels_in, channels_out, kernel_size, stride=1, norm="group"):
        super().__init__()
        self.conv = nn.Conv2d(channels_in, channels_out, kernel_size, stride=stride, padding=kernel_size // 2)
        self.norm = make_norm(norm, channels_out)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class SeparableConv2d(nn.Module):
    """3x3 depthwise conv followed by a 1x1 pointwise conv; norm and ReLU after the pointwise only."""

    def __init__(self, channels_in, channels_out, kernel_size=3, norm="group"):
        super().__init__()
        self.depthwise = nn.Conv2d(channels_in, channels_in, kernel_size,
                                   padding=kernel_size // 2, groups=channels_in)
        self.pointwise = nn.Conv2d(channels_in, channels_out, 1)
        self.norm = make_norm(norm, channels_out)

    def forward(self, x):
        return F.relu(self.norm(self.pointwise(self.depthwise(x))))


class EncoderBlock(nn.Module):
    """Residual pair: strided 1x1 conv  +  (3x3 conv -> separable conv -> 2x2 max-pool)."""

    def __init__(self, channels_in, channels_out, norm="group"):
        super().__init__()
        self.shortcut = ConvNormReLU(channels_in, channels_out, 1, stride=2, norm=norm)
        self.conv = ConvNormReLU(channels_in, channels_out, 3, norm=norm)
        self.sepconv = SeparableConv2d(channels_out, channels_out, norm=norm)

    def forward(self, x):
        return self.shortcut(x) + F.max_pool2d(self.sepconv(self.conv(x)), 2, 2)


class DecoderBlock(nn.Module):
    """Residual pair: (2x upsample -> 1x1 conv)  +  (3x3 conv -> separable conv -> 2x upsample)."""

    def __init__(self, channels_in, channels_out, norm="group"):
        super().__init__()
        self.shortcut = ConvNormReLU(channels_in, channels_out, 1, norm=norm)
        self.conv = ConvNormReLU(channels_in, channels_out, 3, norm=norm)
        self.sepconv = SeparableConv2d(channels_out, channels_out, norm=norm)

    def forward(self, x):
        short = self.shortcut(F.interpolate(x, scale_factor=2, mode="nearest"))
        long = F.interpolate(self.sepconv(self.conv(x)), scale_factor=2, mode="nearest")
        return short + long


class Encoder(nn.Module):
    def __init__(self, input_channels, depths, norm="group"):
        super().__init__()
        self.stem = ConvNormReLU(input_channels, depths[0], 3, norm=norm)
        self.blocks = nn.ModuleList(EncoderBlock(depths[k], depths[k + 1], norm) for k in range(4))

    def forward(self, x):
        """Return the stem features and the four block outputs (scales 1/2 .. 1/16)."""
        stem = self.stem(x)
        skips = []
        h = stem
        for block in self.blocks:
            h = block(h)
            skips.append(h)
        return stem, skips


class Decoder(nn.Module):
    """Four decoder blocks, a 3x3 conv + ReLU and 1x1 sigmoid head(s).

    With ``use_skips`` the output of every decoder block is concatenated with the
    same-resolution encoder feature map (encoder blocks 3..1, then the stem) before
    the next layer.
    """

    def __init__(self, depths, out_channels, use_skips=True, reconstruct_channels=0, norm="group"):
        super().__init__()
        self.use_skips = use_skips
        mult = 2 if use_skips else 1
        self.blocks = nn.ModuleList()
        channels_in = depths[4]
        for k in (3, 2, 1, 0):
            self.blocks.append(DecoderBlock(channels_in, depths[k], norm))
            channels_in = mult * depths[k]
        self.conv = ConvNormReLU(channels_in, depths[0], 3, norm=norm)
        self.seg_head = nn.Conv2d(depths[0], out_channels, 1)
        self.rec_head = nn.Conv2d(depths[0], reconstruct_channels, 1) if reconstruct_channels else None

    def forward(self, z, stem=None, skips=None):
        if self.use_skips:
            if stem is None or skips is None:
                raise InputError("decoder with skip connections needs stem and skip features")
            same_res = [skips[2], skips[1], skips[0], stem]
        h = z
        for k, block in enumerate(self.blocks):
            h = block(h)
            if self.use_skips:
                h = torch.cat([h, same_res[k]], dim=1)
        h = self.conv(h)
        seg = torch.sigmoid(self.seg_head(h))
        rec = torch.sigmoid(self.rec_head(h)) if self.rec_head is not None else None
        return seg, rec


class RSNet(nn.Module):
    """Shared encoder, skip-connected main decoder, optional auxiliary decoder.

    ``forward`` runs encoder and main decoder on a channels-first batch and
    returns ``(y_main, (stem, skips))``; ``skips[-1]`` is the latent map z.
    """

    def __init__(self, config: ArchConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.block_depths
        self.encoder = Encoder(config.input_channels, d, config.norm)
        self.main_decoder = Decoder(d, config.out_channels, use_skips=True, norm=config.norm)
        self.aux_decoder = (
            Decoder(d, config.out_channels, use_skips=False, reconstruct_channels=config.input_channels,
                    norm=config.norm)
            if config.with_aux else None
        )

    def encode(self, x):
        return self.encoder(x)

    def decode_main(self, stem, skips):
        seg, _ = self.main_decoder(skips[-1], stem, skips)
        return seg

    def decode_aux(self, z):
        if self.aux_decoder is None:
            raise CapabilityError("model was built without an auxiliary decoder")
        return self.aux_decoder(z)

    def forward(self, x):
        stem, skips = self.encode(x)
        return self.decode_main(stem, skips), (stem, skips)


@dataclass
class LatentFeatureMap:
    """Encoder output in channels-last layout: z plus the skip features."""

    z: torch.Tensor
    skips: List[torch.Tensor]
    stem: Optional[torch.Tensor] = None

    def replace(self, z):
        return LatentFeatureMap(z=z, skips=self.skips, stem=self.stem)


@dataclass
class ForwardBundle:
    y_main: torch.Tensor
    z: LatentFeatureMap
    y_aux: Optional[torch.Tensor] = None
    x_hat: Optional[torch.Tensor] = None


def _nhwc(t):
    return t.permute(0, 2, 3, 1)


def _nchw(t):
    return t.permute(0, 3, 1, 2)


def build_model(config: ArchConfig = None, **kwargs) -> RSNet:
    if config is None:
        config = ArchConfig(**kwargs)
    return RSNet(config)


def _as_batch(model, x):
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if not torch.is_tensor(x):
        raise InputError(f"expected an array or tensor, got {type(x).__name__}")
    param = next(model.parameters())
    x = x.to(dtype=param.dtype, device=param.device)
    cfg = model.config
    expected = (cfg.input_size, cfg.input_size, cfg.input_channels)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise InputError(f"expected input of shape (batch, {expected[0]}, {expected[1]}, {expected[2]}), "
                         f"got {tuple(x.shape)}")
    return x


def forward_main(model: RSNet, x) -> Tuple[torch.Tensor, LatentFeatureMap]:
    """Main-decoder prediction (batch, H, W, 1) and the latent features for reuse."""
    x = _as_batch(model, x)
    seg, (stem, skips) = model(_nchw(x))
    latent = LatentFeatureMap(z=_nhwc(skips[-1]), skips=[_nhwc(s) for s in skips], stem=_nhwc(stem))
    return _nhwc(seg), latent


def forward_aux(model: RSNet, z_perturbed) -> Tuple[torch.Tensor, torch.Tensor]:
    """Auxiliary prediction and image reconstruction from a (perturbed) latent map."""
    if model.aux_decoder is None:
        raise CapabilityError("model was built without an auxiliary decoder")
    if isinstance(z_perturbed, LatentFeatureMap):
        z_perturbed = z_perturbed.z
    cfg = model.config
    side = cfg.input_size // 16
    if z_perturbed.ndim != 4 or tuple(z_perturbed.shape[1:]) != (side, side, cfg.block_depths[4]):
        raise InputError(f"latent shape {tuple(z_perturbed.shape)} does not match the encoder output")
    seg, rec = model.decode_aux(_nchw(z_perturbed))
    return _nhwc(seg), _nhwc(rec)


def _scope_modules(model, scope):
    if scope == "encoder":
        return [model.encoder]
    if scope == "main_decoder":
        return [model.main_decoder]
    if scope == "aux_decoder":
        return [model.aux_decoder] if model.aux_decoder is not None else []
    if scope == "inference":
        return [model.encoder, model.main_decoder]
    if scope == "all":
        return [model]
    raise InputError(f"unknown scope {scope!r}; choose from {SCOPES}")


def count_parameters(model: RSNet, scope: str = "inference") -> int:
    return sum(p.numel() for m in _scope_modules(model, scope) for p in m.parameters() if p.requires_grad)


def parameter_counts(model: RSNet) -> dict:
    return {scope: count_parameters(model, scope) for scope in SCOPES}


def save_checkpoint(model: RSNet, path, extra: dict = None) -> Path:
    """Write ``path`` (parameter store) and ``path.manifest.json`` (config + counts)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    manifest = {"arch": model.config.to_dict(), "parameter_counts": parameter_counts(model)}
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def load_checkpoint(path) -> RSNet:
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text())
    model = build_model(ArchConfig(**manifest["arch"]))
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model

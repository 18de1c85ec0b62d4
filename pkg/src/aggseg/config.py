"""Flat ``key = value`` experiment configuration.

Keys are namespaced with a dot: ``train.*`` (TrainConfig), ``arch.*``,
``perturb.*``, ``weights.*``, ``synth.*``, ``data.*``, ``predict.*``,
``blindspot.*``. ``seed`` seeds training, subset selection, generation and the
Monte Carlo oracle. Lists are comma separated. Lines starting with ``#`` are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .exceptions import ConfigurationError
from .losses import LossWeights
from .model import ArchConfig
from .perturb import PerturbConfig
from .trainer import TrainConfig

_SECTIONS = {
    "train": TrainConfig,
    "arch": ArchConfig,
    "perturb": PerturbConfig,
    "weights": LossWeights,
    "synth": SynthConfig,
}

DATA_DEFAULTS = {"root": "", "k": 0, "checkpoint": "", "threshold": 0.5, "setup": ""}
PREDICT_DEFAULTS = {"images": "", "masks": ""}
BLINDSPOT_DEFAULTS = {"priors": (0.362, 0.638), "error_rate": 0.2, "trials": 1_000_000,
                      "class_names": ("aggregate", "suspension")}

# set from the top-level seed, not per section
_SEEDED = {("train", "seed"), ("synth", "seed")}
_NESTED = {("train", "loss_weights"), ("train", "perturb")}


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(parse_value(part) for part in text.split(",") if part.strip())
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value) + ("," if len(value) == 1 else "")
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigurationError(pair, "override must look like KEY=VALUE")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


@dataclass
class ExperimentConfig:
    seed: int = 0
    sections: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    predict: dict = field(default_factory=lambda: dict(PREDICT_DEFAULTS))
    blindspot: dict = field(default_factory=lambda: dict(BLINDSPOT_DEFAULTS))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        cfg = cls()
        per_section = {name: {} for name in _SECTIONS}
        for key, value in mapping.items():
            if key == "seed":
                cfg.seed = int(value)
                continue
            if "." not in key:
                raise ConfigurationError(key, "unknown key (expected section.name)")
            section, name = key.split(".", 1)
            if section in _SECTIONS:
                allowed = {f.name for f in fields(_SECTIONS[section])} - {n for s, n in _SEEDED | _NESTED if s == section}
                if name not in allowed:
                    raise ConfigurationError(key, f"unknown key for section {section!r}")
                per_section[section][name] = value
            elif section in ("data", "predict", "blindspot"):
                target = getattr(cfg, section)
                if name not in target:
                    raise ConfigurationError(key, f"unknown key for section {section!r}")
                target[name] = value
            else:
                raise ConfigurationError(key, f"unknown section {section!r}")
        try:
            perturb = PerturbConfig(**per_section["perturb"])
            weights = LossWeights(**per_section["weights"])
            cfg.sections = {
                "perturb": perturb,
                "weights": weights,
                "arch": ArchConfig(**per_section["arch"]),
                "synth": SynthConfig(seed=cfg.seed, **per_section["synth"]),
                "train": TrainConfig(seed=cfg.seed, loss_weights=weights, perturb=perturb, **per_section["train"]),
            }
        except TypeError as err:
            raise ConfigurationError("config", str(err)) from None
        return cfg

    @classmethod
    def load(cls, path=None, overrides=None) -> "ExperimentConfig":
        mapping = parse_text(Path(path).read_text()) if path else {}
        mapping.update(overrides or {})
        return cls.from_mapping(mapping)

    @property
    def train(self) -> TrainConfig:
        return self.sections["train"]

    @property
    def arch(self) -> ArchConfig:
        return self.sections["arch"]

    @property
    def synth(self) -> SynthConfig:
        return self.sections["synth"]

    def to_mapping(self) -> dict:
        out = {"seed": self.seed}
        for section, obj in self.sections.items():
            for f in fields(obj):
                if (section, f.name) in _SEEDED | _NESTED:
                    continue
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        for section in ("data", "predict", "blindspot"):
            for name, value in getattr(self, section).items():
                out[f"{section}.{name}"] = value
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.to_mapping().items()))

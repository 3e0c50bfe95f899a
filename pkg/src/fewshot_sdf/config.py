"""Experiment configuration: one JSON document, strict keys, dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoder_meta import BaseConfig, DecoderConfig, MetaConfig
from .encoder import DESK_CHANNELS, PAPER_CHANNELS, EncoderConfig, feature_dim
from .geometry import DatasetConfig


@dataclass(frozen=True)
class EncoderSection:
    resolution: int = 32
    channels: tuple[int, ...] = DESK_CHANNELS


@dataclass(frozen=True)
class DecoderSection:
    hidden: tuple[int, ...] = (64, 64, 64, 64)


@dataclass(frozen=True)
class ReconstructSection:
    resolution: int = 128


@dataclass(frozen=True)
class EvalSection:
    n_volume_samples: int = 100_000
    n_surface_samples: int = 100_000
    seed: int = 0
    split: str = "test"


@dataclass(frozen=True)
class AblationSection:
    no_meta: bool = False
    no_decoder_pretrain: bool = False
    first_order: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    base: BaseConfig = field(default_factory=lambda: BaseConfig(epochs=20, lr=1e-3, batch=8, points_per_shape=512))
    meta: MetaConfig = field(
        default_factory=lambda: MetaConfig(k=5, alpha_init=1e-5, beta=1e-4, alpha_lr=1e-6, batch=4, epochs=30,
                                           outer="adam")
    )
    reconstruct: ReconstructSection = field(default_factory=ReconstructSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self):
        # build the downstream types once so their own checks run
        self.encoder_config()
        if self.reconstruct.resolution < 2:
            raise ValueError("reconstruct.resolution must be >= 2")
        if self.eval.n_volume_samples < 1 or self.eval.n_surface_samples < 1:
            raise ValueError("eval sample counts must be >= 1")
        if self.eval.split not in ("train", "test"):
            raise ValueError("eval.split must be 'train' or 'test'")
        if not 0.0 < self.dataset.split <= 1.0:
            raise ValueError("dataset.split must lie in (0, 1]")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.encoder.resolution, tuple(self.encoder.channels))

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(feature_dim(self.encoder.channels), tuple(self.decoder.hidden))

    def meta_config(self) -> MetaConfig:
        """Meta settings with the ablation flags folded in."""
        second = self.meta.second_order and not self.ablation.first_order
        return dataclasses.replace(self.meta, second_order=second)

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, overrides: list[str]) -> "ExperimentConfig":
        """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)

    def stage_hash(self, stage: str) -> str:
        """Hash of the settings that determine a training stage's output."""
        d = self.to_dict()
        keys = ["seed", "dataset", "encoder", "decoder", "base"]
        if stage == "meta":
            keys += ["meta", "ablation"]
        elif stage != "base":
            raise ValueError(f"unknown stage {stage!r}")
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _to_plain(x):
    if isinstance(x, dict):
        return {k: _to_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_plain(v) for v in x]
    return x


def _build(cls, d, where: str, defaults=None):
    """Instance of ``cls`` from ``d``; keys missing from ``d`` keep the values in ``defaults``."""
    if not isinstance(d, dict):
        raise ValueError(f"config section {where or '<root>'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    defaults = cls() if defaults is None else defaults
    kwargs = {}
    for name, value in d.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}{name}.", current)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ValueError(f"config key {where}{name} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return dataclasses.replace(defaults, **kwargs)


def desk_profile() -> ExperimentConfig:
    return ExperimentConfig()


def paper_profile() -> ExperimentConfig:
    """Full-scale constants (large inputs, long training); far beyond a desk budget."""
    return ExperimentConfig.from_dict(
        {
            "dataset": {"n_points": 3000, "n_samples": 50_000},
            "encoder": {"resolution": 128, "channels": list(PAPER_CHANNELS)},
            "decoder": {"hidden": [256, 256, 256]},
            "base": {"epochs": 50, "lr": 1e-5, "batch": 8, "points_per_shape": 0},
            "meta": {"k": 5, "alpha_init": 1e-6, "beta": 1e-6, "alpha_lr": None, "batch": 4, "epochs": 100,
                     "outer": "adam"},
            "reconstruct": {"resolution": 256},
        }
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def load_config(path=None, profile: str = "desk", overrides: list[str] | None = None) -> ExperimentConfig:
    if path is not None:
        base = ExperimentConfig.load(path)
    else:
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        base = PROFILES[profile]()
    return base.with_overrides(list(overrides or []))

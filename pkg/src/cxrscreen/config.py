"""Pipeline configuration: one declarative tree, CLI flags override fields.

The effective (post-override) config is what every command echoes into its
output artifacts, so any result file names the exact settings that produced
it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .backbone import FEATURE_DIMS
from .errors import InputError, ValidationError
from .evaluate import DEFAULT_BINS, DEFAULT_TARGET_SENSITIVITY
from .head import TrainConfig


@dataclass(frozen=True)
class EvalOptions:
    bins: int = DEFAULT_BINS
    target_sensitivity: float = DEFAULT_TARGET_SENSITIVITY

    def __post_init__(self):
        if self.bins < 1:
            raise ValidationError(f"bins must be >= 1, got {self.bins}")
        if not (0.0 < self.target_sensitivity <= 1.0):
            raise ValidationError(
                f"target_sensitivity must be in (0, 1], got {self.target_sensitivity}"
            )


@dataclass(frozen=True)
class PipelineConfig:
    covid_dir: str = ""
    negative_dir: str = ""
    work_dir: str = "work"
    split_spec_path: str = ""
    models: dict[str, str] = field(default_factory=dict)  # backbone name -> model file
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(seed=0))
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvalOptions = field(default_factory=EvalOptions)

    def __post_init__(self):
        for name in self.models:
            if name not in FEATURE_DIMS:
                raise ValidationError(f"unknown backbone {name!r} in models")

    def echo(self) -> dict:
        return {
            "covid_dir": self.covid_dir,
            "negative_dir": self.negative_dir,
            "work_dir": self.work_dir,
            "split_spec_path": self.split_spec_path,
            "models": dict(self.models),
            "augment": {
                "seed": self.augment.seed,
                "target_count": self.augment.target_count,
                "rotation_max_deg": self.augment.rotation_max_deg,
                "distortion_amplitude_px": self.augment.distortion_amplitude_px,
                "enable_hflip": self.augment.enable_hflip,
            },
            "train": self.train.echo(),
            "evaluate": {
                "bins": self.evaluate.bins,
                "target_sensitivity": self.evaluate.target_sensitivity,
            },
        }


def _section(doc: dict, key: str) -> dict:
    value = doc.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ValidationError(f"config section {key!r} must be a mapping")
    return value


def load_config(path: str | Path | None) -> PipelineConfig:
    """Config file -> PipelineConfig; a missing path gives pure defaults."""
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file {p} is not valid: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"config file {p} must hold a mapping at top level")

    paths = _section(doc, "paths")
    aug = _section(doc, "augment")
    tr = _section(doc, "train")
    ev = _section(doc, "evaluate")
    models = _section(doc, "models")

    try:
        return PipelineConfig(
            covid_dir=str(paths.get("covid_dir", "")),
            negative_dir=str(paths.get("negative_dir", "")),
            work_dir=str(paths.get("work_dir", "work")),
            split_spec_path=str(paths.get("split_spec", "")),
            models={str(k): str(v) for k, v in models.items()},
            augment=AugmentConfig(
                seed=int(aug.get("seed", 0)),
                target_count=int(aug.get("target_count", 496)),
                rotation_max_deg=float(aug.get("rotation_max_deg", 10.0)),
                distortion_amplitude_px=float(aug.get("distortion_amplitude_px", 3.0)),
                enable_hflip=bool(aug.get("enable_hflip", True)),
            ),
            train=TrainConfig(
                epochs=int(tr.get("epochs", 100)),
                batch_size=int(tr.get("batch_size", 20)),
                learning_rate=float(tr.get("learning_rate", 1e-4)),
                beta1=float(tr.get("beta1", 0.9)),
                beta2=float(tr.get("beta2", 0.999)),
                epsilon=float(tr.get("epsilon", 1e-8)),
                shuffle_seed=int(tr.get("shuffle_seed", 0)),
            ),
            evaluate=EvalOptions(
                bins=int(ev.get("bins", DEFAULT_BINS)),
                target_sensitivity=float(
                    ev.get("target_sensitivity", DEFAULT_TARGET_SENSITIVITY)
                ),
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config file {p} has a bad value: {exc}") from exc

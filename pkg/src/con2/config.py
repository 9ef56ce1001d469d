"""Run configuration: one YAML file per run, validated before any work starts."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ._io import canonical_hash
from .dataprep import DatasetSplit, FolderLayout, SyntheticConfig, load_image_folder, make_synthetic_split
from .imageops import ContentAugmentationPolicy, get_context_augmentation
from .trainer import ModelConfig, TrainConfig

ARTIFACT_ROOT_ENV = "CON2_ARTIFACT_ROOT"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"
    path: str | None = None
    layout: FolderLayout = field(default_factory=FolderLayout)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass(frozen=True)
class ScoringSection:
    variant: str = "nnd"
    A: int = 40
    eps: float | str = "auto"
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    out_dir: str = "runs/default"
    figure_format: str = "png"
    export_train_samples: int = 50
    bench_n: tuple[int, ...] = (100, 1000, 10000)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection
    model: ModelConfig
    train: TrainConfig
    scoring: ScoringSection
    eval: EvalSection
    raw: dict = field(default_factory=dict, compare=False)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.raw)

    def dataset_path(self) -> Path | None:
        if self.dataset.path is None:
            return None
        p = Path(self.dataset.path)
        return p if p.is_absolute() else self.base_dir / p

    def run_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        out = Path(self.eval.out_dir)
        if out.is_absolute():
            return out
        return Path(os.environ.get(ARTIFACT_ROOT_ENV, ".")) / out

    def load_dataset(self) -> DatasetSplit:
        if self.dataset.source == "synthetic":
            return make_synthetic_split(self.dataset.synthetic)
        return load_image_folder(self.dataset_path(), self.dataset.layout)


_TUPLE_FIELDS = {"crop_scale", "crop_ratio", "jitter", "betas", "bench_n"}


def _build(cls, data: Any, prefix: str, nested: dict | None = None):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    nested = nested or {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError(f"unknown key '{path}'")
        if key in nested:
            value = _build(nested[key], value, path)
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in '{prefix or 'config'}': {exc}") from exc


SECTIONS = ("dataset", "model", "train", "scoring", "eval")


def parse_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a mapping at the top level")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(f"unknown key '{key}'")
    dataset = _build(
        DatasetSection, data.get("dataset"), "dataset",
        {"layout": FolderLayout, "synthetic": SyntheticConfig},
    )
    model = _build(ModelConfig, data.get("model"), "model")
    train = _build(TrainConfig, data.get("train"), "train", {"content": ContentAugmentationPolicy})
    scoring = _build(ScoringSection, data.get("scoring"), "scoring")
    ev = _build(EvalSection, data.get("eval"), "eval")
    cfg = RunConfig(dataset, model, train, scoring, ev, raw=data, base_dir=base_dir or Path.cwd())
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.dataset.source not in ("synthetic", "folder"):
        raise ConfigError(f"dataset.source must be 'synthetic' or 'folder', got {cfg.dataset.source!r}")
    if cfg.dataset.source == "folder":
        if cfg.dataset.path is None:
            raise ConfigError("dataset.path is required for folder datasets")
        if not cfg.dataset_path().is_dir():
            raise ConfigError(f"dataset.path does not exist: {cfg.dataset_path()}")
    try:
        get_context_augmentation(cfg.train.context)
    except ValueError as exc:
        raise ConfigError(f"train.context: {exc}") from exc
    if cfg.scoring.variant not in ("nnd", "lh"):
        raise ConfigError(f"scoring.variant must be 'nnd' or 'lh', got {cfg.scoring.variant!r}")
    if not isinstance(cfg.scoring.A, int) or cfg.scoring.A < 2 or cfg.scoring.A % 2:
        raise ConfigError(f"scoring.A must be a positive even integer, got {cfg.scoring.A!r}")
    eps = cfg.scoring.eps
    if not (eps == "auto" or (isinstance(eps, (int, float)) and eps >= 0)):
        raise ConfigError(f"scoring.eps must be 'auto' or a non-negative number, got {eps!r}")
    if cfg.eval.figure_format not in ("png", "svg"):
        raise ConfigError("eval.figure_format must be 'png' or 'svg'")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return parse_config(data, base_dir=path.parent.resolve())

"""Run configuration and the data-preparation chain shared by the CLI, the estimator and the desk runs.

A run config is a JSON object with a ``version`` key and optional
``pipeline``, ``arch`` and ``train`` sections; unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import DataError
from .geodata import (PatchConfig, PatchSet, RasterStack, SampleTable, SparseProbMasks, SpatialSplit,
                      extract_patches, filter_rare_classes, make_spatial_split, rasterize_samples)
from .model import ArchConfig
from .training import TrainConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    rare_threshold: float = 0.01
    block: int = 15
    train_frac: float = 0.8
    validation_rect: Optional[Tuple[int, int, int, int]] = None
    split_seed: int = 0
    patch_seed: int = 0
    patches: PatchConfig = field(default_factory=PatchConfig)

    def __post_init__(self):
        if not 0 <= self.rare_threshold < 1:
            raise ValueError("rare_threshold must lie in [0, 1)")
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        _reject_unknown(cls, d, "pipeline")
        if isinstance(d.get("patches"), dict):
            _reject_unknown(PatchConfig, d["patches"], "pipeline.patches")
        try:
            if isinstance(d.get("patches"), dict):
                d["patches"] = PatchConfig(**d["patches"])
            if d.get("validation_rect") is not None:
                d["validation_rect"] = tuple(int(v) for v in d["validation_rect"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise DataError(f"invalid pipeline section: {exc}") from None


def _reject_unknown(cls, d: dict, section: str) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise DataError(f"unknown keys in config section {section!r}: {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    arch: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    def arch_config(self, n_aux: int, n_classes: int) -> ArchConfig:
        """Architecture with the data-dependent channel counts filled in."""
        d = {k: v for k, v in self.arch.items() if k not in ("n_aux_channels", "n_classes")}
        return ArchConfig.from_dict({**d, "n_aux_channels": n_aux, "n_classes": n_classes})

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, "pipeline": self.pipeline.to_dict(), "arch": dict(self.arch),
                "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise DataError(f"unsupported config version {version}")
        unknown = set(d) - {"pipeline", "arch", "train", "data"}
        if unknown:
            raise DataError(f"unknown config sections: {sorted(unknown)}")
        try:
            train = TrainConfig.from_dict(d.get("train", {}))
        except ValueError as exc:
            raise DataError(str(exc)) from None
        arch = dict(d.get("arch", {}))
        try:
            ArchConfig.from_dict({"n_aux_channels": 1, "n_classes": 2, **arch})  # validate early
        except (TypeError, ValueError) as exc:
            raise DataError(f"invalid arch section: {exc}") from None
        return cls(PipelineConfig.from_dict(d.get("pipeline", {})), arch, train)


@dataclass
class PreparedData:
    stack: RasterStack
    samples: SampleTable
    vocabulary: List[str]
    masks: SparseProbMasks
    split: SpatialSplit
    patches: PatchSet


def prepare(stack: RasterStack, samples: SampleTable, cfg: PipelineConfig = PipelineConfig(),
            vocabulary: Optional[List[str]] = None) -> PreparedData:
    """Filter rare classes, rasterize, split and cut training patches from a normalized stack.

    ``vocabulary`` overrides the filtered class list (fine-tuning onto a
    fixed, ordered vocabulary); samples with codes outside it are dropped.
    """
    kept, vocab = filter_rare_classes(samples, cfg.rare_threshold)
    if vocabulary is not None:
        vocab = list(vocabulary)
        kept = samples.subset(np.isin(samples.codes.astype(str), vocab))
        if len(kept) == 0:
            raise DataError("no samples with codes in the given vocabulary")
    grid = (stack.height, stack.width)
    masks = rasterize_samples(kept, grid, vocab)
    split = make_spatial_split(grid, masks, cfg.block, cfg.train_frac, cfg.validation_rect, cfg.split_seed)
    patches = extract_patches(stack, masks, split, cfg.patches, cfg.patch_seed, "train")
    if patches.target_valid.sum() == 0:
        raise DataError("training patches contain no sampled pixels")
    return PreparedData(stack, kept, vocab, masks, split, patches)


def desk_run_config(seed: int = 0, **train_overrides) -> RunConfig:
    """The scaled-down setting used for the synthetic end-to-end runs."""
    patches = PatchConfig(patch=32, max_overlap=0.8, n_patches=96, downscale_frac=0.1, rotate_frac=0.25)
    pipeline = PipelineConfig(split_seed=seed, patch_seed=seed, patches=patches)
    train = TrainConfig(batch_size=8, learning_rate=1e-3, max_epochs=30, patience=15, seed=seed)
    if train_overrides:
        train = replace(train, **train_overrides)
    return RunConfig(pipeline, {"depth": 3, "base_filters": 8, "patch_size": 32}, train)

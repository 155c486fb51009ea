"""Spatially constrained two-stage attention Res-U-Net for lithology mapping from sparse samples."""

__version__ = "0.1.0"

from .exceptions import DataError, NumericError, SCBNetError, ShapeError  # noqa: E402
from .geodata import (PatchConfig, RasterStack, SampleTable, SparseProbMasks, SpatialSplit,  # noqa: E402
                      extract_patches, filter_rare_classes, ingest_rasters, make_spatial_split, rasterize_samples)
from .model import ArchConfig, ModelCheckpoint, build_model, forward, load_checkpoint, save_checkpoint  # noqa: E402
from .losses import DilationSchedule, FocalLossConfig, dilated_fcce, fcce, weighted_accuracy  # noqa: E402
from .training import TrainConfig, TrainHistory, finetune, train  # noqa: E402
from .inference import EnsembleResult, evaluate, mc_predict  # noqa: E402
from .synth import SynthConfig, gen_dataset  # noqa: E402
from .pipeline import PipelineConfig, RunConfig, prepare  # noqa: E402
from .estimator import SCBNetSegmenter  # noqa: E402

__all__ = [
    "ArchConfig", "DataError", "DilationSchedule", "EnsembleResult", "FocalLossConfig", "ModelCheckpoint",
    "NumericError", "PatchConfig", "PipelineConfig", "RasterStack", "RunConfig", "SCBNetError", "SCBNetSegmenter",
    "SampleTable", "ShapeError", "SparseProbMasks", "SpatialSplit", "SynthConfig", "TrainConfig", "TrainHistory",
    "build_model", "dilated_fcce", "evaluate", "extract_patches", "fcce", "filter_rare_classes", "finetune",
    "forward", "gen_dataset", "ingest_rasters", "load_checkpoint", "make_spatial_split", "mc_predict", "prepare",
    "rasterize_samples", "save_checkpoint", "train", "weighted_accuracy",
]

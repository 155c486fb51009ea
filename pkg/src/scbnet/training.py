"""Training loop with early stopping, and fine-tuning onto a new class vocabulary."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, adam_step
from .exceptions import DataError, NumericError, ShapeError
from .geodata import PatchSet, RasterStack, SparseProbMasks, SpatialSplit, epoch_conditioning_holdout
from .inference import predict_once
from .losses import (DilationSchedule, FocalLossConfig, dilated_fcce, inverse_frequency_weights, renormalize,
                     ssim, weighted_accuracy)
from .losses import _dilate_array
from .model import ModelCheckpoint, forward, reinit_head

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("tag", "epoch", "loss", "train_acc", "test_acc", "train_ssim", "test_ssim")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 5e-5
    max_epochs: int = 500
    early_stop_delta: float = 1e-3
    patience: int = 50
    gamma: float = 2.0
    dilation: DilationSchedule = field(default_factory=DilationSchedule)
    holdout_rate: float = 0.5
    seed: int = 0
    eval_every: int = 1
    clip_norm: Optional[float] = 5.0
    class_weights: Union[str, None, Tuple[float, ...]] = "inverse_frequency"
    target_accuracy: Optional[float] = None
    verbose: bool = False

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "max_epochs", "patience", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.early_stop_delta < 0:
            raise ValueError("early_stop_delta must be >= 0")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if not 0 < self.holdout_rate < 1:
            raise ValueError("holdout_rate must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation"] = {"filter_sizes": list(self.dilation.filter_sizes), "weights": list(self.dilation.weights)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "dilation" in d and isinstance(d["dilation"], dict):
            d["dilation"] = DilationSchedule(tuple(d["dilation"]["filter_sizes"]), tuple(d["dilation"]["weights"]))
        if isinstance(d.get("class_weights"), list):
            d["class_weights"] = tuple(d["class_weights"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


class TrainHistory:
    """Per-epoch metrics. Wall-clock times are kept apart from the reproducible columns."""

    def __init__(self, rows: Optional[List[dict]] = None, times: Optional[List[float]] = None):
        self.rows: List[dict] = list(rows or [])
        self.times: List[float] = list(times or [])

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: dict, seconds: float) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("history epochs must increase")
        missing = set(HISTORY_FIELDS) - set(row)
        if missing:
            raise ValueError(f"history row missing {sorted(missing)}")
        self.rows.append(row)
        self.times.append(seconds)

    def column(self, key: str) -> List:
        return [r[key] for r in self.rows]

    def best(self, key: str = "test_acc") -> dict:
        return max(self.rows, key=lambda r: r[key])

    def to_csv(self, path, include_timing: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_FIELDS + (("wall_time",) if include_timing else ()))
            for i, r in enumerate(self.rows):
                vals = [r["tag"], r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[2:]]
                if include_timing:
                    vals.append(f"{self.times[i]:.3f}")
                writer.writerow(vals)


def epochs_to_reach(rows: Sequence[dict], threshold: float, key: str = "test_acc") -> Optional[int]:
    """First epoch whose ``key`` reaches ``threshold`` (None if never)."""
    for r in rows:
        if r[key] >= threshold:
            return int(r["epoch"])
    return None


def masked_ssim(probs: np.ndarray, masks: SparseProbMasks, k: int = 3) -> float:
    """SSIM between predictions on the dilated sampled support and the dilated target."""
    target = renormalize(_dilate_array(masks.probs[None], k))[0]
    support = _dilate_array(masks.valid[None], k)[0]
    return ssim(np.clip(probs * support, 0, 1), target)


def _role_metrics(probs: np.ndarray, masks: SparseProbMasks) -> Tuple[float, float]:
    sampled = masks.valid[0] > 0
    if not sampled.any():
        return float("nan"), float("nan")
    pred = probs.argmax(axis=0)[sampled]
    true = masks.labels()[sampled]
    return weighted_accuracy(pred, true), masked_ssim(probs, masks)


def evaluate_epoch(ckpt: ModelCheckpoint, aux: np.ndarray, train_masks: SparseProbMasks,
                   test_masks: SparseProbMasks, tile: Optional[int] = None) -> Dict[str, float]:
    """Deterministic full-grid prediction conditioned on every training sample."""
    probs = predict_once(ckpt, aux, train_masks.probs, "deterministic", None, tile, tile // 2 if tile else 0)
    train_acc, train_ssim = _role_metrics(probs, train_masks)
    test_acc, test_ssim = _role_metrics(probs, test_masks)
    return {"train_acc": train_acc, "test_acc": test_acc, "train_ssim": train_ssim, "test_ssim": test_ssim}


def _eval_tile(ckpt: ModelCheckpoint, shape) -> Optional[int]:
    m = 2 ** ckpt.arch.depth
    H, W = shape
    return None if (H % m == 0 and W % m == 0) else ckpt.arch.patch_size


def _focal_config(cfg: TrainConfig, labels: np.ndarray, n_classes: int) -> FocalLossConfig:
    if cfg.class_weights == "inverse_frequency":
        return FocalLossConfig(cfg.gamma, inverse_frequency_weights(labels, n_classes))
    if cfg.class_weights is None:
        return FocalLossConfig(cfg.gamma, None)
    return FocalLossConfig(cfg.gamma, tuple(cfg.class_weights))


def _clip(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def train(ckpt: ModelCheckpoint, patches: PatchSet, split: SpatialSplit, cfg: TrainConfig,
          stack: Union[RasterStack, np.ndarray], masks: SparseProbMasks, tag: str = "train"
          ) -> Tuple[ModelCheckpoint, TrainHistory]:
    """Fit ``ckpt`` on ``patches`` and return the best-test-accuracy checkpoint.

    ``stack`` and ``masks`` are the full grid and all sampled pixels; each
    epoch ends with a deterministic prediction of the whole grid conditioned
    on the training-role samples, scored on train and test roles.
    """
    if len(patches) == 0:
        raise DataError("train: empty patch set")
    arch = ckpt.arch
    if patches.aux.shape[1] != arch.n_aux_channels:
        raise ShapeError(f"patches have {patches.aux.shape[1]} aux channels, model expects {arch.n_aux_channels}")
    if patches.target.shape[1] != arch.n_classes:
        raise ShapeError(f"patches have {patches.target.shape[1]} classes, model expects {arch.n_classes}")
    aux_full = stack.values if isinstance(stack, RasterStack) else np.asarray(stack, np.float32)
    train_masks = masks.restrict(split.role_mask("train"))
    test_masks = masks.restrict(split.role_mask("test"))
    if train_masks.n_valid() == 0:
        raise DataError("train: no training-role samples")
    focal = _focal_config(cfg, train_masks.labels()[train_masks.valid[0] > 0], arch.n_classes)
    eval_tile = _eval_tile(ckpt, aux_full.shape[1:])

    ckpt = ckpt.copy()
    ckpt.adam.lr = cfg.learning_rate
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best: Optional[ModelCheckpoint] = None
    best_acc = ref_acc = -np.inf
    best_epoch = ref_epoch = 0
    N = len(patches)
    start_epoch = ckpt.epoch
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        cond, _, sup, sup_valid = epoch_conditioning_holdout(patches.target, patches.target_valid,
                                                             cfg.holdout_rate, rng)
        order = rng.permutation(N)
        losses = []
        for bi, start in enumerate(range(0, N, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if sup_valid[idx].sum() == 0:
                continue
            tensors = {k: Tensor(v, requires_grad=True) for k, v in ckpt.params.items()}
            probs = forward(ckpt, patches.aux[idx], cond[idx], "train", rng, tensors)
            loss = dilated_fcce(probs, sup[idx], sup_valid[idx], cfg.dilation, focal)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            _clip(grads, cfg.clip_norm)
            adam_step(ckpt.params, grads, ckpt.adam)
            losses.append(value)
        ckpt.epoch = start_epoch + epoch
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            continue
        metrics = evaluate_epoch(ckpt, aux_full, train_masks, test_masks, eval_tile)
        row = {"tag": tag, "epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), **metrics}
        history.append(row, time.perf_counter() - t0)
        msg = (f"[{tag}] epoch {epoch:4d}  loss {row['loss']:.5f}  train_acc {row['train_acc']:.4f}  "
               f"test_acc {row['test_acc']:.4f}")
        logger.info(msg)
        if cfg.verbose:
            print(msg, flush=True)
        test_acc = row["test_acc"] if np.isfinite(row["test_acc"]) else row["train_acc"]
        if best is None or test_acc > best_acc:
            best_acc, best_epoch = test_acc, epoch
            best = ckpt.copy()
        # patience only resets on an improvement larger than the delta
        if test_acc > ref_acc + cfg.early_stop_delta:
            ref_acc, ref_epoch = test_acc, epoch
        if cfg.target_accuracy is not None and test_acc >= cfg.target_accuracy:
            break
        if epoch - ref_epoch >= cfg.patience:
            break
    best.history = list(ckpt.history) + history.rows
    best.meta = {**best.meta, "best_epoch": best_epoch, "best_test_acc": float(best_acc), "tag": tag,
                 "train_config": cfg.to_dict()}
    return best, history


def finetune(pretrained: ModelCheckpoint, patches: PatchSet, split: SpatialSplit, vocabulary: Sequence[str],
             cfg: TrainConfig, stack, masks: SparseProbMasks) -> Tuple[ModelCheckpoint, TrainHistory]:
    """Re-target the head when the vocabulary changes, then train."""
    vocabulary = list(vocabulary)
    start = pretrained
    if vocabulary != list(pretrained.classes):
        start = reinit_head(pretrained, len(vocabulary), cfg.seed, classes=vocabulary)
    start = start.copy()
    start.epoch = 0
    return train(start, patches, split, cfg, stack, masks, tag="finetune")

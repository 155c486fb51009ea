"""Sparse-target losses and evaluation metrics.

The training objective is a weighted sum of focal categorical cross-entropy
terms, each computed after grey-level dilation of the predicted and target
probability maps with a growing square window.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DataError, ShapeError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    class_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.ndim != 1 or np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("class_weights must be a 1-D sequence of positive finite floats")
            object.__setattr__(self, "class_weights", tuple(float(v) for v in w))


@dataclass(frozen=True)
class DilationSchedule:
    filter_sizes: Tuple[int, ...] = (1, 3, 5, 11)
    weights: Tuple[float, ...] = (0.2, 0.3, 0.25, 0.25)

    def __post_init__(self):
        sizes, weights = tuple(int(k) for k in self.filter_sizes), tuple(float(w) for w in self.weights)
        object.__setattr__(self, "filter_sizes", sizes)
        object.__setattr__(self, "weights", weights)
        if len(sizes) != len(weights) or not sizes:
            raise ValueError("filter_sizes and weights must be non-empty and of equal length")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"dilation weights must sum to 1, got {sum(weights)!r}")
        if any(k < 1 or k % 2 == 0 for k in sizes) or list(sizes) != sorted(set(sizes)):
            raise ValueError(f"filter sizes must be odd and strictly ascending, got {sizes}")


def inverse_frequency_weights(labels: np.ndarray, n_classes: int) -> Tuple[float, ...]:
    """Inverse class frequencies normalized to mean 1; absent classes get the max weight."""
    counts = np.bincount(np.asarray(labels).ravel(), minlength=n_classes)[:n_classes].astype(float)
    if counts.sum() == 0:
        raise DataError("cannot derive class weights from zero samples")
    w = np.zeros(n_classes)
    present = counts > 0
    w[present] = counts.sum() / counts[present]
    w[~present] = w[present].max()
    w /= w.mean()
    return tuple(float(v) for v in w)


def fcce(pred: Tensor, target, valid, cfg: FocalLossConfig = FocalLossConfig()) -> Tensor:
    """Mean over valid pixels of ``-sum_j w_j y_j (1 - p_j)**gamma log p_j``."""
    if target is None or valid is None:
        raise ShapeError("fcce needs target and valid arrays")
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    valid = np.asarray(valid.data if isinstance(valid, Tensor) else valid)
    B, C, H, W = pred.shape
    if target.shape != pred.shape:
        raise ShapeError(f"fcce: target shape {target.shape} != prediction shape {pred.shape}")
    if valid.shape != (B, 1, H, W):
        raise ShapeError(f"fcce: valid mask shape {valid.shape}, expected {(B, 1, H, W)}")
    n_valid = float(valid.sum())
    if n_valid <= 0:
        raise DataError("fcce: no supervision pixels")
    dtype = pred.dtype
    w = np.ones(C) if cfg.class_weights is None else np.asarray(cfg.class_weights, dtype=float)
    if w.shape != (C,):
        raise ShapeError(f"fcce: {w.shape[0]} class weights for {C} classes")
    coef = (target * valid * w.reshape(1, C, 1, 1)).astype(dtype)
    p_raw = pred.data
    p = np.clip(p_raw, PROB_CLAMP, 1 - PROB_CLAMP)
    logp = np.log(p)
    g = cfg.gamma
    focal = (1 - p) ** g if g else np.ones_like(p)
    loss = -(coef * focal * logp).sum() / n_valid

    def backward(grad):
        d = focal / p
        if g:
            d = d - g * (1 - p) ** (g - 1) * logp
        inside = (p_raw > PROB_CLAMP) & (p_raw < 1 - PROB_CLAMP)
        return ((-grad / n_valid) * coef * d * inside,)

    return ad.make_node(np.asarray(loss, dtype=dtype), (pred,), backward, "fcce")


def dilate(x, k: int) -> Tensor:
    """Per-channel grey dilation with a k x k window (windows clipped at the border)."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"dilation window must be odd and >= 1, got {k}")
    return ad.max_filter2d(ad.as_tensor(x), k)


def _dilate_array(x: np.ndarray, k: int) -> np.ndarray:
    with ad.no_grad():
        return dilate(Tensor(x), k).data


def renormalize(probs: np.ndarray) -> np.ndarray:
    s = probs.sum(axis=1, keepdims=True)
    return np.divide(probs, s, out=np.zeros_like(probs), where=s > 0)


def dilated_fcce(pred: Tensor, sparse_target, valid, sched: DilationSchedule = DilationSchedule(),
                 cfg: FocalLossConfig = FocalLossConfig()) -> Tensor:
    """Schedule-weighted FCCE between dilated predictions and dilated, renormalized targets."""
    target = np.asarray(sparse_target, dtype=pred.dtype)
    valid = np.asarray(valid, dtype=pred.dtype)
    terms = []
    for k in sched.filter_sizes:
        if k == 1:
            terms.append(fcce(pred, target, valid, cfg))
            continue
        t_k = renormalize(_dilate_array(target, k))
        v_k = _dilate_array(valid, k)
        terms.append(fcce(dilate(pred, k), t_k, v_k, cfg))
    if len(terms) == 1 and sched.weights[0] == 1.0:
        return terms[0]
    return ad.weighted_sum(terms, sched.weights)


# ---------------------------------------------------------------- metrics

def weighted_accuracy(pred_labels, true_labels, class_weights=None) -> float:
    """Accuracy with each sample weighted by its true class.

    Without ``class_weights`` the weights are inverse class frequencies,
    which makes this the balanced (macro-recall) accuracy.
    """
    pred = np.asarray(pred_labels).ravel()
    true = np.asarray(true_labels).ravel()
    if pred.size == 0:
        raise DataError("weighted_accuracy: empty input")
    if pred.shape != true.shape:
        raise ShapeError(f"weighted_accuracy: {pred.size} predictions for {true.size} labels")
    if class_weights is None:
        counts = np.bincount(true)
        w = 1.0 / counts[true]
    else:
        w = np.asarray(class_weights, dtype=float)[true]
    return float((w * (pred == true)).sum() / w.sum())


def confusion_matrix(pred_labels, true_labels, n_classes: int):
    """Counts ``[true, pred]`` and row-normalized rates (empty rows stay zero)."""
    pred = np.asarray(pred_labels).ravel().astype(int)
    true = np.asarray(true_labels).ravel().astype(int)
    if pred.shape != true.shape:
        raise ShapeError("confusion_matrix: label arrays differ in length")
    for name, arr in (("pred", pred), ("true", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"confusion_matrix: {name} label outside [0, {n_classes})")
    counts = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    rows = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    return counts, rates


SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def ssim(map_a, map_b) -> float:
    """Gaussian-window (11 x 11, sigma 1.5) structural similarity of [0, 1] maps.

    Accepts (H, W) or (C, H, W) grids; the SSIM map is averaged over channels
    and pixels.
    """
    return float(ssim_map(map_a, map_b).mean())


def ssim_map(map_a, map_b) -> np.ndarray:
    """Per-pixel SSIM, shape (C, H, W); borders use reflected neighbourhoods."""
    a = np.asarray(map_a, dtype=np.float64)
    b = np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim: expected 2-D or 3-D grids, got {a.ndim}-D")

    def blur(x):
        return gaussian_filter(x, sigma=(0, SSIM_SIGMA, SSIM_SIGMA), truncate=SSIM_RADIUS / SSIM_SIGMA,
                               mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den

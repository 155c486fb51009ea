"""Monte Carlo DropBlock ensembles over full rasters.

Each draw runs the network in ``mc_sample`` mode (DropBlock active in the
first U-net only). Rasters larger than a tile are cut into overlapping
windows whose predictions are blended with cosine-ramp weights.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import no_grad
from .exceptions import DataError, ShapeError
from .geodata import RasterStack, SparseProbMasks, SpatialSplit
from .losses import confusion_matrix, weighted_accuracy
from .model import ModelCheckpoint, forward


@dataclass
class EnsembleResult:
    mean: np.ndarray
    std: np.ndarray
    n_draws: int
    mode: str
    argmax_map: np.ndarray


def window_starts(size: int, tile: int, overlap: int) -> List[int]:
    if tile > size:
        raise ShapeError(f"tile {tile} larger than grid dimension {size}")
    step = tile - overlap
    starts = list(range(0, size - tile + 1, step))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def ramp(tile: int, overlap: int, at_start: bool, at_end: bool) -> np.ndarray:
    """1-D blending weights: raised-cosine ramps over ``overlap`` pixels at interior edges."""
    w = np.ones(tile)
    if overlap > 0:
        up = 0.5 - 0.5 * np.cos(np.pi * (np.arange(overlap) + 0.5) / overlap)
        if not at_start:
            w[:overlap] = up
        if not at_end:
            w[tile - overlap:] = up[::-1]
    return w


def tile_layout(height: int, width: int, tile: Optional[int], overlap: int, multiple: int, context: int = 0):
    """Windows ``(r0, c0, size_h, size_w, weight, window)`` covering the grid.

    ``(r0, c0, size_h, size_w)`` is the core tile whose prediction is kept and
    blended with ``weight``. ``window = (wr0, wr1, wc0, wc1)`` is the input
    read for it: the core grown by ``context`` pixels per side, clipped to the
    grid and snapped outward to multiples of ``multiple`` so pooling windows
    line up with the untiled pass.
    """
    if tile is None or (tile >= height and tile >= width):
        if height % multiple or width % multiple:
            raise ShapeError(f"grid {height}x{width} not divisible by {multiple}; pass a tile size")
        return [(0, 0, height, width, np.ones((height, width)), (0, height, 0, width))]
    if tile % multiple:
        raise ShapeError(f"tile {tile} not divisible by 2**depth = {multiple}")
    if not 0 <= overlap < tile:
        raise ShapeError(f"overlap must satisfy 0 <= overlap < tile, got {overlap} for tile {tile}")
    if context < 0:
        raise ShapeError(f"context must be >= 0, got {context}")
    rows = window_starts(height, tile, overlap)
    cols = window_starts(width, tile, overlap)

    def span(start, size):
        lo = max(0, start - context) // multiple * multiple
        hi = min(size, -(-(start + tile + context) // multiple) * multiple)
        if (hi - lo) % multiple:  # grid edge not on the lattice: grow inward instead
            lo = max(0, hi - -(-(hi - lo) // multiple) * multiple)
            if (hi - lo) % multiple:
                raise ShapeError(f"cannot fit a {multiple}-aligned window around a tile at {start}")
        return lo, hi

    out = []
    for r0 in rows:
        wr = ramp(tile, overlap, r0 == 0, r0 == height - tile)
        for c0 in cols:
            wc = ramp(tile, overlap, c0 == 0, c0 == width - tile)
            out.append((r0, c0, tile, tile, np.outer(wr, wc), span(r0, height) + span(c0, width)))
    return out


def predict_once(ckpt: ModelCheckpoint, aux: np.ndarray, masks: np.ndarray, mode: str = "deterministic",
                 rng=None, tile: Optional[int] = None, overlap: int = 0, context: int = 0) -> np.ndarray:
    """One (possibly tiled) pass over a (C, H, W) raster; returns (n_classes, H, W)."""
    aux = np.asarray(aux, dtype=np.float32)
    masks = np.asarray(masks, dtype=np.float32)
    _, H, W = aux.shape
    if masks.shape[1:] != (H, W):
        raise ShapeError(f"mask grid {masks.shape[1:]} != raster grid {(H, W)}")
    layout = tile_layout(H, W, tile, overlap, 2 ** ckpt.arch.depth, context)
    if len(layout) == 1:
        with no_grad():
            return forward(ckpt, aux[None], masks[None], mode, rng).data[0].astype(np.float64)
    # tiles sharing an input window shape run as one batch, in layout order
    groups: Dict[Tuple[int, int], List[int]] = {}
    for i, (*_, (wr0, wr1, wc0, wc1)) in enumerate(layout):
        groups.setdefault((wr1 - wr0, wc1 - wc0), []).append(i)
    preds: Dict[int, np.ndarray] = {}
    with no_grad():
        for idx in groups.values():
            wins = [layout[i][5] for i in idx]
            xa = np.stack([aux[:, a:b, c:d] for a, b, c, d in wins])
            xm = np.stack([masks[:, a:b, c:d] for a, b, c, d in wins])
            for i, p in zip(idx, forward(ckpt, xa, xm, mode, rng).data):
                preds[i] = p
    acc = np.zeros((ckpt.arch.n_classes, H, W))
    wsum = np.zeros((H, W))
    for i, (r, c, h, w, wt, (wr0, _, wc0, _)) in enumerate(layout):
        core = preds[i][:, r - wr0:r - wr0 + h, c - wc0:c - wc0 + w]
        acc[:, r:r + h, c:c + w] += wt * core
        wsum[r:r + h, c:c + w] += wt
    return acc / wsum


def _mask_array(ckpt: ModelCheckpoint, masks, shape) -> Tuple[np.ndarray, str]:
    if masks is None:
        return np.zeros((ckpt.arch.n_classes,) + shape, np.float32), "unconstrained"
    if isinstance(masks, SparseProbMasks):
        masks = masks.probs
    masks = np.asarray(masks, dtype=np.float32)
    if masks.shape != (ckpt.arch.n_classes,) + shape:
        raise ShapeError(f"masks shape {masks.shape} != {(ckpt.arch.n_classes,) + shape}")
    return masks, "constrained"


def _seed_sequence(rng) -> np.random.SeedSequence:
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.SeedSequence(rng)
    if isinstance(rng, np.random.SeedSequence):
        return rng
    return np.random.SeedSequence(int(np.random.default_rng(rng).integers(2 ** 63)))


def mc_predict(ckpt: ModelCheckpoint, stack, masks=None, n_draws: int = 100, tile: Optional[int] = None,
               overlap: int = 0, rng=None, mode: str = "mc_sample", threads: int = 1,
               context: int = 0) -> EnsembleResult:
    """Per-class mean and population standard deviation over ``n_draws`` passes.

    ``masks=None`` means zeroed masks (unconstrained prediction). Each draw
    gets its own seed spawned from ``rng``, and results are accumulated in
    draw order, so the output does not depend on ``threads``.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    aux = stack.values if isinstance(stack, RasterStack) else np.asarray(stack, dtype=np.float32)
    shape = aux.shape[1:]
    mask_arr, kind = _mask_array(ckpt, masks, shape)
    seeds = _seed_sequence(rng).spawn(n_draws)

    def draw(seq):
        return predict_once(ckpt, aux, mask_arr, mode, np.random.default_rng(seq), tile, overlap, context)

    mean = np.zeros((ckpt.arch.n_classes,) + shape)
    m2 = np.zeros_like(mean)
    count = 0

    def accumulate(p):
        nonlocal count, mean, m2
        count += 1
        delta = p - mean
        mean += delta / count
        m2 += delta * (p - mean)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for start in range(0, n_draws, threads):
                for p in pool.map(draw, seeds[start:start + threads]):
                    accumulate(p)
    else:
        for seq in seeds:
            accumulate(draw(seq))
    std = np.sqrt(np.maximum(m2 / count, 0.0))
    return EnsembleResult(mean, std, n_draws, kind, mean.argmax(axis=0))


MISCLASS_UNSAMPLED, MISCLASS_CORRECT, MISCLASS_WRONG = 0, 1, 2


def evaluate(result: EnsembleResult, masks: SparseProbMasks, split: Optional[SpatialSplit] = None,
             role: Optional[str] = "test") -> Dict:
    """Confusion matrix and accuracies over sampled pixels of one split role."""
    if result.mean.shape[1:] != masks.shape:
        raise ShapeError(f"result grid {result.mean.shape[1:]} != mask grid {masks.shape}")
    sampled = masks.valid[0] > 0
    if split is not None and role is not None:
        sampled &= split.role_mask(role)
    if not sampled.any():
        raise DataError(f"no sampled pixels with role {role!r}")
    n_classes = result.mean.shape[0]
    true = masks.labels()[sampled]
    pred = result.argmax_map[sampled]
    counts, rates = confusion_matrix(pred, true, n_classes)
    misclass = np.full(masks.shape, MISCLASS_UNSAMPLED, dtype=np.int8)
    misclass[sampled] = np.where(pred == true, MISCLASS_CORRECT, MISCLASS_WRONG)
    return {
        "role": role,
        "mode": result.mode,
        "n_pixels": int(sampled.sum()),
        "weighted_accuracy": weighted_accuracy(pred, true),
        "accuracy": float((pred == true).mean()),
        "per_class_accuracy": np.diag(rates).tolist(),
        "confusion_counts": counts.tolist(),
        "confusion_rates": rates.tolist(),
        "misclassification": misclass,
    }

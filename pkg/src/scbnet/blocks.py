"""Composite layers: residual conv blocks, attention gates and DropBlock.

Parameters live in flat ``{name: Tensor}`` mappings keyed by a dotted prefix,
so a whole network serializes as one dictionary. Batch-norm running
statistics are plain arrays kept in a separate ``buffers`` mapping.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, MutableMapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ShapeError

Params = Mapping[str, Tensor]
Buffers = MutableMapping[str, np.ndarray]


def he_normal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def conv_params(rng, prefix: str, cin: int, cout: int, k: int) -> Dict[str, np.ndarray]:
    return {f"{prefix}.w": he_normal(rng, (cout, cin, k, k)),
            f"{prefix}.b": np.zeros(cout, dtype=np.float32)}


def bn_params(prefix: str, channels: int):
    params = {f"{prefix}.gamma": np.ones(channels, dtype=np.float32),
              f"{prefix}.beta": np.zeros(channels, dtype=np.float32)}
    buffers = {f"{prefix}.mean": np.zeros(channels, dtype=np.float32),
               f"{prefix}.var": np.ones(channels, dtype=np.float32)}
    return params, buffers


def conv(x: Tensor, p: Params, prefix: str, padding: int = 0) -> Tensor:
    return ad.conv2d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], stride=1, padding=padding)


def bn(x: Tensor, p: Params, buffers: Buffers, prefix: str, training: bool) -> Tensor:
    return ad.batchnorm2d(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
                          buffers[f"{prefix}.mean"], buffers[f"{prefix}.var"], training)


# ---------------------------------------------------------------- residual block

def residual_block_params(rng, prefix: str, cin: int, cout: int):
    """conv3x3-BN-relu-conv3x3-BN plus a 1x1 projection iff ``cin != cout``."""
    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    params.update(conv_params(rng, f"{prefix}.conv1", cin, cout, 3))
    p, b = bn_params(f"{prefix}.bn1", cout)
    params.update(p)
    buffers.update(b)
    params.update(conv_params(rng, f"{prefix}.conv2", cout, cout, 3))
    p, b = bn_params(f"{prefix}.bn2", cout)
    params.update(p)
    buffers.update(b)
    if cin != cout:
        params.update(conv_params(rng, f"{prefix}.proj", cin, cout, 1))
    return params, buffers


def residual_block(x: Tensor, p: Params, buffers: Buffers, prefix: str, training: bool) -> Tensor:
    """``relu(BN(conv(relu(BN(conv(x))))) + shortcut(x))``."""
    cout = p[f"{prefix}.conv1.w"].shape[0]
    h = ad.relu(bn(conv(x, p, f"{prefix}.conv1", padding=1), p, buffers, f"{prefix}.bn1", training))
    h = bn(conv(h, p, f"{prefix}.conv2", padding=1), p, buffers, f"{prefix}.bn2", training)
    if f"{prefix}.proj.w" in p:
        shortcut = conv(x, p, f"{prefix}.proj")
    else:
        if x.shape[1] != cout:
            raise ShapeError(f"residual_block {prefix}: input has {x.shape[1]} channels, "
                             f"block outputs {cout} and has no projection")
        shortcut = x
    return ad.relu(ad.add(h, shortcut))


# ---------------------------------------------------------------- attention gate

def attention_channels(out_channels: int) -> int:
    return max(out_channels // 2, 1)


def attention_gate_params(rng, prefix: str, skip_channels: int, gate_channels: int, inter_channels: int):
    if inter_channels < 1:
        raise ShapeError(f"attention gate {prefix}: intermediate channels must be >= 1")
    params = {}
    params.update(conv_params(rng, f"{prefix}.skip", skip_channels, inter_channels, 1))
    params.update(conv_params(rng, f"{prefix}.gate", gate_channels, inter_channels, 1))
    params.update(conv_params(rng, f"{prefix}.psi", inter_channels, 1, 1))
    return params


def attention_coefficients(skip: Tensor, gate: Tensor, p: Params, prefix: str) -> Tensor:
    """Single-channel gate map psi in (0, 1) at the skip resolution."""
    if skip.shape[0] != gate.shape[0]:
        raise ShapeError(f"attention_gate {prefix}: batch mismatch {skip.shape[0]} vs {gate.shape[0]}")
    if gate.shape[2:] != skip.shape[2:]:
        if (gate.shape[2] * 2, gate.shape[3] * 2) != skip.shape[2:]:
            raise ShapeError(f"attention_gate {prefix}: gate {gate.shape[2:]} must equal or be half "
                             f"of skip {skip.shape[2:]}")
        gate = ad.upsample_nearest2x(gate)
    a = ad.add(conv(skip, p, f"{prefix}.skip"), conv(gate, p, f"{prefix}.gate"))
    return ad.sigmoid(conv(ad.relu(a), p, f"{prefix}.psi"))


def attention_gate(skip: Tensor, gate: Tensor, p: Params, prefix: str) -> Tensor:
    psi = attention_coefficients(skip, gate, p, prefix)
    return ad.mul(skip, ad.expand_channels(psi, skip.shape[1]))


# ---------------------------------------------------------------- DropBlock

@dataclass(frozen=True)
class DropBlockConfig:
    block_size: int = 5
    drop_rate: float = 0.3
    enabled_at_inference: bool = True

    def __post_init__(self):
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ValueError(f"DropBlock block_size must be a positive odd integer, got {self.block_size}")
        if not 0 <= self.drop_rate < 1:
            raise ValueError(f"DropBlock drop_rate must lie in [0, 1), got {self.drop_rate}")


def dropblock_gamma(drop_rate: float, block_size: int, height: int, width: int) -> float:
    """Seed probability per eligible centre so that about ``drop_rate`` of units drop."""
    return (drop_rate / block_size ** 2) * (height * width) / ((height - block_size + 1) * (width - block_size + 1))


def effective_block_size(block_size: int, height: int, width: int) -> int:
    """Largest odd size not exceeding ``block_size`` or the feature map."""
    bs = min(block_size, height, width)
    return bs if bs % 2 else bs - 1


def dropblock_keep_mask(shape, block_size: int, drop_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Rescaled keep mask of shape (B, 1, H, W), shared across channels."""
    B, _, H, W = shape
    if block_size > H or block_size > W:
        raise ShapeError(f"dropblock: block_size {block_size} exceeds feature map {H}x{W}")
    gamma = dropblock_gamma(drop_rate, block_size, H, W)
    r = block_size // 2
    seeds = np.zeros((B, 1, H, W), dtype=bool)
    seeds[:, :, r:H - r, r:W - r] = rng.random((B, 1, H - block_size + 1, W - block_size + 1)) < gamma
    if block_size > 1:
        padded = np.pad(seeds, ((0, 0), (0, 0), (r, r), (r, r)))
        dropped = sliding_window_view(padded, (block_size, block_size), axis=(2, 3)).any(axis=(-2, -1))
    else:
        dropped = seeds
    keep = (~dropped).astype(np.float64)
    kept = keep.sum(axis=(1, 2, 3), keepdims=True)
    factor = np.divide(H * W, kept, out=np.zeros_like(kept), where=kept > 0)
    return keep * factor


def dropblock(x: Tensor, cfg: DropBlockConfig, rng: np.random.Generator, active: bool) -> Tensor:
    if not active or cfg.drop_rate == 0:
        return x
    mask = dropblock_keep_mask(x.shape, cfg.block_size, cfg.drop_rate, rng)
    return ad.mul_const(x, mask.astype(x.dtype))

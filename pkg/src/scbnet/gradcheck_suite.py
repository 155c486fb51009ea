"""Finite-difference checks for every differentiable operation of the network.

Inputs to piecewise-linear ops (relu, max pooling, dilation) are drawn away
from their kinks and ties so that central differences stay on one branch.
"""
from __future__ import annotations

import time
from typing import Callable, Dict, Iterable, List, Tuple

import numpy as np

from . import autodiff as ad
from . import blocks
from .autodiff import Tensor, grad_check
from .losses import DilationSchedule, FocalLossConfig, dilate, dilated_fcce, fcce


def _distinct(rng, shape, gap: float = 0.05) -> np.ndarray:
    """Values that are pairwise at least ``gap`` apart and away from zero."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap
    return rng.permutation(vals).reshape(shape)


def _away_from_zero(rng, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _params(d: Dict[str, np.ndarray]) -> Tuple[List[str], List[Tensor]]:
    names = sorted(d)
    return names, [_t(d[k]) for k in names]


def _case_conv2d(rng):
    x, w, b = _t(rng.standard_normal((2, 3, 6, 6))), _t(rng.standard_normal((4, 3, 3, 3))), _t(rng.standard_normal(4))
    return lambda x, w, b: ad.conv2d(x, w, b, padding=1), [x, w, b]


def _case_maxpool(rng):
    return lambda x: ad.maxpool2d(x, 2, 2), [_t(_distinct(rng, (2, 2, 6, 6)))]


def _case_upsample(rng):
    return ad.upsample_nearest2x, [_t(rng.standard_normal((2, 3, 4, 5)))]


def _case_relu(rng):
    return ad.relu, [_t(_away_from_zero(rng, (2, 3, 5, 5)))]


def _case_sigmoid(rng):
    return ad.sigmoid, [_t(3 * rng.standard_normal((2, 3, 5, 5)))]


def _case_softmax(rng):
    return ad.softmax_channels, [_t(2 * rng.standard_normal((2, 4, 5, 5)))]


def _case_batchnorm(rng):
    x = _t(rng.standard_normal((3, 2, 4, 4)) * 2 + 1)
    gamma, beta = _t(rng.uniform(0.5, 1.5, 2)), _t(rng.standard_normal(2))
    rm, rv = np.zeros(2), np.ones(2)
    return lambda x, g, b: ad.batchnorm2d(x, g, b, rm, rv, True), [x, gamma, beta]


def _case_attention_gate(rng):
    p = blocks.attention_gate_params(rng, "att", 3, 4, 2)
    names, ts = _params({k: v.astype(np.float64) + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()})
    skip, gate = _t(rng.standard_normal((2, 3, 6, 6))), _t(rng.standard_normal((2, 4, 3, 3)))

    def fn(skip, gate, *params):
        return blocks.attention_gate(skip, gate, dict(zip(names, params)), "att")

    return fn, [skip, gate] + ts


def _case_residual_block(rng):
    p, buffers = blocks.residual_block_params(rng, "res", 2, 3)
    names, ts = _params({k: v.astype(np.float64) + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()})
    buffers = {k: v.astype(np.float64) for k, v in buffers.items()}
    x = _t(rng.standard_normal((2, 2, 5, 5)))

    def fn(x, *params):
        return blocks.residual_block(x, dict(zip(names, params)), buffers, "res", True)

    return fn, [x] + ts


def _case_dilate(rng):
    return lambda x: dilate(x, 3), [_t(_distinct(rng, (2, 2, 6, 6)))]


def _sparse_target(rng, shape, density=0.3):
    B, C, H, W = shape
    labels = rng.integers(0, C, size=(B, H, W))
    target = np.moveaxis(np.eye(C)[labels], -1, 1)
    valid = (rng.random((B, 1, H, W)) < density).astype(np.float64)
    valid[0, 0, 0, 0] = 1.0
    return target * valid, valid


def _case_fcce(rng):
    shape = (2, 3, 5, 5)
    target, valid = _sparse_target(rng, shape)
    cfg = FocalLossConfig(2.0, (1.0, 0.5, 1.5))
    logits = _t(rng.standard_normal(shape))
    return lambda z: fcce(ad.softmax_channels(z), target, valid, cfg), [logits]


def _case_dilated_fcce(rng):
    shape = (2, 3, 12, 12)
    target, valid = _sparse_target(rng, shape, 0.1)
    # distinct logits keep the dilation argmax stable under perturbation
    logits = _t(_distinct(rng, shape, gap=0.01))
    return lambda z: dilated_fcce(ad.softmax_channels(z), target, valid, DilationSchedule(), FocalLossConfig()), [logits]


CASES: Dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "maxpool": _case_maxpool,
    "upsample": _case_upsample,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "batchnorm": _case_batchnorm,
    "attention_gate": _case_attention_gate,
    "residual_block": _case_residual_block,
    "dilate": _case_dilate,
    "fcce": _case_fcce,
    "dilated_fcce": _case_dilated_fcce,
}


def check_op(name: str, seed: int, eps: float = 1e-5) -> float:
    fn, inputs = CASES[name](np.random.default_rng(seed))
    return grad_check(fn, inputs, eps=eps, seed=seed).max_rel_error


def run_suite(seeds: Iterable[int] = range(5), tol: float = 1e-4, ops=None) -> dict:
    """Max relative error per op over ``seeds``; ``passed`` is the conjunction."""
    t0 = time.perf_counter()
    seeds = list(seeds)
    report = {"tol": tol, "seeds": seeds, "ops": {}}
    for name in ops or CASES:
        errs = [check_op(name, s) for s in seeds]
        report["ops"][name] = {"max_rel_error": max(errs), "per_seed": errs, "passed": max(errs) <= tol}
    report["passed"] = all(r["passed"] for r in report["ops"].values())
    report["seconds"] = time.perf_counter() - t0
    return report

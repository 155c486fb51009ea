"""Deterministic synthetic geology for desk-scale experiments.

Labels come from a seeded Voronoi partition; every auxiliary channel is a
class-dependent mean plus a smooth regional trend plus white noise. Class
signatures (the mean vectors) are drawn from their own seed, so two datasets
with different layout seeds but the same ``signature_seed`` describe related
"geological contexts" sharing their first classes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .formats import write_grd
from .geodata import RasterStack, SampleTable

SIGNATURE_POOL = 32


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    height: int = 96
    width: int = 96
    n_classes: int = 4
    n_aux: int = 5
    n_samples: int = 600
    separation: float = 1.5
    noise_std: float = 0.5
    trend_amplitude: float = 0.5
    sites_per_class: int = 3
    signature_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_classes > SIGNATURE_POOL:
            raise ValueError(f"at most {SIGNATURE_POOL} classes supported")
        if self.n_samples > self.height * self.width:
            raise ValueError("n_samples exceeds the number of pixels")
        if self.separation < 0 or self.noise_std < 0:
            raise ValueError("separation and noise_std must be >= 0")

    @property
    def vocabulary(self) -> Tuple[str, ...]:
        return tuple(f"L{k:02d}" for k in range(self.n_classes))


def class_signatures(cfg: SynthConfig) -> np.ndarray:
    """Per-class mean vectors, shape (n_classes, n_aux)."""
    pool = np.random.default_rng(cfg.signature_seed).standard_normal((SIGNATURE_POOL, cfg.n_aux))
    return cfg.separation * pool[:cfg.n_classes]


def voronoi_labels(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n_sites = cfg.n_classes * cfg.sites_per_class
    sites = rng.uniform([0, 0], [cfg.height, cfg.width], size=(n_sites, 2))
    site_class = np.arange(n_sites) % cfg.n_classes
    rr, cc = np.mgrid[0:cfg.height, 0:cfg.width]
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    return site_class[d2.argmin(axis=-1)]


def smooth_field(cfg: SynthConfig, rng: np.random.Generator, n_waves: int = 3) -> np.ndarray:
    rr, cc = np.mgrid[0:cfg.height, 0:cfg.width]
    field = np.zeros((cfg.height, cfg.width))
    for _ in range(n_waves):
        kr, kc = rng.uniform(-2, 2, size=2) * 2 * np.pi / np.array([cfg.height, cfg.width])
        field += np.cos(kr * rr + kc * cc + rng.uniform(0, 2 * np.pi))
    peak = np.abs(field).max()
    return cfg.trend_amplitude * field / peak if peak > 0 else field


def gen_dataset(cfg: SynthConfig = SynthConfig()):
    """Return ``(raw RasterStack, SampleTable, true label grid)``."""
    rng = np.random.default_rng(cfg.seed)
    labels = voronoi_labels(cfg, rng)
    mu = class_signatures(cfg)
    aux = np.empty((cfg.n_aux, cfg.height, cfg.width))
    for c in range(cfg.n_aux):
        aux[c] = mu[labels, c] + smooth_field(cfg, rng) + cfg.noise_std * rng.standard_normal(labels.shape)
    flat = rng.choice(cfg.height * cfg.width, size=cfg.n_samples, replace=False)
    ys, xs = np.unravel_index(flat, labels.shape)
    vocab = np.array(cfg.vocabulary, dtype=object)
    samples = SampleTable(xs, ys, vocab[labels[ys, xs]])
    stack = RasterStack(aux.astype(np.float32), [f"A{c}" for c in range(cfg.n_aux)], nodata=None)
    return stack, samples, labels


def write_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Write ``aux.grd``, ``samples.csv`` and ``truth.grd`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stack, samples, labels = gen_dataset(cfg)
    stack.save(out / "aux.grd")
    samples.to_csv(out / "samples.csv")
    write_grd(out / "truth.grd", labels[None].astype(np.float32), ["label"])
    return {"aux": str(out / "aux.grd"), "samples": str(out / "samples.csv"), "truth": str(out / "truth.grd")}

"""Raster ingestion, sparse probability masks, spatial block splits and patch sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates
from sklearn.base import BaseEstimator, TransformerMixin

from . import formats
from .exceptions import DataError, ShapeError

TABLE2_CHANNELS = ("B2", "B3", "B4", "B8", "B11", "B12", "HH", "HV", "HH/HV", "DEM", "MAG")
STD_FLOOR = 1e-6

ROLE_EMPTY, ROLE_TRAIN, ROLE_TEST, ROLE_VALIDATION = 0, 1, 2, 3
ROLE_NAMES = {ROLE_EMPTY: "empty", ROLE_TRAIN: "train", ROLE_TEST: "test", ROLE_VALIDATION: "validation"}
ROLE_CODES = {v: k for k, v in ROLE_NAMES.items()}


# ---------------------------------------------------------------- rasters

@dataclass
class RasterStack:
    values: np.ndarray
    names: List[str]
    nodata: Optional[float] = None
    pixel_size_m: float = 400.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ShapeError(f"raster stack must be (channels, height, width), got {self.values.shape}")
        if len(self.names) != self.values.shape[0]:
            raise ShapeError(f"{len(self.names)} names for {self.values.shape[0]} channels")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def save(self, path) -> None:
        formats.write_grd(path, self.values, self.names, -9999.0 if self.nodata is None else self.nodata)


class RasterScaler(TransformerMixin, BaseEstimator):
    """Per-channel z-score over non-nodata pixels; nodata becomes 0 afterwards."""

    def __init__(self, nodata=None, std_floor=STD_FLOOR):
        self.nodata = nodata
        self.std_floor = std_floor

    def _valid(self, X):
        valid = np.isfinite(X)
        if self.nodata is not None:
            valid &= X != self.nodata
        return valid

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ShapeError(f"expected (channels, height, width), got {X.shape}")
        valid = self._valid(X)
        self.mean_ = np.zeros(X.shape[0])
        self.scale_ = np.ones(X.shape[0])
        for c in range(X.shape[0]):
            v = X[c][valid[c]]
            if v.size:
                self.mean_[c] = v.mean()
                self.scale_[c] = max(v.std(), self.std_floor)
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != self.mean_.shape[0]:
            raise ShapeError(f"fitted on {self.mean_.shape[0]} channels, got {X.shape[0]}")
        valid = self._valid(X)
        Z = (X - self.mean_[:, None, None]) / self.scale_[:, None, None]
        return np.where(valid, Z, 0.0).astype(np.float32)


def _load_source(path: Path, name: Optional[str]):
    if path.suffix.lower() == ".csv":
        return read_grid_csv_channel(path, name)
    values, names, nodata = formats.read_grd(path)
    if name is not None and len(names) == 1:
        names = [name]
    return values, names, nodata


def read_grid_csv_channel(path, name=None):
    grid = formats.read_csv_grid(path)
    return grid[None], [name or Path(path).stem], None


def ingest_rasters(sources: Sequence, manifest: Optional[dict] = None) -> RasterStack:
    """Stack and standardize gridded channels.

    ``sources`` are arrays (H, W) / (C, H, W) or paths to GRD / CSV grids.
    ``manifest`` may carry ``names``, ``nodata`` and ``pixel_size_m``.
    """
    manifest = dict(manifest or {})
    names_override = manifest.get("names")
    nodata = manifest.get("nodata")
    planes, names = [], []
    for i, src in enumerate(sources):
        if isinstance(src, (str, Path)):
            vals, nms, file_nodata = _load_source(Path(src), None)
            if nodata is None:
                nodata = file_nodata
        else:
            vals = np.asarray(src, dtype=np.float32)
            if vals.ndim == 2:
                vals = vals[None]
            nms = [f"band{len(names) + j}" for j in range(vals.shape[0])]
        planes.append(vals)
        names.extend(nms)
    if not planes:
        raise DataError("ingest_rasters: no input channels")
    dims = {tuple(p.shape[1:]) for p in planes}
    if len(dims) > 1:
        listing = ", ".join(f"{n}={p.shape[1]}x{p.shape[2]}" for p, n in zip(planes, names))
        raise ShapeError(f"ingest_rasters: channel grids differ in size: {listing}")
    values = np.concatenate(planes, axis=0)
    if names_override is not None:
        if len(names_override) != values.shape[0]:
            raise DataError(f"manifest lists {len(names_override)} names for {values.shape[0]} channels")
        names = list(names_override)
    scaled = RasterScaler(nodata=nodata).fit_transform(values)
    return RasterStack(scaled, names, nodata, float(manifest.get("pixel_size_m", 400.0)))


# ---------------------------------------------------------------- samples and masks

@dataclass
class SampleTable:
    x: np.ndarray
    y: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=int).ravel()
        self.y = np.asarray(self.y, dtype=int).ravel()
        self.codes = np.asarray(self.codes, dtype=object).ravel()
        if not (len(self.x) == len(self.y) == len(self.codes)):
            raise DataError("sample table columns differ in length")

    def __len__(self) -> int:
        return len(self.codes)

    def counts(self) -> Dict[str, int]:
        codes, n = np.unique(self.codes.astype(str), return_counts=True)
        return dict(zip(codes.tolist(), n.tolist()))

    def subset(self, keep: np.ndarray) -> "SampleTable":
        return SampleTable(self.x[keep], self.y[keep], self.codes[keep])

    @classmethod
    def read_csv(cls, path) -> "SampleTable":
        return cls(*formats.read_samples_csv(path))

    def to_csv(self, path) -> None:
        formats.write_samples_csv(path, self.x, self.y, self.codes.tolist())


def filter_rare_classes(samples: SampleTable, threshold: float = 0.01) -> Tuple[SampleTable, List[str]]:
    """Drop classes whose share of the table is at most ``threshold``."""
    if len(samples) == 0:
        raise DataError("filter_rare_classes: empty sample table")
    counts = samples.counts()
    total = sum(counts.values())
    keep_codes = sorted(c for c, n in counts.items() if n / total > threshold)
    if not keep_codes:
        raise DataError(f"filter_rare_classes: every class is at or below {threshold:.2%}")
    keep = np.isin(samples.codes.astype(str), keep_codes)
    return samples.subset(keep), keep_codes


@dataclass
class SparseProbMasks:
    probs: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=np.float32)
        if self.probs.ndim != 3 or self.valid.shape != (1,) + self.probs.shape[1:]:
            raise ShapeError(f"masks must be (C, H, W) with valid (1, H, W); got {self.probs.shape}, {self.valid.shape}")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.probs.shape[1:]

    def labels(self) -> np.ndarray:
        """Most frequent class per sampled pixel, -1 elsewhere."""
        lab = self.probs.argmax(axis=0)
        return np.where(self.valid[0] > 0, lab, -1)

    def restrict(self, pixel_mask: np.ndarray) -> "SparseProbMasks":
        keep = (np.asarray(pixel_mask, dtype=bool) & (self.valid[0] > 0))[None].astype(np.float32)
        return SparseProbMasks(self.probs * keep, keep)

    def n_valid(self) -> int:
        return int(self.valid.sum())


def rasterize_samples(samples: SampleTable, grid_dims: Tuple[int, int], vocabulary: Sequence[str]) -> SparseProbMasks:
    """Per-pixel class frequencies of the samples falling in each pixel."""
    H, W = grid_dims
    index = {c: i for i, c in enumerate(vocabulary)}
    codes = samples.codes.astype(str)
    unknown = sorted(set(codes) - set(index))
    if unknown:
        raise DataError(f"rasterize_samples: codes not in vocabulary: {unknown[:5]}")
    if len(samples) and (samples.x.min() < 0 or samples.y.min() < 0 or samples.x.max() >= W or samples.y.max() >= H):
        raise DataError(f"rasterize_samples: sample index outside the {H}x{W} grid")
    counts = np.zeros((len(vocabulary), H, W), dtype=np.float64)
    cls = np.array([index[c] for c in codes], dtype=int)
    np.add.at(counts, (cls, samples.y, samples.x), 1.0)
    total = counts.sum(axis=0, keepdims=True)
    probs = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
    return SparseProbMasks(probs, (total > 0).astype(np.float32))


# ---------------------------------------------------------------- spatial split

@dataclass
class SpatialSplit:
    block_roles: np.ndarray
    block_size: int
    grid_shape: Tuple[int, int]
    train_frac: float = 0.8
    validation_rect: Optional[Tuple[int, int, int, int]] = None

    def pixel_roles(self) -> np.ndarray:
        H, W = self.grid_shape
        b = self.block_size
        return np.repeat(np.repeat(self.block_roles, b, axis=0), b, axis=1)[:H, :W]

    def role_mask(self, role: str) -> np.ndarray:
        return self.pixel_roles() == ROLE_CODES[role]

    def to_json(self) -> dict:
        return {"block_size": self.block_size, "grid_shape": list(self.grid_shape), "train_frac": self.train_frac,
                "validation_rect": list(self.validation_rect) if self.validation_rect else None,
                "roles": [[ROLE_NAMES[int(r)] for r in row] for row in self.block_roles]}

    @classmethod
    def from_json(cls, d: dict) -> "SpatialSplit":
        roles = np.array([[ROLE_CODES[r] for r in row] for row in d["roles"]], dtype=np.int8)
        rect = tuple(d["validation_rect"]) if d.get("validation_rect") else None
        return cls(roles, int(d["block_size"]), tuple(d["grid_shape"]), float(d["train_frac"]), rect)


def make_spatial_split(grid_dims: Tuple[int, int], masks: SparseProbMasks, block: int = 15, train_frac: float = 0.8,
                       validation_rect: Optional[Tuple[int, int, int, int]] = None, rng=None) -> SpatialSplit:
    """Assign square pixel blocks to train / test / validation / empty.

    ``validation_rect`` is ``(row0, col0, row1, col1)`` with exclusive ends.
    Sampled blocks outside it are shuffled and the first
    ``round(train_frac * n)`` become train (at least one test block when
    there are two or more).
    """
    if block < 1:
        raise ValueError(f"block size must be >= 1, got {block}")
    H, W = grid_dims
    if masks.shape != (H, W):
        raise ShapeError(f"masks grid {masks.shape} != {grid_dims}")
    rng = np.random.default_rng(rng)
    nby, nbx = math.ceil(H / block), math.ceil(W / block)
    roles = np.full((nby, nbx), ROLE_EMPTY, dtype=np.int8)
    if validation_rect is not None:
        r0, c0, r1, c1 = validation_rect
        if r1 <= r0 or c1 <= c0:
            raise DataError(f"degenerate validation rectangle {validation_rect}")
        if r0 < 0 or c0 < 0 or r1 > H or c1 > W:
            raise DataError(f"validation rectangle {validation_rect} outside the {H}x{W} grid")
        rows = np.arange(nby)
        cols = np.arange(nbx)
        hit_r = (rows * block < r1) & ((rows + 1) * block > r0)
        hit_c = (cols * block < c1) & ((cols + 1) * block > c0)
        roles[np.ix_(hit_r, hit_c)] = ROLE_VALIDATION
    valid = masks.valid[0] > 0
    sampled = []
    for by in range(nby):
        for bx in range(nbx):
            if roles[by, bx] == ROLE_VALIDATION:
                continue
            if valid[by * block:(by + 1) * block, bx * block:(bx + 1) * block].any():
                sampled.append((by, bx))
    order = rng.permutation(len(sampled))
    n_train = int(round(train_frac * len(sampled)))
    if len(sampled) >= 2:
        n_train = min(max(n_train, 1), len(sampled) - 1)
    for rank, idx in enumerate(order):
        by, bx = sampled[idx]
        roles[by, bx] = ROLE_TRAIN if rank < n_train else ROLE_TEST
    return SpatialSplit(roles, block, (H, W), train_frac, tuple(validation_rect) if validation_rect else None)


# ---------------------------------------------------------------- patches

@dataclass(frozen=True)
class PatchConfig:
    patch: int = 160
    max_overlap: float = 0.8
    n_patches: int = 2600
    downscale_frac: float = 0.3
    rotate_frac: float = 0.25
    rotate_range: float = 12.0

    def __post_init__(self):
        if self.patch < 1 or self.n_patches < 1:
            raise ValueError("patch and n_patches must be positive")
        if not 0 <= self.max_overlap < 1:
            raise ValueError("max_overlap must lie in [0, 1)")
        for name in ("downscale_frac", "rotate_frac"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def stride(self) -> int:
        return max(1, math.ceil(self.patch * (1 - self.max_overlap) - 1e-9))


@dataclass
class PatchSet:
    aux: np.ndarray
    target: np.ndarray
    target_valid: np.ndarray
    cond: np.ndarray
    cond_valid: np.ndarray
    provenance: List[dict]
    role: str = "train"
    n_requested: int = 0

    def __len__(self) -> int:
        return self.aux.shape[0]

    @property
    def patch_size(self) -> int:
        return self.aux.shape[-1]

    def manifest(self) -> dict:
        return {"role": self.role, "n_requested": self.n_requested, "n_produced": len(self),
                "patch": self.patch_size, "provenance": self.provenance}


def downscale2(values: np.ndarray, probs: np.ndarray, valid: np.ndarray):
    """2x under-sampling: mean for rasters, valid-weighted mean of child distributions for masks."""
    C, H, W = values.shape
    h, w = H // 2, W // 2
    v = values[:, :2 * h, :2 * w].reshape(C, h, 2, w, 2).mean(axis=(2, 4))
    K = probs.shape[0]
    p = (probs * valid)[:, :2 * h, :2 * w].reshape(K, h, 2, w, 2).sum(axis=(2, 4))
    n = valid[:, :2 * h, :2 * w].reshape(1, h, 2, w, 2).sum(axis=(2, 4))
    p = np.divide(p, n, out=np.zeros_like(p), where=n > 0)
    s = p.sum(axis=0, keepdims=True)
    p = np.divide(p, s, out=np.zeros_like(p), where=s > 0)
    return v.astype(np.float32), p.astype(np.float32), (n > 0).astype(np.float32)


def _cut(arr: np.ndarray, r0: int, c0: int, size: int, angle: float, order: int) -> np.ndarray:
    if angle == 0:
        return arr[:, r0:r0 + size, c0:c0 + size].copy()
    half = (size - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(size) - half, np.arange(size) - half, indexing="ij")
    th = math.radians(angle)
    rows = r0 + half + math.cos(th) * ii - math.sin(th) * jj
    cols = c0 + half + math.sin(th) * ii + math.cos(th) * jj
    out = np.empty((arr.shape[0], size, size), dtype=arr.dtype)
    for c in range(arr.shape[0]):
        out[c] = map_coordinates(arr[c], [rows, cols], order=order, mode="constant", cval=0.0)
    return out


def extract_patch(sources: Dict[int, tuple], prov: dict, size: int):
    """Re-cut one patch from ``{scale: (values, probs, valid)}`` using its provenance."""
    values, probs, valid = sources[prov["scale"]]
    r0, c0 = prov["offset"]
    angle = prov["rotation_deg"]
    aux = _cut(values, r0, c0, size, angle, order=1)
    v = _cut(valid, r0, c0, size, angle, order=0)
    p = _cut(probs, r0, c0, size, angle, order=0) * v
    return aux, p, v


def patch_sources(stack: RasterStack, masks: SparseProbMasks, split: Optional[SpatialSplit] = None,
                  role: str = "train") -> Dict[int, tuple]:
    """Full-resolution and 2x under-sampled sources, masks restricted to ``role``."""
    if split is not None:
        masks = masks.restrict(split.role_mask(role))
    full = (stack.values, masks.probs, masks.valid)
    return {1: full, 2: downscale2(*full)}


def extract_patches(stack: RasterStack, masks: SparseProbMasks, split: Optional[SpatialSplit],
                    cfg: PatchConfig = PatchConfig(), rng=None, role: str = "train") -> PatchSet:
    """Sample square training tiles on a stride lattice.

    Only the pixels whose split role equals ``role`` are kept in the target
    masks. Origins are drawn without replacement, so fewer tiles than
    requested are produced when a lattice is exhausted; ``len(result)``
    reports the exact count.
    """
    rng = np.random.default_rng(rng)
    P = cfg.patch
    H, W = stack.height, stack.width
    if masks.shape != (H, W):
        raise ShapeError(f"masks grid {masks.shape} != raster grid {(H, W)}")
    if P > H or P > W:
        raise DataError(f"patch size {P} larger than grid {H}x{W}")
    n_down = int(round(cfg.downscale_frac * cfg.n_patches))
    if n_down and (P > H // 2 or P > W // 2):
        raise DataError(f"patch size {P} larger than the 2x under-sampled grid {H // 2}x{W // 2}")
    sources = patch_sources(stack, masks, split, role)
    stride = cfg.stride()
    plan = []
    for scale, n_req in ((1, cfg.n_patches - n_down), (2, n_down)):
        if n_req <= 0:
            continue
        h, w = sources[scale][0].shape[1:]
        lattice = [(r, c) for r in range(0, h - P + 1, stride) for c in range(0, w - P + 1, stride)]
        take = rng.permutation(len(lattice))[:n_req]
        plan.extend((scale, lattice[i]) for i in sorted(take))
    n = len(plan)
    n_rot = int(round(cfg.rotate_frac * n))
    rotated = set(rng.permutation(n)[:n_rot].tolist())
    angles = rng.uniform(-cfg.rotate_range, cfg.rotate_range, size=n)
    C, K = stack.n_channels, masks.n_classes
    aux = np.zeros((n, C, P, P), np.float32)
    target = np.zeros((n, K, P, P), np.float32)
    tvalid = np.zeros((n, 1, P, P), np.float32)
    prov = []
    for i, (scale, (r0, c0)) in enumerate(plan):
        angle = float(angles[i]) if i in rotated else 0.0
        p = {"offset": [int(r0), int(c0)], "scale": scale, "rotation_deg": angle}
        aux[i], target[i], tvalid[i] = extract_patch(sources, p, P)
        prov.append(p)
    return PatchSet(aux, target, tvalid, target.copy(), tvalid.copy(), prov, role, cfg.n_patches)


def epoch_conditioning_holdout(target: np.ndarray, valid: np.ndarray, holdout_rate: float, rng):
    """Hide a random share of each patch's sampled pixels from the conditioning input.

    Returns ``(cond_probs, cond_valid, sup_probs, sup_valid)``; supervision
    keeps every sampled pixel. Each patch keeps ``round((1 - rate) * n)`` of
    its ``n`` sampled pixels, except that a lone sampled pixel is always held
    out.
    """
    if not 0 < holdout_rate < 1:
        raise ValueError(f"holdout_rate must lie in (0, 1), got {holdout_rate}")
    rng = np.random.default_rng(rng)
    target = np.asarray(target)
    valid = np.asarray(valid)
    single = target.ndim == 3
    if single:
        target, valid = target[None], valid[None]
    cond_valid = np.zeros_like(valid)
    for b in range(valid.shape[0]):
        flat = np.flatnonzero(valid[b, 0] > 0)
        n = flat.size
        n_keep = 0 if n <= 1 else int(math.floor((1 - holdout_rate) * n + 0.5))
        keep = flat[rng.permutation(n)[:n_keep]]
        cond_valid[b, 0].flat[keep] = 1
    cond = target * cond_valid
    out = (cond, cond_valid, target, valid)
    return tuple(o[0] for o in out) if single else out

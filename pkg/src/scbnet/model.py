"""Two-stage Attention Res-Unet.

The first U-net turns auxiliary rasters into a full-resolution embedding.
The second consumes that embedding concatenated with sparse class-probability
masks and emits per-pixel class probabilities. DropBlock is only ever active
in the first network.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .blocks import (DropBlockConfig, attention_channels, attention_gate, attention_gate_params, bn, bn_params,
                     conv, conv_params, dropblock, effective_block_size, he_normal, residual_block,
                     residual_block_params)
from .exceptions import DataError, ShapeError

MODES = ("train", "mc_sample", "deterministic")
CHECKPOINT_MAGIC = b"SCBNCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    n_aux_channels: int
    n_classes: int
    depth: int = 4
    base_filters: int = 16
    embed_channels: int = 16
    patch_size: int = 160
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_aux_channels < 1:
            raise ValueError(f"n_aux_channels must be >= 1, got {self.n_aux_channels}")
        if self.base_filters < 1 or self.embed_channels < 1:
            raise ValueError("base_filters and embed_channels must be >= 1")
        if self.patch_size % (2 ** self.depth):
            raise ValueError(f"patch_size {self.patch_size} is not divisible by 2**depth = {2 ** self.depth}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        db = d.get("dropblock", {})
        d["dropblock"] = db if isinstance(db, DropBlockConfig) else DropBlockConfig(**db)
        return cls(**d)


@dataclass
class ModelCheckpoint:
    arch: ArchConfig
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    classes: List[str]
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    history: List[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelCheckpoint":
        return copy.deepcopy(self)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def _unet_params(rng, prefix: str, cfg: ArchConfig, in_channels: int, out_channels: int):
    params, buffers = {}, {}

    def res(name, cin, cout):
        p, b = residual_block_params(rng, f"{prefix}.{name}", cin, cout)
        params.update(p)
        buffers.update(b)

    cin = in_channels
    for level in range(cfg.depth):
        res(f"enc{level}", cin, cfg.filters(level))
        cin = cfg.filters(level)
    res("bottleneck", cin, cfg.filters(cfg.depth))
    for level in reversed(range(cfg.depth)):
        f, fg = cfg.filters(level), cfg.filters(level + 1)
        params.update(conv_params(rng, f"{prefix}.up{level}.conv", fg, f, 3))
        p, b = bn_params(f"{prefix}.up{level}.bn", f)
        params.update(p)
        buffers.update(b)
        params.update(attention_gate_params(rng, f"{prefix}.att{level}", f, fg, attention_channels(f)))
        res(f"dec{level}", 2 * f, f)
    params.update(conv_params(rng, f"{prefix}.head", cfg.filters(0), out_channels, 1))
    return params, buffers


def build_model(cfg: ArchConfig, rng, classes: Optional[Sequence[str]] = None) -> ModelCheckpoint:
    """Freshly initialized checkpoint (He-normal convs, unit batch-norm)."""
    rng = np.random.default_rng(rng)
    if classes is None:
        classes = [str(i) for i in range(cfg.n_classes)]
    classes = list(classes)
    if len(classes) != cfg.n_classes:
        raise ValueError(f"{len(classes)} class codes given for n_classes={cfg.n_classes}")
    p1, b1 = _unet_params(rng, "net1", cfg, cfg.n_aux_channels, cfg.embed_channels)
    p2, b2 = _unet_params(rng, "net2", cfg, cfg.embed_channels + cfg.n_classes, cfg.n_classes)
    return ModelCheckpoint(arch=cfg, params={**p1, **p2}, buffers={**b1, **b2}, classes=classes)


def expected_shapes(cfg: ArchConfig) -> Dict[str, Tuple[int, ...]]:
    ck = build_model(cfg, 0)
    return {k: v.shape for k, v in ck.params.items()}


def validate_checkpoint(ckpt: ModelCheckpoint) -> None:
    expected = expected_shapes(ckpt.arch)
    missing = sorted(set(expected) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(expected))
    if missing or extra:
        raise DataError(f"checkpoint parameter set mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for k, shape in expected.items():
        if ckpt.params[k].shape != shape:
            raise DataError(f"parameter {k!r} has shape {ckpt.params[k].shape}, arch requires {shape}")
    if len(ckpt.classes) != ckpt.arch.n_classes:
        raise DataError(f"class vocabulary has {len(ckpt.classes)} entries, arch has {ckpt.arch.n_classes}")


# ---------------------------------------------------------------- forward

def _unet(x: Tensor, p, buffers, prefix: str, cfg: ArchConfig, training: bool,
          drop_active: bool, rng) -> Tensor:
    def drop(t: Tensor) -> Tensor:
        if not drop_active:
            return t
        bs = effective_block_size(cfg.dropblock.block_size, t.shape[2], t.shape[3])
        return dropblock(t, DropBlockConfig(bs, cfg.dropblock.drop_rate), rng, True)

    skips = []
    for level in range(cfg.depth):
        x = drop(residual_block(x, p, buffers, f"{prefix}.enc{level}", training))
        skips.append(x)
        x = ad.maxpool2d(x, 2, 2)
    x = drop(residual_block(x, p, buffers, f"{prefix}.bottleneck", training))
    for level in reversed(range(cfg.depth)):
        gate = x
        up = conv(ad.upsample_nearest2x(x), p, f"{prefix}.up{level}.conv", padding=1)
        up = ad.relu(bn(up, p, buffers, f"{prefix}.up{level}.bn", training))
        att = attention_gate(skips[level], gate, p, f"{prefix}.att{level}")
        x = drop(residual_block(ad.concat_channels(up, att), p, buffers, f"{prefix}.dec{level}", training))
    return conv(x, p, f"{prefix}.head")


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def forward(ckpt: ModelCheckpoint, aux, masks, mode: str = "deterministic", rng=None,
            tensors: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Class probabilities of shape (B, n_classes, H, W).

    ``tensors`` optionally supplies the parameter tensors (e.g. with
    ``requires_grad=True`` for training); otherwise the checkpoint arrays are
    wrapped as constants. ``mode='train'`` updates batch-norm running
    statistics in ``ckpt.buffers``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = ckpt.arch
    if tensors is None:
        tensors = {k: Tensor(v) for k, v in ckpt.params.items()}
    dtype = next(iter(tensors.values())).dtype
    aux = _as_input(aux, dtype)
    masks = _as_input(masks, dtype)
    if aux.data.ndim != 4 or masks.data.ndim != 4:
        raise ShapeError(f"aux and masks must be 4-D, got {aux.shape} and {masks.shape}")
    B, C, H, W = aux.shape
    if C != cfg.n_aux_channels:
        raise ShapeError(f"aux has {C} channels, model expects {cfg.n_aux_channels}")
    if masks.shape[0] != B:
        raise ShapeError(f"mask batch {masks.shape[0]} != aux batch {B}")
    if masks.shape[1] != cfg.n_classes or masks.shape[2:] != (H, W):
        raise ShapeError(f"masks shape {masks.shape} incompatible with ({B}, {cfg.n_classes}, {H}, {W})")
    k = 2 ** cfg.depth
    if H % k or W % k:
        raise ShapeError(f"spatial size {H}x{W} not divisible by 2**depth = {k}")
    training = mode == "train"
    drop_active = mode == "train" or (mode == "mc_sample" and cfg.dropblock.enabled_at_inference)
    if drop_active and rng is None:
        raise ValueError(f"mode {mode!r} needs an rng for DropBlock")
    rng = np.random.default_rng(rng) if drop_active else None
    emb = _unet(aux, tensors, ckpt.buffers, "net1", cfg, training, drop_active, rng)
    logits = _unet(ad.concat_channels(emb, masks), tensors, ckpt.buffers, "net2", cfg, training, False, None)
    return ad.softmax_channels(logits)


def zero_masks(batch: int, n_classes: int, height: int, width: int, dtype=np.float32) -> np.ndarray:
    return np.zeros((batch, n_classes, height, width), dtype=dtype)


# ---------------------------------------------------------------- transfer learning

HEAD_PARAMS = ("net2.head.w", "net2.head.b")
MASK_INPUT_PARAMS = ("net2.enc0.conv1.w", "net2.enc0.proj.w")


def reinit_head(ckpt: ModelCheckpoint, new_n_classes: int, rng, classes: Optional[Sequence[str]] = None) -> ModelCheckpoint:
    """Copy of ``ckpt`` re-targeted to ``new_n_classes`` classes.

    The classification head is re-drawn and the mask-input slice of the
    second network's first convolutions is re-drawn (the embedding slice is
    kept). Everything else is copied; Adam moments of touched tensors reset.
    """
    if new_n_classes < 2:
        raise ValueError(f"new_n_classes must be >= 2, got {new_n_classes}")
    rng = np.random.default_rng(rng)
    old = ckpt.arch
    arch = ArchConfig(**{**{f: getattr(old, f) for f in old.__dataclass_fields__}, "n_classes": new_n_classes})
    if classes is None:
        classes = [str(i) for i in range(new_n_classes)]
    classes = list(classes)
    if len(classes) != new_n_classes:
        raise ValueError(f"{len(classes)} class codes given for {new_n_classes} classes")
    new = ModelCheckpoint(arch=arch, params={k: v.copy() for k, v in ckpt.params.items()},
                          buffers={k: v.copy() for k, v in ckpt.buffers.items()}, classes=classes,
                          adam=copy.deepcopy(ckpt.adam), epoch=0, history=[],
                          meta={**ckpt.meta, "reinit_from_classes": list(ckpt.classes)})
    f0, emb = arch.filters(0), arch.embed_channels
    head = conv_params(rng, "net2.head", f0, new_n_classes, 1)
    new.params.update(head)
    for name in MASK_INPUT_PARAMS:
        if name not in ckpt.params:
            continue
        src = ckpt.params[name]
        fresh = he_normal(rng, (src.shape[0], emb + new_n_classes) + src.shape[2:])
        fresh[:, :emb] = src[:, :emb]
        new.params[name] = fresh
    for name in HEAD_PARAMS + MASK_INPUT_PARAMS:
        new.adam.reset(name)
    validate_checkpoint(new)
    return new


# ---------------------------------------------------------------- serialization

def _adam_dict(adam: AdamState) -> dict:
    return {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t}


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Write magic, u64 header length, JSON header, then little-endian f32 blobs."""
    entries = []
    blobs = []
    offset = 0

    def add(kind, name, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        blobs.append(data)
        offset += len(data)

    for name in sorted(ckpt.params):
        add("param", name, ckpt.params[name])
    for name in sorted(ckpt.buffers):
        add("buffer", name, ckpt.buffers[name])
    for name in sorted(ckpt.adam.m):
        add("adam_m", name, ckpt.adam.m[name])
        add("adam_v", name, ckpt.adam.v[name])
    header = {"version": CHECKPOINT_VERSION, "arch": ckpt.arch.to_dict(), "classes": ckpt.classes,
              "epoch": ckpt.epoch, "history": ckpt.history, "meta": ckpt.meta,
              "adam": _adam_dict(ckpt.adam), "tensors": entries}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if "version" not in header:
        raise DataError(f"{path}: checkpoint header has no version field")
    if header["version"] != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header['version']}")
    base = 16 + hlen
    params, buffers = {}, {}
    adam = AdamState(**header["adam"])
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=start).astype(np.float32)
        arr = arr.reshape(e["shape"])
        target = {"param": params, "buffer": buffers, "adam_m": adam.m, "adam_v": adam.v}[e["kind"]]
        target[e["name"]] = arr
    ckpt = ModelCheckpoint(arch=ArchConfig.from_dict(header["arch"]), params=params, buffers=buffers,
                           classes=list(header["classes"]), adam=adam, epoch=header["epoch"],
                           history=header["history"], meta=header.get("meta", {}))
    validate_checkpoint(ckpt)
    return ckpt

"""On-disk formats: GRD rasters, CSV grids, CSV sample tables and JSON manifests.

GRD layout (all little-endian)::

    12 bytes  magic  b"SCBNET-GRD\\0\\0"
    u32       version
    u32       width, height, channels
    f32       nodata
    channels x (u32 byte length + UTF-8 name)
    channels x height x width f32 values, channel-major, row-major
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DataError

GRD_MAGIC = b"SCBNET-GRD\x00\x00"
GRD_VERSION = 1


def write_grd(path, values: np.ndarray, names: Optional[Sequence[str]] = None, nodata: float = -9999.0) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise DataError(f"GRD values must be (channels, height, width), got shape {values.shape}")
    c, h, w = values.shape
    if names is None:
        names = [f"band{i}" for i in range(c)]
    names = list(names)
    if len(names) != c:
        raise DataError(f"{len(names)} channel names for {c} channels")
    with open(path, "wb") as fh:
        fh.write(GRD_MAGIC)
        fh.write(struct.pack("<IIIIf", GRD_VERSION, w, h, c, float(nodata)))
        for name in names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(values).tobytes())


def read_grd(path) -> Tuple[np.ndarray, List[str], float]:
    raw = Path(path).read_bytes()
    if raw[:12] != GRD_MAGIC:
        raise DataError(f"{path}: not a GRD file (bad magic)")
    version, w, h, c, nodata = struct.unpack("<IIIIf", raw[12:32])
    if version != GRD_VERSION:
        raise DataError(f"{path}: unsupported GRD version {version}")
    pos = 32
    names = []
    for _ in range(c):
        (n,) = struct.unpack("<I", raw[pos:pos + 4])
        names.append(raw[pos + 4:pos + 4 + n].decode("utf-8"))
        pos += 4 + n
    expected = c * h * w * 4
    if len(raw) - pos != expected:
        raise DataError(f"{path}: expected {expected} bytes of raster data, found {len(raw) - pos}")
    values = np.frombuffer(raw, dtype="<f4", offset=pos).reshape(c, h, w).astype(np.float32)
    return values, names, float(nodata)


def read_csv_grid(path) -> np.ndarray:
    """One grid row per line, comma separated."""
    grid = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return grid.astype(np.float32)


def write_csv_grid(path, grid: np.ndarray) -> None:
    np.savetxt(path, np.asarray(grid), delimiter=",", fmt="%.9g")


def read_samples_csv(path) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:3]] != ["x", "y", "code"]:
            raise DataError(f"{path}: samples CSV must have header x,y,code")
        xs, ys, codes = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                xs.append(int(row["x"]))
                ys.append(int(row["y"]))
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: non-integer pixel index") from None
            codes.append(row["code"].strip())
    return np.asarray(xs, dtype=int), np.asarray(ys, dtype=int), codes


def write_samples_csv(path, x, y, codes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "code"])
        for row in zip(np.asarray(x).tolist(), np.asarray(y).tolist(), codes):
            writer.writerow(row)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

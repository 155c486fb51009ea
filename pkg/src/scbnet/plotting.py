"""PNG rendering of class maps, uncertainty maps and history curves."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

# 20-colour categorical palette; classes beyond it cycle
BASE_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
)
UNSAMPLED_COLOUR = "#ffffff"


def default_palette(classes: Sequence[str]) -> Dict[str, str]:
    return {c: BASE_PALETTE[i % len(BASE_PALETTE)] for i, c in enumerate(classes)}


def vocabulary_document(classes: Sequence[str], palette: Optional[Dict[str, str]] = None) -> dict:
    """Class vocabulary file contents: ordered codes plus a fixed colour per code."""
    classes = list(classes)
    palette = dict(palette or default_palette(classes))
    missing = [c for c in classes if c not in palette]
    if missing:
        raise ValueError(f"palette has no colour for {missing}")
    return {"classes": classes, "palette": {c: palette[c] for c in classes}}


def _rgb(hex_colour: str) -> tuple:
    h = hex_colour.lstrip("#")
    if len(h) != 6:
        raise ValueError(f"bad colour {hex_colour!r}")
    return tuple(int(h[i:i + 2], 16) for i in (0, 2, 4))


def _scaled(img: Image.Image, scale: int) -> Image.Image:
    if scale == 1:
        return img
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def render_classes(labels: np.ndarray, vocabulary: dict, path, scale: int = 1) -> None:
    """Index map (-1 = unsampled) to an RGB PNG using the vocabulary palette."""
    labels = np.asarray(labels)
    classes: List[str] = vocabulary["classes"]
    lut = np.array([_rgb(vocabulary["palette"][c]) for c in classes] + [_rgb(UNSAMPLED_COLOUR)], dtype=np.uint8)
    if labels.size and labels.max() >= len(classes):
        raise ValueError("label index outside the vocabulary")
    idx = np.where(labels < 0, len(classes), labels).astype(int)
    _scaled(Image.fromarray(lut[idx], "RGB"), scale).save(path)


def render_scalar(values: np.ndarray, path, vmin: Optional[float] = None, vmax: Optional[float] = None,
                  scale: int = 1) -> None:
    """Grayscale PNG (white = high), used for standard-deviation maps."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(np.nanmin(v)) if vmin is None else vmin
    hi = float(np.nanmax(v)) if vmax is None else vmax
    norm = np.zeros_like(v) if hi <= lo else np.clip((v - lo) / (hi - lo), 0, 1)
    _scaled(Image.fromarray(np.round(norm * 255).astype(np.uint8), "L"), scale).save(path)


def render_misclassification(grid: np.ndarray, path, scale: int = 1) -> None:
    """0 unsampled (white), 1 correct (green), 2 wrong (red)."""
    lut = np.array([[255, 255, 255], [44, 160, 44], [214, 39, 40]], dtype=np.uint8)
    _scaled(Image.fromarray(lut[np.asarray(grid, dtype=int)], "RGB"), scale).save(path)


def render_curves(series: Dict[str, Sequence[float]], path, size=(480, 320)) -> None:
    """Line plot of per-epoch metrics on a shared [min, max] axis."""
    W, H = size
    img = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(img)
    pad = 30
    vals = [float(v) for s in series.values() for v in s if np.isfinite(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    draw.rectangle([pad, 10, W - 10, H - pad], outline="black")
    for k, (name, ys) in enumerate(series.items()):
        ys = [float(y) for y in ys]
        colour = BASE_PALETTE[k % len(BASE_PALETTE)]
        n = max(len(ys) - 1, 1)
        pts = [(pad + (W - 10 - pad) * i / n, H - pad - (H - pad - 10) * (y - lo) / (hi - lo))
               for i, y in enumerate(ys) if np.isfinite(y)]
        if len(pts) > 1:
            draw.line(pts, fill=colour, width=2)
        draw.text((pad + 5, 12 + 12 * k), name, fill=colour)
    draw.text((2, H - pad - 6), f"{lo:.2f}", fill="black")
    draw.text((2, 8), f"{hi:.2f}", fill="black")
    img.save(path)

"""Writing anomaly maps, overlays and score tables to disk."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
from PIL import Image, PngImagePlugin

from .datasets import denormalize

SCALE_KEY = "hfrae-scale"
OVERLAY_CMAP = "jet"
OVERLAY_ALPHA = 0.5


def save_map_png16(anomaly_map: np.ndarray, path, scale: float) -> Path:
    """Quantize ``[0, scale]`` onto the full 16-bit range; ``scale`` goes into a PNG text chunk."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    q = np.clip(np.rint(np.asarray(anomaly_map, dtype=np.float64) / scale * 65535.0), 0, 65535)
    info = PngImagePlugin.PngInfo()
    info.add_text(SCALE_KEY, repr(float(scale)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q.astype(np.uint16)).save(path, pnginfo=info)
    return path


def load_map_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        scale = float(im.text.get(SCALE_KEY, "1.0"))
        q = np.asarray(im, dtype=np.float64)
    return q / 65535.0 * scale


def save_overlay(
    image: np.ndarray,
    anomaly_map: np.ndarray,
    path,
    vrange: Optional[Tuple[float, float]] = None,
    alpha: float = OVERLAY_ALPHA,
) -> Path:
    """Colour the map and alpha-blend it over the (de-standardized) input image.

    Presentation only; by default the colour range is the map's own min..max.
    """
    import matplotlib

    rgb = denormalize(image)
    lo, hi = vrange if vrange is not None else (float(anomaly_map.min()), float(anomaly_map.max()))
    norm = (anomaly_map - lo) / (hi - lo) if hi > lo else np.zeros_like(anomaly_map)
    heat = matplotlib.colormaps[OVERLAY_CMAP](np.clip(norm, 0, 1))[..., :3]
    blended = (1 - alpha) * rgb + alpha * heat
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(blended * 255), 0, 255).astype(np.uint8)).save(path)
    return path


def write_scores_csv(rows: Iterable[Tuple[str, float, str]], path) -> Path:
    """Rows of ``(image_path, score, label)``; label may be empty for unlabeled inference."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "score", "label"])
        for image_path, score, label in rows:
            writer.writerow([image_path, repr(float(score)), label])
    return path

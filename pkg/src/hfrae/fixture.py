"""Seeded synthetic dataset in the MVTec AD layout, for desk-scale verification.

Normal images are a procedural texture (oriented sinusoidal gratings plus
fine noise, random phase per image). Defect images carry painted blobs or
scratches, and every painted pixel is written to the ground-truth mask.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

DEFECT_TYPES = ("blob", "scratch")


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    base = np.array([0.55, 0.45, 0.35])
    # category-wide frequencies/orientations, per-image phase
    for freq, angle, amp in ((9.0, 0.3, 0.12), (17.0, 1.9, 0.08), (5.0, 1.1, 0.06)):
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        img += amp * wave[..., None]
    img += base
    img += rng.normal(0.0, 0.02, size=img.shape)
    return img


def _blob(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
    ry, rx = rng.uniform(0.05 * size, 0.12 * size, size=2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _scratch(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    p0 = rng.uniform(0.15 * size, 0.85 * size, size=2)
    angle = rng.uniform(0, np.pi)
    length = rng.uniform(0.3 * size, 0.5 * size)
    p1 = np.clip(p0 + length * np.array([np.sin(angle), np.cos(angle)]), 0, size - 1)
    half_width = rng.uniform(0.012 * size, 0.025 * size)
    d = p1 - p0
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(d @ d, 1e-9), 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return dist <= half_width


def _paint(rng: np.random.Generator, img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    color = rng.uniform(0.05, 0.95, size=3)
    out = img.copy()
    out[mask] = color + rng.normal(0.0, 0.02, size=(int(mask.sum()), 3))
    return out


def _save_rgb(img: np.ndarray, path: Path):
    Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), "RGB").save(path)


def make_fixture(
    out_dir,
    seed: int = 7,
    category: str = "synthetic",
    n_train: int = 50,
    n_good: int = 20,
    n_defect: int = 20,
    image_size: int = 128,
) -> Path:
    """Write the dataset under ``out_dir/category`` and return that directory.

    Defect images alternate between blob and scratch defect types. The same
    seed always produces byte-identical files.
    """
    out = Path(out_dir) / category
    try:
        for sub in ["train/good", "test/good"] + [f"{d}/{t}" for d in ("test", "ground_truth") for t in DEFECT_TYPES]:
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create fixture directories under {out}: {exc}") from exc

    rng = np.random.default_rng(seed)
    for i in range(n_train):
        _save_rgb(_texture(rng, image_size), out / "train" / "good" / f"{i:03d}.png")
    for i in range(n_good):
        _save_rgb(_texture(rng, image_size), out / "test" / "good" / f"{i:03d}.png")
    for i in range(n_defect):
        kind = DEFECT_TYPES[i % len(DEFECT_TYPES)]
        img = _texture(rng, image_size)
        mask = _blob(rng, image_size) if kind == "blob" else _scratch(rng, image_size)
        _save_rgb(_paint(rng, img, mask), out / "test" / kind / f"{i:03d}.png")
        Image.fromarray(mask.astype(np.uint8) * 255, "L").save(out / "ground_truth" / kind / f"{i:03d}_mask.png")
    return out

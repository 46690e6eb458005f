"""Image carrier helpers: validation, 8-bit PNG I/O and synthetic test scenes."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class ImageError(ValueError):
    pass


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Return ``img`` as float64 H×W×3 after checking the [0, 1] contract."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"{name}: expected H×W×3 array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageError(f"{name}: empty image")
    if not np.all(np.isfinite(arr)):
        raise ImageError(f"{name}: non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageError(f"{name}: values outside [0, 1]")
    return arr


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def dequantize(img8: np.ndarray) -> np.ndarray:
    return img8.astype(np.float64) / 255.0


def save_png(img: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    PILImage.fromarray(quantize(img), mode="RGB").save(path, format="PNG")
    return path


def load_image(path: str | Path) -> np.ndarray:
    """Load any PIL-readable file as a float H×W×3 image in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return dequantize(arr)


def synthetic_scene(size: int = 64, seed: int = 0) -> np.ndarray:
    """Piecewise-smooth colour scene: a shaded background plus a few discs and boxes.

    Used as the hidden clean image in desk-scale experiments.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    base = rng.uniform(0.2, 0.8, size=3)
    grad = rng.uniform(-0.3, 0.3, size=(2, 3))
    img = base + yy[..., None] * grad[0] + xx[..., None] * grad[1]
    for _ in range(rng.integers(3, 6)):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            hy, hx = rng.uniform(0.08, 0.25, size=2)
            mask = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        img[mask] = color
    return np.clip(img, 0.0, 1.0)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)

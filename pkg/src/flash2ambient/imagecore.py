"""Pixel containers, the flash/ambient attention map, resizing and paired augmentation.

Images are ``numpy`` arrays of shape ``(H, W, C)`` with float values in [0, 1].
Attention maps are ``(H, W)`` arrays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

CANONICAL_LONG = 320
CANONICAL_SHORT = 240


class InvalidPairError(ValueError):
    """Two images (or an image and a map) do not have matching dimensions."""


class PixelRangeError(ValueError):
    """Pixel values are non-finite or outside [0, 1]."""


class InvalidAugmentationError(ValueError):
    """Crop window does not fit inside the image."""


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an ``(H, W, C)`` image in [0, 1] and return it as a float array."""
    img = np.asarray(img)
    if img.ndim != 3 or min(img.shape) < 1:
        raise ValueError(f"{name}: expected non-empty (H, W, C) array, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float64)
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise PixelRangeError(f"{name}: values must be finite and within [0, 1]")
    return img


def attention_map(ambient: np.ndarray, flash: np.ndarray) -> np.ndarray:
    """Per-pixel agreement between an ambient and a flash image.

    ``M(i, j) = 1 - mean_k |ambient(i, j, k) - flash(i, j, k)|``. The map is 1 where the
    two photographs agree and falls towards 0 where flash lighting changed the pixel.
    """
    ambient = check_image(ambient, "ambient")
    flash = check_image(flash, "flash")
    if ambient.shape != flash.shape:
        raise InvalidPairError(f"shape mismatch: ambient {ambient.shape} vs flash {flash.shape}")
    m = 1.0 - np.abs(ambient - flash).mean(axis=2)
    # float rounding in the mean can leave values a hair outside [0, 1]
    return np.clip(m, 0.0, 1.0)


def apply_attention(img, attention):
    """Multiply ``img`` by ``attention`` broadcast over channels.

    Works for a single ``(H, W, C)`` image with an ``(H, W)`` map, and for
    channel-first batches ``(N, C, H, W)`` with an ``(N, H, W)`` or ``(N, 1, H, W)``
    map (numpy arrays or torch tensors alike).
    """
    if img.ndim == 3:
        if tuple(attention.shape) != tuple(img.shape[:2]):
            raise InvalidPairError(f"map {tuple(attention.shape)} vs image {tuple(img.shape)}")
        return img * attention[..., None]
    if img.ndim == 4:
        if attention.ndim == 3:
            attention = attention[:, None]
        n, _, h, w = img.shape
        if tuple(attention.shape) != (n, 1, h, w):
            raise InvalidPairError(f"map {tuple(attention.shape)} vs batch {tuple(img.shape)}")
        return img * attention
    raise InvalidPairError(f"unsupported image rank {img.ndim}")


def canonical_size(height: int, width: int) -> tuple[int, int]:
    """Return the canonical ``(height, width)`` for an image of the given size."""
    if width >= height:
        return CANONICAL_SHORT, CANONICAL_LONG
    return CANONICAL_LONG, CANONICAL_SHORT


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and no anti-alias prefilter."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    out = top * (1 - fr) + bottom * fr
    return np.clip(out, 0.0, 1.0)


def resize_canonical(img: np.ndarray) -> np.ndarray:
    """Resize to 320x240 (landscape, width >= height) or 240x320 (portrait)."""
    img = check_image(img)
    return resize_bilinear(img, *canonical_size(*img.shape[:2]))


@dataclass(frozen=True)
class PairedAugmentation:
    crop_origin: tuple[int, int]
    crop_size: int = 224
    hflip: bool = False
    rng_seed: int | None = None


def sample_augmentation(
    height: int, width: int, crop_size: int, rng: np.random.Generator, seed: int | None = None
) -> PairedAugmentation:
    """Draw a uniformly placed square crop and a fair-coin horizontal flip."""
    if crop_size > height or crop_size > width:
        raise InvalidAugmentationError(f"crop {crop_size} does not fit in {height}x{width}")
    row = int(rng.integers(0, height - crop_size + 1))
    col = int(rng.integers(0, width - crop_size + 1))
    return PairedAugmentation((row, col), crop_size, bool(rng.integers(0, 2)), seed)


def augment_one(img: np.ndarray, aug: PairedAugmentation) -> np.ndarray:
    """Crop (and optionally mirror) an ``(H, W, ...)`` array."""
    r, c = aug.crop_origin
    s = aug.crop_size
    h, w = img.shape[:2]
    if r < 0 or c < 0 or r + s > h or c + s > w:
        raise InvalidAugmentationError(f"crop at {aug.crop_origin} size {s} exceeds {h}x{w}")
    out = img[r : r + s, c : c + s]
    if aug.hflip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def paired_augment(
    flash: np.ndarray, ambient: np.ndarray, aug: PairedAugmentation
) -> tuple[np.ndarray, np.ndarray]:
    if flash.shape != ambient.shape:
        raise InvalidPairError(f"shape mismatch: flash {flash.shape} vs ambient {ambient.shape}")
    return augment_one(flash, aug), augment_one(ambient, aug)


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG/JPEG as an RGB float image in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(to_uint8(img)).save(path)


def save_attention_png(attention: np.ndarray, path: str | Path) -> None:
    """Write a map as a single-channel 8-bit PNG holding ``round(255 * M)``."""
    PILImage.fromarray(to_uint8(attention)).save(path)

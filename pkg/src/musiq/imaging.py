"""Image decoding, aspect-ratio-preserving resizing, padding and flipping.

Images are float64 numpy arrays of shape (H, W, 3) with values in [0, 1].
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import correlate1d


class DecodeError(ValueError):
    pass


def _check(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    return img


def decode(data: bytes) -> np.ndarray:
    """Decode PNG/JPEG bytes into an (H, W, 3) array scaled to [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                arr = np.repeat(arr[..., None], 3, axis=2)
                return np.clip(arr, 0.0, 1.0)
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(str(exc)) from exc
    return arr


def load_image(path: Union[str, Path]) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return decode(data)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: Union[str, Path], img: np.ndarray) -> None:
    """Write an (H, W, 3) or (H, W) array in [0, 1]; format follows the suffix."""
    Image.fromarray(to_uint8(img)).save(str(path))


def save_gray(path: Union[str, Path], values: np.ndarray) -> None:
    """Write an (H, W) uint8 array as PNG or PGM (by suffix)."""
    values = np.asarray(values)
    if values.dtype != np.uint8:
        raise TypeError("grayscale export expects uint8 values")
    Image.fromarray(values, mode="L").save(str(path))


def resized_extent(H: int, W: int, L: int) -> Tuple[int, int, float]:
    """Output (h, w, alpha) for fixing the longer side to ``L``."""
    if L < 1:
        raise ValueError("target side must be >= 1")
    alpha = L / max(H, W)
    h = max(1, int(math.floor(alpha * H + 0.5)))
    w = max(1, int(math.floor(alpha * W + 0.5)))
    if H >= W:
        h = L
    if W >= H:
        w = L
    return h, w, alpha


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres; identity when n_in == n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = img.shape[:2]
    r0, r1, fr = _bilinear_axis(H, h)
    c0, c1, fc = _bilinear_axis(W, w)
    rows = img[r0] * (1 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    return rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]


def arp_resize(img: np.ndarray, L: int) -> Tuple[np.ndarray, float]:
    """Aspect-ratio-preserving resize so that the longer side equals ``L``.

    Downscaling first applies a separable Gaussian low-pass with
    ``sigma = 0.5 * (1/alpha - 1)`` (edge-replicated borders), then samples
    bilinearly.
    """
    _check(img)
    H, W = img.shape[:2]
    h, w, alpha = resized_extent(H, W, L)
    if h == H and w == W:
        return img.copy(), alpha
    src = img
    if alpha < 1.0:
        sigma = 0.5 * (1.0 / alpha - 1.0)
        k = gaussian_kernel(sigma)
        src = correlate1d(src, k, axis=0, mode="nearest")
        src = correlate1d(src, k, axis=1, mode="nearest")
    out = bilinear_resize(src, h, w)
    return np.clip(out, 0.0, 1.0), alpha


def pad_to_patch_multiple(img: np.ndarray, P: int) -> np.ndarray:
    if P < 1:
        raise ValueError("patch size must be >= 1")
    H, W = img.shape[:2]
    Hp, Wp = -(-H // P) * P, -(-W // P) * P
    if (Hp, Wp) == (H, W):
        return img
    out = np.zeros((Hp, Wp) + img.shape[2:], dtype=img.dtype)
    out[:H, :W] = img
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


@dataclass
class ScaledImage:
    image: np.ndarray
    L: int
    alpha: float


@dataclass
class MultiScaleRepresentation:
    native: np.ndarray
    variants: List[ScaledImage]


def multiscale(img: np.ndarray, scales: Sequence[int]) -> MultiScaleRepresentation:
    _check(img)
    variants = []
    for L in scales:
        out, alpha = arp_resize(img, L)
        variants.append(ScaledImage(out, L, alpha))
    return MultiScaleRepresentation(img, variants)

"""Deterministic 8-bit image transforms: CLAHE, Gabor, gamma/tone curve, noise + blur.

All float-to-byte conversions round half up. Convolutions use reflect-101
borders (``scipy.ndimage`` mode ``"mirror"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError


def to_byte(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half up."""
    return np.floor(np.clip(values, 0.0, 255.0) + 0.5).astype(np.uint8)


def _check_image(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    return arr


# --- CLAHE ----------------------------------------------------------------

def _clipped_lut(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """Equalization lookup (floats in [0, 255]) from a clipped tile histogram.

    The clip threshold is relative, as in OpenCV: ``clip_limit * area / 256``
    counts per bin. Excess counts are spread evenly over all 256 bins.
    """
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    area = tile.size
    threshold = clip_limit * area / 256.0
    excess = np.maximum(hist - threshold, 0.0).sum()
    if excess > 0:
        hist = np.minimum(hist, threshold) + excess / 256.0
    cdf = np.cumsum(hist)
    return 255.0 * cdf / area


def _tile_axis(n_pix: int, tiles: int):
    edges = [round(i * n_pix / tiles) for i in range(tiles + 1)]
    centers = np.array([(edges[i] + edges[i + 1] - 1) / 2.0 for i in range(tiles)])
    coords = np.arange(n_pix, dtype=np.float64)
    if tiles == 1:
        zeros = np.zeros(n_pix, dtype=np.intp)
        return edges, zeros, zeros, np.zeros(n_pix)
    lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, tiles - 2)
    hi = lo + 1
    frac = np.clip((coords - centers[lo]) / (centers[hi] - centers[lo]), 0.0, 1.0)
    return edges, lo, hi, frac


def clahe(img, clip_limit: float = 2.0, tiles: int | tuple[int, int] = 8) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization with bilinear tile blending."""
    arr = _check_image(img).astype(np.uint8)
    ty, tx = (tiles, tiles) if isinstance(tiles, int) else tiles
    if ty < 1 or tx < 1:
        raise ConfigError("tile grid must be at least 1x1")
    if clip_limit <= 0:
        raise ConfigError("clip_limit must be positive")
    h, w = arr.shape
    if ty > h or tx > w:
        raise ConfigError(f"tile grid {ty}x{tx} larger than image {h}x{w}")

    ey, y0, y1, fy = _tile_axis(h, ty)
    ex, x0, x1, fx = _tile_axis(w, tx)
    luts = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            luts[i, j] = _clipped_lut(arr[ey[i]:ey[i + 1], ex[j]:ex[j + 1]], clip_limit)

    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    a, b = fy[:, None], fx[None, :]
    top = (1 - b) * luts[y0[yy], x0[xx], arr] + b * luts[y0[yy], x1[xx], arr]
    bot = (1 - b) * luts[y1[yy], x0[xx], arr] + b * luts[y1[yy], x1[xx], arr]
    return to_byte((1 - a) * top + a * bot)


# --- point transforms -----------------------------------------------------

def _validate_tone(points):
    if points is None:
        return None
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ConfigError("tone curve needs at least two (x, y) control points")
    if np.any(np.diff(pts[:, 0]) <= 0):
        raise ConfigError("tone curve control points must be strictly increasing in x")
    return pts


def point_transform(img, gamma: float = 1.0, tone_points=None) -> np.ndarray:
    """Gamma correction followed by a piecewise-linear tone curve on [0, 1]."""
    arr = _check_image(img)
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    pts = _validate_tone(tone_points)
    v = 255.0 * np.power(arr.astype(np.float64) / 255.0, gamma)
    if pts is not None:
        v = 255.0 * np.interp(v / 255.0, pts[:, 0], pts[:, 1])
    return to_byte(v)


# --- Gabor ----------------------------------------------------------------

@dataclass(frozen=True)
class GaborParams:
    wavelength: float = 8.0
    orientation: float = 0.0
    sigma: float = 3.0
    aspect: float = 0.5


def gabor_kernel(params: GaborParams) -> np.ndarray:
    """Real Gabor kernel truncated at +-3 sigma and normalized to unit sum."""
    if params.sigma <= 0:
        raise ConfigError("Gabor sigma must be positive")
    half = int(math.ceil(3 * params.sigma))
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    c, s = math.cos(params.orientation), math.sin(params.orientation)
    xr = x * c + y * s
    yr = -x * s + y * c
    k = np.exp(-(xr ** 2 + (params.aspect * yr) ** 2) / (2 * params.sigma ** 2))
    k *= np.cos(2 * math.pi * xr / params.wavelength)
    total = k.sum()
    # fall back to L1 normalisation when the carrier cancels the envelope
    norm = total if abs(total) > 1e-8 * np.abs(k).sum() else np.abs(k).sum()
    return k / norm


def gabor(img, params: GaborParams = GaborParams()) -> np.ndarray:
    arr = _check_image(img).astype(np.float64)
    out = ndimage.convolve(arr, gabor_kernel(params), mode="mirror")
    return to_byte(out)


# --- degradation ----------------------------------------------------------

def degrade(img, noise_range=(0.9, 1.1), blur_sigma: float = 0.8, seed: int = 0) -> np.ndarray:
    """Multiplicative uniform noise, clamp, then Gaussian blur (sigma 0 skips it)."""
    arr = _check_image(img)
    lo, hi = noise_range
    if not 0 < lo <= hi:
        raise ConfigError(f"noise range must satisfy 0 < lo <= hi, got {noise_range}")
    if blur_sigma < 0:
        raise ConfigError("blur sigma must be non-negative")
    rng = np.random.default_rng(seed)
    v = np.clip(arr.astype(np.float64) * rng.uniform(lo, hi, size=arr.shape), 0.0, 255.0)
    if blur_sigma > 0:
        v = ndimage.gaussian_filter(v, blur_sigma, mode="mirror", truncate=3.0)
    return to_byte(v)


# --- composition ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    """Preprocessing/augmentation stack. ``None`` disables a component."""

    clahe_clip: float | None = None
    clahe_tiles: int = 8
    gabor: GaborParams | None = None
    gamma_range: tuple[float, float] | None = None
    tone_points: Sequence[tuple[float, float]] | None = None
    noise_range: tuple[float, float] | None = None
    blur_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma_range", "noise_range"):
            rng = getattr(self, name)
            if rng is not None and not 0 < rng[0] <= rng[1]:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got {rng}")
        _validate_tone(self.tone_points)
        if self.blur_sigma < 0:
            raise ConfigError("blur_sigma must be non-negative")

    @classmethod
    def training_default(cls, seed: int = 0) -> "AugmentConfig":
        # CLAHE stays off by default; it did not help on the real data.
        return cls(
            gabor=GaborParams(),
            gamma_range=(0.8, 1.2),
            noise_range=(0.9, 1.1),
            blur_sigma=0.8,
            seed=seed,
        )


def compose_augment(img, cfg: AugmentConfig) -> np.ndarray:
    """CLAHE -> Gabor -> gamma/tone -> degrade, each only when enabled."""
    out = _check_image(img).astype(np.uint8)
    rng = np.random.default_rng(cfg.seed)
    gamma = 1.0 if cfg.gamma_range is None else float(rng.uniform(*cfg.gamma_range))
    noise_seed = int(rng.integers(2 ** 31))
    if cfg.clahe_clip is not None:
        out = clahe(out, cfg.clahe_clip, cfg.clahe_tiles)
    if cfg.gabor is not None:
        out = gabor(out, cfg.gabor)
    if cfg.gamma_range is not None or cfg.tone_points is not None:
        out = point_transform(out, gamma, cfg.tone_points)
    if cfg.noise_range is not None or cfg.blur_sigma > 0:
        out = degrade(out, cfg.noise_range or (1.0, 1.0), cfg.blur_sigma, noise_seed)
    return out

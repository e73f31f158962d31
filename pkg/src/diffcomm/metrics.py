"""Image quality metrics: PSNR and multi-scale structural similarity.

Both operate on images in the 8-bit [0, 255] value convention, as numpy
arrays of shape (H, W) or (H, W, C). MS-SSIM uses the canonical 11-tap
Gaussian window (sigma 1.5), the standard five scale weights
(0.0448, 0.2856, 0.3001, 0.2363, 0.1333) normalized to sum to 1, and
reflect-padded filtering. Scales whose smaller image side falls below
the window size are dropped and the remaining weights renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 100.0
_PEAK = 255.0

_MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333], dtype=np.float64)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    ms_ssim: float
    per_image: dict[str, list[float]] = field(default_factory=dict)


def to_uint8(x) -> np.ndarray:
    """Map a [-1, 1] image tensor/array to the 8-bit [0, 255] convention."""
    arr = np.asarray(x, dtype=np.float64)
    arr = np.clip(arr, -1.0, 1.0)
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def psnr(x, y) -> float:
    """10 log10(255^2 / MSE), capped at 100 dB for identical inputs."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(_PEAK * _PEAK / mse)), PSNR_CAP_DB)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return k / k.sum()


_KERNEL = _gaussian_kernel(_WIN_SIZE, _WIN_SIGMA)


def _blur(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="reflect")
    return correlate1d(out, _KERNEL, axis=1, mode="reflect")


def _ssim_components(a: np.ndarray, b: np.ndarray, data_range: float) -> tuple[float, float]:
    """Mean luminance term and mean contrast-structure term of one channel pair."""
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mu_a = _blur(a)
    mu_b = _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return float(lum.mean()), float(cs.mean())


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(x, y, scales: int = 5, reduce_scales: bool = True) -> float:
    """Multi-scale structural similarity of two [0, 255] images.

    A scale is usable while the smaller image side is at least the window
    size (11) after the preceding dyadic downsamplings. With
    reduce_scales, unusable scales are dropped and the weights of the
    remaining ones renormalized; otherwise a too-small image is an error.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 1 <= scales <= len(_MS_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(_MS_WEIGHTS)}, got {scales}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) images, got shape {a.shape}")

    min_side = min(a.shape[0], a.shape[1])
    usable = 0
    while usable < scales and min_side >= _WIN_SIZE:
        usable += 1
        min_side //= 2
    if usable == 0:
        raise ValueError(f"image side {min(a.shape[0], a.shape[1])} is below the {_WIN_SIZE}px window")
    if usable < scales and not reduce_scales:
        raise ValueError(
            f"image supports only {usable} of {scales} scales; enable reduce_scales or use larger images"
        )
    weights = _MS_WEIGHTS[:usable] / _MS_WEIGHTS[:usable].sum()

    value = 1.0
    for level in range(usable):
        lum_acc = 0.0
        cs_acc = 0.0
        for c in range(a.shape[2]):
            lum, cs = _ssim_components(a[:, :, c], b[:, :, c], _PEAK)
            lum_acc += lum
            cs_acc += cs
        lum_mean = lum_acc / a.shape[2]
        cs_mean = max(cs_acc / a.shape[2], 0.0)  # negative structure clipped to keep powers real
        if level == usable - 1:
            value *= max(lum_mean * cs_mean, 0.0) ** weights[level]
        else:
            value *= cs_mean ** weights[level]
            a = np.stack([_downsample(a[:, :, c]) for c in range(a.shape[2])], axis=2)
            b = np.stack([_downsample(b[:, :, c]) for c in range(b.shape[2])], axis=2)
    return float(np.clip(value, 0.0, 1.0))

"""PSNR, SSIM and Frechet distance with a pluggable feature extractor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.signal import convolve2d

from .degrade import resize_bicubic

PSNR_CAP = 100.0


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma; 2-D input is returned as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(peak**2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, gray: bool = True) -> float:
    """Single-scale SSIM over valid 11x11 Gaussian windows (sigma 1.5).

    Color input is converted to luma first unless ``gray=False``, in which case
    the per-channel scores are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if gray:
        return _ssim_plane(to_gray(a), to_gray(b), data_range)
    if a.ndim == 2:
        return _ssim_plane(a, b, data_range)
    return float(np.mean([_ssim_plane(a[..., k], b[..., k], data_range) for k in range(a.shape[-1])]))


def _ssim_plane(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    win = _gaussian_window()
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[1]:
        raise ValueError(f"image {a.shape} smaller than the {win.shape} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    filt = lambda x: convolve2d(x, win, mode="valid")  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def stats_from_features(feats: np.ndarray) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (feats.shape[0] - 1)
    return FeatureStats(mu, (sigma + sigma.T) / 2, feats.shape[0])


def pixels16(img: np.ndarray) -> np.ndarray:
    """Bicubic 16x16 luma thumbnail, flattened to 256 features."""
    return resize_bicubic(to_gray(img), 16, 16).reshape(-1)


EXTRACTORS = {"pixels16": pixels16}


def feature_stats(images: Iterable[np.ndarray], extractor: str = "pixels16") -> FeatureStats:
    fn = EXTRACTORS[extractor]
    feats = [fn(im) for im in images]
    if len(feats) < 2:
        raise ValueError("need at least 2 images for feature statistics")
    return stats_from_features(np.stack(feats))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)), clamped at 0.

    The trace of (S1 S2)^(1/2) is taken from the symmetric PSD matrix
    S1^(1/2) S2 S1^(1/2), which has the same eigenvalues as S1 S2.
    """
    if s1.mu.shape != s2.mu.shape:
        raise ValueError(f"feature dimensions differ: {s1.mu.shape} vs {s2.mu.shape}")
    root1 = _sqrt_psd(s1.sigma)
    inner = root1 @ s2.sigma @ root1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = s1.mu - s2.mu
    d = diff @ diff + np.trace(s1.sigma) + np.trace(s2.sigma) - 2.0 * tr_cross
    return float(max(d, 0.0))

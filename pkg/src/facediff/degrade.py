"""Synthetic degradation: blur, downsample, noise, JPEG, then upsample back.

Images are float arrays in [0, 1], shaped (H, W, 3) or (H, W).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import correlate1d

SIGMA_RANGE = (0.1, 10.0)
SCALE_RANGE = (4.0, 20.0)
NOISE_RANGE = (1.0, 20.0)
QUALITY_RANGE = (30, 70)
BICUBIC_A = -0.5


@dataclass(frozen=True)
class DegradationParams:
    sigma_blur: float
    r_down: float
    delta_noise: float  # std on the 0-255 scale
    q_jpeg: int


def sample_degradation(seed: int) -> DegradationParams:
    rng = np.random.default_rng(seed)
    return DegradationParams(
        sigma_blur=float(rng.uniform(*SIGMA_RANGE)),
        r_down=float(rng.uniform(*SCALE_RANGE)),
        delta_noise=float(rng.uniform(*NOISE_RANGE)),
        q_jpeg=int(rng.integers(QUALITY_RANGE[0], QUALITY_RANGE[1] + 1)),
    )


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel size 2*ceil(3 sigma)+1, symmetric-reflect borders."""
    k = gaussian_kernel1d(sigma)
    out = correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def _cubic(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1, (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0))


@lru_cache(maxsize=64)
def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, pixel-center aligned, edges clamped."""
    centers = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(centers).astype(int)
    m = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        idx = base + off
        w = _cubic(centers - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    m /= m.sum(axis=1, keepdims=True)
    m.setflags(write=False)
    return m


def resize_bicubic(img: np.ndarray, height: int, width: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    rows = bicubic_matrix(img.shape[0], height)
    cols = bicubic_matrix(img.shape[1], width)
    return np.einsum("ij,jk...->ik...", rows, np.einsum("kj,ij...->ik...", cols, img))


@lru_cache(maxsize=1)
def quant_tables() -> dict:
    text = resources.files("facediff").joinpath("data/jpeg_tables.json").read_text()
    raw = json.loads(text)
    return {
        "version": raw["version"],
        "luminance": np.array(raw["luminance"], dtype=np.float64).reshape(8, 8),
        "chrominance": np.array(raw["chrominance"], dtype=np.float64).reshape(8, 8),
    }


def quality_scale(q: int) -> float:
    return 5000.0 / q if q < 50 else 200.0 - 2.0 * q


def scaled_table(table: np.ndarray, q: int) -> np.ndarray:
    return np.clip(np.floor(table * quality_scale(q) / 100.0 + 0.5), 1, 255)


def _rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def _ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge") - 128.0
    blocks = padded.reshape(padded.shape[0] // 8, 8, padded.shape[1] // 8, 8)
    coef = dctn(blocks, axes=(1, 3), norm="ortho")
    q = table[None, :, None, :]
    coef = np.round(coef / q) * q
    out = idctn(coef, axes=(1, 3), norm="ortho").reshape(padded.shape) + 128.0
    return out[:h, :w]


def jpeg_approx(img: np.ndarray, q: int) -> np.ndarray:
    """Blockwise DCT quantization with the standard tables; no entropy coding or subsampling."""
    if not 1 <= int(q) <= 100 or int(q) != q:
        raise ValueError(f"JPEG quality must be an integer in [1, 100], got {q}")
    tables = quant_tables()
    lum = scaled_table(tables["luminance"], q)
    chrom = scaled_table(tables["chrominance"], q)
    x = np.asarray(img, dtype=np.float64) * 255.0
    if x.ndim == 2:
        return np.clip(_quantize_plane(x, lum) / 255.0, 0.0, 1.0)
    ycc = _rgb_to_ycbcr(x)
    planes = [_quantize_plane(ycc[..., 0], lum),
              _quantize_plane(ycc[..., 1], chrom),
              _quantize_plane(ycc[..., 2], chrom)]
    return np.clip(_ycbcr_to_rgb(np.stack(planes, axis=-1)) / 255.0, 0.0, 1.0)


def degrade_pipeline(y: np.ndarray, p: DegradationParams, noise_seed: int) -> np.ndarray:
    """blur -> bicubic down by r -> Gaussian noise -> JPEG -> bicubic up to the input size."""
    y = np.asarray(y, dtype=np.float64)
    H, W = y.shape[:2]
    if H < 8 or W < 8:
        raise ValueError(f"image must be at least 8x8, got {H}x{W}")
    h, w = round(H / p.r_down), round(W / p.r_down)
    if h < 2 or w < 2:
        raise ValueError(f"downsampling {H}x{W} by {p.r_down:.3g} leaves {h}x{w} pixels")
    x = gaussian_blur(y, p.sigma_blur)
    x = np.clip(resize_bicubic(x, h, w), 0.0, 1.0)
    rng = np.random.default_rng(noise_seed)
    x = np.clip(x + rng.normal(0.0, p.delta_noise / 255.0, size=x.shape), 0.0, 1.0)
    x = jpeg_approx(x, p.q_jpeg)
    return np.clip(resize_bicubic(x, H, W), 0.0, 1.0)


MANIFEST_FIELDS = ("filename", "sigma", "r", "delta", "q", "noise_seed")


def write_manifest(path: str | Path, rows) -> None:
    """``rows`` yields (filename, DegradationParams, noise_seed)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_FIELDS)
        for name, p, seed in rows:
            w.writerow([name, repr(p.sigma_blur), repr(p.r_down), repr(p.delta_noise), p.q_jpeg, seed])


def read_manifest(path: str | Path) -> list[tuple[str, DegradationParams, int]]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            p = DegradationParams(float(row["sigma"]), float(row["r"]), float(row["delta"]), int(row["q"]))
            out.append((row["filename"], p, int(row["noise_seed"])))
    return out

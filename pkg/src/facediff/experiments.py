"""Desk-scale training experiments shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .degrade import DegradationParams, degrade_pipeline, resize_bicubic
from .denoiser import DenoiserConfig, to_model_space, train_loop
from .metrics import psnr
from .morphable3d import random_coeffs, render_mesh, split_coeffs, synth_prior_model
from .restore import RestoreRun, truncated_restore
from .schedule import make_schedule


def synthetic_faces(n: int, size: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random smooth color fields plus a prior render for each, both (n, size, size, 3) in [0, 1]."""
    rng = np.random.default_rng(seed)
    prior = synth_prior_model(seed, 256)
    x = np.linspace(-1, 1, size)
    imgs, renders = [], []
    for _ in range(n):
        cx, cy, w = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0.2, 0.6)
        blob = np.exp(-((x[None, :] - cx) ** 2 + (x[:, None] - cy) ** 2) / w)
        bg, fg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        imgs.append(bg + (fg - bg) * blob[..., None])
        renders.append(render_mesh(prior, split_coeffs(random_coeffs(rng)), size, size).image)
    return np.stack(imgs), np.stack(renders)


@dataclass
class ToyTrainingResult:
    losses: list[float]
    first_mean: float
    last_mean: float
    init_loss: float
    init_se: float
    seconds: float


def toy_training(steps: int = 500, n_images: int = 16, size: int = 16, window: int = 50,
                 seed: int = 0) -> ToyTrainingResult:
    imgs, renders = synthetic_faces(n_images, size, seed)
    start = time.perf_counter()
    state = train_loop(to_model_space(imgs), renders, DenoiserConfig(image_size=size, seed=seed), steps,
                       seed=seed)
    losses = state.losses
    # The fresh model predicts 0, so the first loss is a mean of squared normals.
    n = 4 * 3 * size * size
    return ToyTrainingResult(losses, float(np.mean(losses[:window])), float(np.mean(losses[-window:])),
                             losses[0], float(np.sqrt(2.0 / n)), time.perf_counter() - start)


@dataclass
class OverfitResult:
    losses: list[float]
    lq_psnr: float
    restored_psnr: float
    run: RestoreRun
    train_seconds: float
    restore_seconds: float


# r=4 is the smallest sampled factor and already leaves an 8x8 image at 32x32.
MODERATE = DegradationParams(sigma_blur=1.0, r_down=4.0, delta_noise=5.0, q_jpeg=50)


def overfit_restore(image: np.ndarray, steps: int = 2000, N: int = 100, seed: int = 0,
                    degradation: DegradationParams = MODERATE, use_ema: bool = False) -> OverfitResult:
    """Train on one image and its render, degrade it, then restore from the degraded copy.

    Sampling uses the raw weights by default: after 2000 steps an EMA at 0.999 still
    carries 0.999**2000 = 13.5% of the initialization.
    """
    size = image.shape[0]
    rng = np.random.default_rng(seed)
    prior = synth_prior_model(seed, 1024)
    render = render_mesh(prior, split_coeffs(random_coeffs(rng)), size, size).image
    t0 = time.perf_counter()
    state = train_loop(to_model_space(image)[None], render[None], DenoiserConfig(image_size=size, seed=seed),
                       steps, seed=seed)
    t1 = time.perf_counter()
    lq = degrade_pipeline(image, degradation, seed)
    model = state.ema_model() if use_ema else state.model
    run = truncated_restore(lq, render, model, make_schedule(), N, seed=seed)
    t2 = time.perf_counter()
    return OverfitResult(state.losses, psnr(lq, image), psnr(run.output, image), run, t1 - t0, t2 - t1)


def face_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Square crop around the face of the standard astronaut test image, resized."""
    crop = np.asarray(img[20:220, 160:360], dtype=np.float64) / 255.0
    return np.clip(resize_bicubic(crop, size, size), 0.0, 1.0)

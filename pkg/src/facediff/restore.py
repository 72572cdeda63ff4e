"""Inference: initial restoration, then truncated guided sampling with gamma telemetry."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .denoiser import Denoiser, from_model_space, to_model_space, to_numpy, to_tensor
from .degrade import gaussian_blur
from .schedule import NoiseSchedule, q_sample, reverse_step

log = logging.getLogger(__name__)

GAMMA_LOG_FIELDS = ("t", "alpha1_mean", "beta1_mean", "gamma1", "gamma2", "gamma3")


class InitialRestorer(Protocol):
    name: str

    def restore(self, x_lq: np.ndarray) -> np.ndarray: ...


class IdentityRestorer:
    name = "identity"

    def restore(self, x_lq: np.ndarray) -> np.ndarray:
        return np.asarray(x_lq, dtype=np.float64)


class GaussianDenoiseRestorer:
    """Baseline smoother standing in for a learned first-stage restorer."""

    name = "gaussian"

    def __init__(self, sigma: float = 1.0):
        self.sigma = sigma

    def restore(self, x_lq: np.ndarray) -> np.ndarray:
        return np.clip(gaussian_blur(x_lq, self.sigma), 0.0, 1.0)


class FileRestorer:
    """Reads a precomputed first-stage result ``<directory>/<stem>.png``."""

    name = "file"

    def __init__(self, directory: str | Path, stem: str | None = None):
        self.directory = Path(directory)
        self.stem = stem

    def for_stem(self, stem: str) -> "FileRestorer":
        return FileRestorer(self.directory, stem)

    def restore(self, x_lq: np.ndarray) -> np.ndarray:
        from .imageio import read_png

        if self.stem is None:
            raise ValueError("file restorer needs an image stem")
        path = self.directory / f"{self.stem}.png"
        if not path.exists():
            raise FileNotFoundError(f"no precomputed restoration at {path}")
        img = read_png(path)
        if img.shape != np.shape(x_lq):
            raise ValueError(f"{path} has shape {img.shape}, expected {np.shape(x_lq)}")
        return img


def make_restorer(kind: str, directory: str | Path | None = None) -> InitialRestorer:
    if kind == "identity":
        return IdentityRestorer()
    if kind == "gaussian":
        return GaussianDenoiseRestorer()
    if kind == "file":
        if directory is None:
            raise ValueError("file restorer needs a directory")
        return FileRestorer(directory)
    raise ValueError(f"unknown restorer {kind!r}")


def initial_restore(x_lq: np.ndarray, restorer: InitialRestorer, meta: dict | None = None) -> np.ndarray:
    out = restorer.restore(x_lq)
    if out.shape != np.shape(x_lq):
        raise ValueError(f"restorer {restorer.name} changed shape {np.shape(x_lq)} -> {out.shape}")
    if meta is not None:
        meta["restorer"] = restorer.name
    return np.clip(out, 0.0, 1.0)


@dataclass
class RestoreRun:
    N: int
    x_init: np.ndarray
    x_3d: np.ndarray
    output: np.ndarray
    gamma_log: list[list[dict]] = field(default_factory=list)  # [step][level] -> row
    timesteps: list[int] = field(default_factory=list)

    def level_rows(self, level: int) -> list[dict]:
        return [dict(t=t, **row[level]) for t, row in zip(self.timesteps, self.gamma_log)]


@torch.no_grad()
def truncated_restore(x_init: np.ndarray, x_3d: np.ndarray, model: Denoiser, sched: NoiseSchedule,
                      N: int = 100, seed: int = 0) -> RestoreRun:
    """Noise ``x_init`` to step N, then run the guided reverse chain N..1.

    Images are (H, W, 3) in [0, 1]. Timesteps above N are never evaluated.
    """
    if not 0 <= N <= sched.T:
        raise ValueError(f"truncation N={N} outside [0, {sched.T}]")
    x_init = np.asarray(x_init, dtype=np.float64)
    if N == 0:
        return RestoreRun(0, x_init, x_3d, x_init.copy())
    dtype = model.conv_in.weight.dtype
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    shape = (1, 3) + x_init.shape[:2]
    x0 = to_tensor(to_model_space(x_init), torch.float64)
    cond = to_tensor(x_3d, dtype)
    x = q_sample(x0, N, torch.randn(shape, generator=gen, dtype=torch.float64), sched)
    run = RestoreRun(N, x_init, x_3d, x_init)
    for t in range(N, 0, -1):
        eps_hat = model(x.to(dtype), cond, [t]).to(torch.float64)
        mode = "beta" if t > 1 else "zero"
        z = torch.randn(shape, generator=gen, dtype=torch.float64) if t > 1 else None
        x = reverse_step(x, eps_hat, t, z, sched, sigma_mode=mode)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite sample at step t={t}")
        run.timesteps.append(t)
        run.gamma_log.append(model.time_weights())
    run.output = from_model_space(to_numpy(x)[0])
    return run


def write_gamma_logs(run: RestoreRun, out_dir: str | Path, stem: str) -> list[Path]:
    """One CSV per TAFB level: ``<stem>_gamma_level<k>.csv``."""
    paths = []
    levels = len(run.gamma_log[0]) if run.gamma_log else 0
    for k in range(levels):
        path = Path(out_dir) / f"{stem}_gamma_level{k + 1}.csv"
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=GAMMA_LOG_FIELDS)
            w.writeheader()
            for row in run.level_rows(k):
                w.writerow({key: (row[key] if key == "t" else repr(float(row[key]))) for key in GAMMA_LOG_FIELDS})
        paths.append(path)
    return paths

"""Noise schedule and the DDPM forward / reverse update rules.

Timesteps are 1-based: ``betas[t - 1]`` is beta_t and ``alpha_bars[0]`` is the
boundary value 1. All schedule arithmetic is float64; the update functions
accept numpy arrays or torch tensors and keep the caller's type and dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NumericDegenerateError(ArithmeticError):
    """Raised when an update would divide by zero or produce non-finite values."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray  # length T + 1, alpha_bars[0] == 1

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.empty(T + 1, dtype=np.float64)
    alpha_bars[0] = 1.0
    for i in range(T):
        alpha_bars[i + 1] = alpha_bars[i] * alphas[i]
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_step(x_prev, t: int, z, sched: NoiseSchedule):
    """One Markov noising step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z."""
    beta = sched.beta(t)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * z


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form marginal x_t given x_0 and the injected noise."""
    sched._check(t)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_step(x_t, eps_hat, t: int, z, sched: NoiseSchedule, sigma_mode: str = "beta"):
    """x_{t-1} from x_t and the predicted noise.

    ``sigma_mode="beta"`` uses sigma_t = sqrt(beta_t); ``"zero"`` drops the
    stochastic term. ``z`` may be None when sigma is zero.
    """
    if sigma_mode not in ("beta", "zero"):
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
    alpha = sched.alpha(t)
    ab = sched.alpha_bar(t)
    if ab >= 1.0:
        raise NumericDegenerateError(f"alpha_bar at t={t} equals 1")
    coef = (1.0 - alpha) / math.sqrt(1.0 - ab)
    out = (x_t - coef * eps_hat) / math.sqrt(alpha)
    if sigma_mode == "beta":
        out = out + math.sqrt(sched.beta(t)) * z
    return out

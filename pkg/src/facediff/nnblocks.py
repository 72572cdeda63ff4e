"""Shared differentiable blocks and a finite-difference gradient checker.

Feature maps are NCHW torch tensors. Every module takes its parameters from
the standard ``nn.Module`` registry; ``flat_view`` / ``load_flat`` give the
deterministic single-vector view used by checkpoints and gradient checks.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-6
INIT_STD = 0.02


def init_weights(module: nn.Module, seed: int = 0) -> None:
    """Truncated-normal (std 0.02) weights and zero biases for conv/linear layers.

    Uses a private generator so the result depends only on (architecture, seed).
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD,
                                  generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def flat_view(module: nn.Module) -> torch.Tensor:
    """All parameters concatenated in registration order (detached copy)."""
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def load_flat(module: nn.Module, vec: torch.Tensor) -> None:
    total = param_count(module)
    if vec.numel() != total:
        raise ValueError(f"flat vector has {vec.numel()} entries, module needs {total}")
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(vec[offset:offset + n].view_as(p))
            offset += n


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def timestep_embedding(t, dim: int = 64, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype)


def _groups(channels: int, max_groups: int = 32, min_per_group: int = 4) -> int:
    """GroupNorm group count keeping several channels per group.

    One channel per group would cancel the per-channel time shift added before norm2.
    """
    for g in range(min(max_groups, channels // min_per_group), 0, -1):
        if channels % g == 0:
            return g
    return 1


def layernorm2d(x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Normalize over channels at each spatial location, no affine."""
    mean = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class ResBlock(nn.Module):
    """SR3-style residual block with additive time conditioning."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int = 64):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, out_ch))
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"ResBlock expects {self.in_ch} channels, got {x.shape[1]}")
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_mlp(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ChannelSqueeze(nn.Module):
    """Squeeze-excitation style per-channel weights in (0, 1), shape (B, C, 1, 1)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3))
        w = torch.sigmoid(self.fc2(F.silu(self.fc1(pooled))))
        return w[:, :, None, None]


class FFN(nn.Module):
    """Position-wise two-layer network with 4x expansion and GELU."""

    def __init__(self, channels: int, expansion: int = 4):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Conv2d(channels, channels * expansion, 1)
        self.fc2 = nn.Conv2d(channels * expansion, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"FFN expects {self.channels} channels, got {x.shape[1]}")
        return self.fc2(F.gelu(self.fc1(x)))


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor] | nn.Module,
               probe_count: int = 20, step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` re-evaluates a scalar from the current parameter values.
    Coordinates are drawn uniformly from the flattened parameter list.
    """
    if isinstance(params, nn.Module):
        params = list(params.parameters())
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    coords = rng.choice(offsets[-1], size=min(probe_count, offsets[-1]), replace=False)

    worst = 0.0
    with torch.no_grad():
        for c in coords:
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            flat = params[k].view(-1)
            i = int(c - offsets[k])
            orig = flat[i].item()
            flat[i] = orig + step
            lp = loss_fn().item()
            flat[i] = orig - step
            lm = loss_fn().item()
            flat[i] = orig
            numeric = (lp - lm) / (2 * step)
            analytic = grads[k].view(-1)[i].item()
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst

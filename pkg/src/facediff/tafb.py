"""Time-aware fusion of noisy-image features with 3D-prior features."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nnblocks import FFN, ChannelSqueeze, layernorm2d, zero_module


@dataclass
class TimeWeights:
    alpha1: torch.Tensor  # (B, C)
    beta1: torch.Tensor  # (B, C)
    gamma1: torch.Tensor  # (B,)
    gamma2: torch.Tensor
    gamma3: torch.Tensor

    def summary(self) -> dict[str, float]:
        """Batch-averaged scalars for the gamma telemetry log."""
        return {
            "alpha1_mean": self.alpha1.mean().item(),
            "beta1_mean": self.beta1.mean().item(),
            "gamma1": self.gamma1.mean().item(),
            "gamma2": self.gamma2.mean().item(),
            "gamma3": self.gamma3.mean().item(),
        }


class TimeWeightMLP(nn.Module):
    """Maps the time embedding to (alpha1, beta1, gamma1, gamma2, gamma3).

    The output bias starts at alpha1=1, beta1=0, gamma=(1, 0, 1) so a fresh
    block passes the noisy-image features through unchanged.
    """

    def __init__(self, channels: int, time_dim: int = 64, hidden: int | None = None):
        super().__init__()
        hidden = hidden or time_dim
        self.channels = channels
        self.fc1 = nn.Linear(time_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2 * channels + 3)

    def reset_output_bias(self) -> None:
        c = self.channels
        with torch.no_grad():
            self.fc2.bias.zero_()
            self.fc2.bias[:c] = 1.0
            self.fc2.bias[2 * c] = 1.0
            self.fc2.bias[2 * c + 2] = 1.0

    def forward(self, t_emb: torch.Tensor) -> TimeWeights:
        out = self.fc2(F.silu(self.fc1(t_emb)))
        c = self.channels
        return TimeWeights(out[:, :c], out[:, c:2 * c], out[:, 2 * c], out[:, 2 * c + 1],
                           out[:, 2 * c + 2])


def sft_modulate(f3d_norm: torch.Tensor, alpha1: torch.Tensor, beta1: torch.Tensor) -> torch.Tensor:
    """alpha1 * (1 + f3d_norm) + beta1 with per-channel (B, C) modulation."""
    c = f3d_norm.shape[1]
    if alpha1.shape[-1] != c or beta1.shape[-1] != c:
        raise ValueError(f"modulation width {alpha1.shape[-1]}/{beta1.shape[-1]} != {c} channels")
    return alpha1[:, :, None, None] * (1.0 + f3d_norm) + beta1[:, :, None, None]


class TAFB(nn.Module):

    def __init__(self, channels: int, time_dim: int = 64, reduction: int = 4):
        super().__init__()
        self.channels = channels
        self.weights = TimeWeightMLP(channels, time_dim)
        self.cs1 = ChannelSqueeze(channels, reduction)
        self.cs2 = ChannelSqueeze(channels, reduction)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)
        self.ffn = FFN(channels)
        self.last_weights: TimeWeights | None = None

    def zero_init(self) -> None:
        """Zero the fusion conv and FFN output; identity-start the weight MLP."""
        zero_module(self.fuse)
        zero_module(self.ffn.fc2)
        self.weights.reset_output_bias()

    def forward(self, f_in: torch.Tensor, f_3d: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        if f_in.shape != f_3d.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_in.shape)} vs {tuple(f_3d.shape)}")
        if f_in.shape[1] != self.channels:
            raise ValueError(f"TAFB expects {self.channels} channels, got {f_in.shape[1]}")
        w = self.weights(t_emb)
        self.last_weights = w
        f1 = sft_modulate(layernorm2d(f_3d), w.alpha1, w.beta1)
        f3 = self.cs1(f1) * f1
        f4 = self.cs2(f1) * layernorm2d(f_in)
        g1, g2, g3 = (g[:, None, None, None] for g in (w.gamma1, w.gamma2, w.gamma3))
        f5 = self.fuse(torch.cat([f3, f4], dim=1)) + g1 * f_in + g2 * f_3d
        return self.ffn(f5) + g3 * f5

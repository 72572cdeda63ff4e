"""Coarse-to-fine feature pyramid over the rendered 3D prior."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .nnblocks import ResBlock


class GuidancePyramid(nn.Module):
    """Level 1 is a ResBlock on the render; level i a ResBlock on a stride-2 conv of level i-1.

    Every level is conditioned on the same time embedding, so the pyramid has
    to be recomputed at each denoising step.
    """

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 128), in_ch: int = 3,
                 time_dim: int = 64):
        super().__init__()
        self.channels = tuple(channels)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = in_ch
        for i, ch in enumerate(self.channels):
            if i > 0:
                self.downs.append(nn.Conv2d(prev, prev, 3, stride=2, padding=1))
            self.blocks.append(ResBlock(prev, ch, time_dim))
            prev = ch

    @property
    def levels(self) -> int:
        return len(self.channels)

    def forward(self, x_3d: torch.Tensor, t_emb: torch.Tensor) -> list[torch.Tensor]:
        step = 2 ** (self.levels - 1)
        if x_3d.shape[-2] % step or x_3d.shape[-1] % step:
            raise ValueError(f"render size {tuple(x_3d.shape[-2:])} not divisible by {step}")
        feats = []
        h = x_3d
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = self.downs[i - 1](h)
            h = block(h, t_emb)
            feats.append(h)
        return feats


def extract_pyramid(x_3d: torch.Tensor, t_emb: torch.Tensor, pyramid: GuidancePyramid) -> list[torch.Tensor]:
    return pyramid(x_3d, t_emb)

"""Degradation-prior encoder: a small strided conv net summarizing distortion.

Stands in for a large pretrained distortion-aware image encoder; trained
jointly in stage 1 (optionally frozen after a warmup via config) so the
router can condition on degradation type and strength.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass
class DpEmbedding:
    """Degradation-prior vector; the task hint is diagnostic metadata only."""

    vector: torch.Tensor
    source_task_hint: str | None = None


class DpEncoder(nn.Module):
    """Four stride-2 conv blocks, global average pool, linear head."""

    total_stride = 16

    def __init__(self, d_dp: int = 64, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.blocks = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(4 * c, 4 * c, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(4 * c, d_dp)
        self.d_dp = d_dp

    def forward(self, lq_image: torch.Tensor) -> torch.Tensor:
        squeeze = lq_image.dim() == 3
        if squeeze:
            lq_image = lq_image.unsqueeze(0)
        h, w = lq_image.shape[-2:]
        if h % self.total_stride or w % self.total_stride:
            raise ShapeError(
                f"image dims {(h, w)} not divisible by the encoder stride {self.total_stride}"
            )
        out = self.head(self.blocks(lq_image).mean(dim=(-2, -1)))
        return out.squeeze(0) if squeeze else out


def encode_dp(
    encoder: DpEncoder, lq_image: torch.Tensor, task_hint: str | None = None
) -> DpEmbedding:
    """Embed a low-quality image (values in [0,1]) as a degradation prior."""
    return DpEmbedding(encoder(lq_image), task_hint)

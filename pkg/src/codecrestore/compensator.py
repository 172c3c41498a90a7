"""Stage-II fidelity module: fuse low-quality-image features into the VAE decoder.

A small conv encoder extracts LQ features at each decoder-stage resolution;
zero-initialized fusion convs add them after every stage, so before stage-2
training the compensated decode is bit-equal to the plain decode. Stage 2
fine-tunes the decoder and this module under a perceptual objective while
everything upstream stays frozen.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import ToyVae
from .errors import ShapeError
from .metrics import PerceptualDistance


class DecoderCompensator(nn.Module):
    """LQ feature extractor plus per-stage fusion convs (the trainable stage-2 set)."""

    def __init__(self, decoder_stage_channels: tuple[int, int, int], base_channels: int = 24):
        super().__init__()
        c = base_channels
        # Two convs per scale, extracted finest-first, fused coarsest-first.
        self.lq_fine = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1)
        )
        self.lq_mid = nn.Sequential(
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
        )
        self.lq_coarse = nn.Sequential(
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(4 * c, 4 * c, 3, padding=1),
        )
        d0, d1, d2 = decoder_stage_channels
        self.fuse_coarse = nn.Conv2d(4 * c, d0, 3, padding=1)
        self.fuse_mid = nn.Conv2d(2 * c, d1, 3, padding=1)
        self.fuse_fine = nn.Conv2d(c, d2, 3, padding=1)
        for conv in (self.fuse_coarse, self.fuse_mid, self.fuse_fine):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def lq_features(self, lq_image: torch.Tensor) -> tuple[torch.Tensor, ...]:
        fine = F.silu(self.lq_fine(lq_image))
        mid = F.silu(self.lq_mid(fine))
        coarse = F.silu(self.lq_coarse(mid))
        return fine, mid, coarse

    def injections(self, lq_image: torch.Tensor) -> tuple[torch.Tensor, ...]:
        fine, mid, coarse = self.lq_features(lq_image)
        return self.fuse_coarse(coarse), self.fuse_mid(mid), self.fuse_fine(fine)


def compensate_decode(
    vae: ToyVae, compensator: DecoderCompensator, z0: torch.Tensor, lq_image: torch.Tensor
) -> torch.Tensor:
    """Decode z0 with LQ features fused into each decoder stage.

    With zero fusion weights this equals vae.decode(z0) exactly.
    """
    squeeze = z0.dim() == 3
    if squeeze:
        z0 = z0.unsqueeze(0)
        lq_image = lq_image.unsqueeze(0)
    if lq_image.shape[-2:] != (z0.shape[-2] * 4, z0.shape[-1] * 4):
        raise ShapeError(
            f"LQ raster {tuple(lq_image.shape[-2:])} must be 4x the latent "
            f"{tuple(z0.shape[-2:])}"
        )
    out = vae.decode_stages(z0, injections=compensator.injections(lq_image))
    return out.squeeze(0) if squeeze else out


def stage2_loss(
    z_lq: torch.Tensor,
    z0: torch.Tensor,
    hr: torch.Tensor,
    vae: ToyVae,
    compensator: DecoderCompensator,
    pdist: PerceptualDistance,
    l1_weight: float = 0.5,
    lq_image: torch.Tensor | None = None,
) -> torch.Tensor:
    """Perceptual + weighted L1 loss of the compensated decode against the HR raster.

    The LQ information enters through the compensation path. When the actual
    LQ raster is available (training has it alongside the latents) pass it as
    `lq_image` so the compensator sees exactly what it will see at inference;
    otherwise z_lq is plain-decoded into a proxy raster. Either way the whole
    expression is differentiable end to end, so finite differences agree with
    autograd. All rasters here live in [-1, 1]; the perceptual term maps them
    to [0, 1].
    """
    if z_lq.shape != z0.shape:
        raise ShapeError(f"z_lq {tuple(z_lq.shape)} and z0 {tuple(z0.shape)} differ")
    lq_raster = lq_image if lq_image is not None else vae.decode(z_lq)
    if lq_raster.shape != hr.shape:
        raise ShapeError(f"LQ raster {tuple(lq_raster.shape)} != hr {tuple(hr.shape)}")
    out = compensate_decode(vae, compensator, z0, lq_raster)
    perceptual = pdist((out + 1) / 2, (hr + 1) / 2)
    return perceptual.mean() + l1_weight * torch.mean(torch.abs(out - hr))

"""Toy latent diffusion core: VAE, noise schedule, conditional UNet, DDIM sampling.

The autoencoder compresses rasters by a spatial factor of 4. The denoiser is
a small 3-resolution UNet with sinusoidal time embeddings, one cross-attention
block per resolution attending to text tokens, and spatially-adaptive
modulation of its decoder stages by the conditioning pyramid. Modulation
projections are zero-initialized so the conditioning path starts as an exact
no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, TimestepOutOfRange


@dataclass
class DiffusionSchedule:
    """Beta/alpha-bar tables for T timesteps, kept in float64."""

    kind: str
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor

    @property
    def num_timesteps(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas_cumprod[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= int(t) <= self.num_timesteps:
            raise TimestepOutOfRange(f"t={t} outside [1, {self.num_timesteps}]")


def make_schedule(
    kind: str = "linear",
    num_timesteps: int = 200,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> DiffusionSchedule:
    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
    elif kind == "cosine":
        s = 0.008
        steps = torch.arange(num_timesteps + 1, dtype=torch.float64) / num_timesteps
        f = torch.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        alphas_bar = f / f[0]
        betas = torch.clamp(1 - alphas_bar[1:] / alphas_bar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)
    schedule = DiffusionSchedule(kind, betas, alphas_cumprod)
    _validate_schedule(schedule)
    return schedule


def _validate_schedule(s: DiffusionSchedule) -> None:
    if not ((s.betas > 0).all() and (s.betas < 1).all()):
        raise ValueError("betas must lie strictly inside (0, 1)")
    if not (s.alphas_cumprod[1:] < s.alphas_cumprod[:-1]).all():
        raise ValueError("alpha-bar must be strictly decreasing")
    if s.alphas_cumprod[0] < 1 - 2 * s.betas[0]:
        raise ValueError("alpha-bar at t=1 too far from 1")


def add_noise(
    z0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: DiffusionSchedule
) -> torch.Tensor:
    """Forward noising z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    t = torch.as_tensor(t)
    if ((t < 1) | (t > schedule.num_timesteps)).any():
        raise TimestepOutOfRange(f"t={t} outside [1, {schedule.num_timesteps}]")
    abar = schedule.alphas_cumprod[t.long() - 1].to(z0.dtype)
    while abar.dim() < z0.dim() - (0 if t.dim() == 0 else 1):
        abar = abar.unsqueeze(-1)
    if t.dim() > 0:
        abar = abar.reshape(t.shape + (1,) * (z0.dim() - t.dim()))
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def sd_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_pred.shape != eps.shape:
        raise ShapeError(f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps.shape)}")
    return torch.mean((eps_pred - eps) ** 2)


class ToyVae(nn.Module):
    """Small conv autoencoder with spatial stride 4 and a Gaussian latent head."""

    def __init__(self, latent_channels: int = 4, base_channels: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        c = base_channels
        self.enc = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.SiLU(),
        )
        self.to_mean = nn.Conv2d(2 * c, latent_channels, 3, padding=1)
        self.to_logvar = nn.Conv2d(2 * c, latent_channels, 3, padding=1)
        # Decoder stages are separate modules so a compensator can fuse
        # low-quality features between them; decoder_stage_channels lists the
        # channel count after each stage, finest last.
        self.dec_in = nn.Conv2d(latent_channels, 2 * c, 3, padding=1)
        self.dec_mid = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec_fine = nn.Conv2d(c, c, 3, padding=1)
        self.dec_out = nn.Conv2d(c, 3, 3, padding=1)
        self.decoder_stage_channels = (2 * c, c, c)

    @staticmethod
    def _check_raster(x: torch.Tensor) -> None:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"raster dims {tuple(x.shape[-2:])} not divisible by 4")

    def encode_params(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_raster(x)
        h = self.enc(x)
        return self.to_mean(h), self.to_logvar(h)

    def encode(
        self,
        x: torch.Tensor,
        sample: bool = False,
        rng: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Mean latent; pass sample=True (training only) for a reparameterized draw."""
        mean, logvar = self.encode_params(x)
        if not sample:
            return mean
        noise = torch.randn(mean.shape, generator=rng, dtype=mean.dtype, device=mean.device)
        return mean + torch.exp(0.5 * logvar) * noise

    def decode_stages(
        self, z: torch.Tensor, injections: tuple | None = None
    ) -> torch.Tensor:
        """Run the decoder; `injections` adds one tensor after each stage."""
        up = nn.functional.interpolate
        h = F.silu(self.dec_in(z))
        if injections is not None:
            h = h + injections[0]
        h = F.silu(self.dec_mid(up(h, scale_factor=2, mode="nearest")))
        if injections is not None:
            h = h + injections[1]
        h = F.silu(self.dec_fine(up(h, scale_factor=2, mode="nearest")))
        if injections is not None:
            h = h + injections[2]
        return self.dec_out(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() not in (3, 4):
            raise ShapeError(f"expected latent (C,h,w) or (B,C,h,w), got {tuple(z.shape)}")
        if z.shape[-3] != self.latent_channels:
            raise ShapeError(
                f"latent has {z.shape[-3]} channels, expected {self.latent_channels}"
            )
        squeeze = z.dim() == 3
        out = self.decode_stages(z.unsqueeze(0) if squeeze else z)
        return out.squeeze(0) if squeeze else out


def vae_recon_loss(
    vae: ToyVae, x: torch.Tensor, kl_weight: float = 1e-6
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """L1 reconstruction plus a small KL toward the standard normal prior."""
    mean, logvar = vae.encode_params(x)
    recon = vae.decode(mean)
    l1 = torch.mean(torch.abs(recon - x))
    kl = -0.5 * torch.mean(1 + logvar - mean**2 - torch.exp(logvar))
    return l1 + kl_weight * kl, l1, kl


def instance_normalize(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-sample, per-channel normalization over spatial positions."""
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class SpadeModulate(nn.Module):
    """Spatially-adaptive scale/shift of normalized features from a conditioning map.

    Gamma/beta projections start at exactly zero, so at initialization the
    output is the plain normalized input regardless of the conditioning.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int = 32):
        super().__init__()
        self.shared = nn.Sequential(
            nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.SiLU()
        )
        self.to_gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.to_beta = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.to_gamma.weight)
        nn.init.zeros_(self.to_gamma.bias)
        nn.init.zeros_(self.to_beta.weight)
        nn.init.zeros_(self.to_beta.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != cond.shape[-2:]:
            raise ShapeError(
                f"conditioning {tuple(cond.shape[-2:])} not resampled to {tuple(x.shape[-2:])}"
            )
        h = self.shared(cond)
        return instance_normalize(x) * (1 + self.to_gamma(h)) + self.to_beta(h)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TextCrossAttention(nn.Module):
    """Single-head cross-attention from spatial features to text tokens."""

    def __init__(self, channels: int, d_text: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Linear(d_text, channels)
        self.v = nn.Linear(d_text, channels)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.q(self.norm(x)).flatten(2).transpose(1, 2)  # (B, HW, C)
        k = self.k(text)  # (B, T, C)
        v = self.v(text)
        attn = torch.softmax(q @ k.transpose(1, 2) / c**0.5, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + self.out(y)


class ConditionalUnet(nn.Module):
    """Noise predictor over latents at 3 resolutions with text and pyramid conditioning."""

    def __init__(
        self,
        in_channels: int = 4,
        base_channels: int = 32,
        channel_mults: tuple[int, int, int] = (1, 2, 3),
        d_text: int = 64,
        pyramid_channels: tuple[int, int, int] = (32, 48, 64),
        time_dim: int = 64,
    ):
        super().__init__()
        self.in_channels = in_channels
        c0, c1, c2 = (base_channels * m for m in channel_mults)
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.time_dim = time_dim
        self.conv_in = nn.Conv2d(in_channels, c0, 3, padding=1)

        self.enc0 = ResBlock(c0, c0, time_dim)
        self.attn0 = TextCrossAttention(c0, d_text)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, c1, time_dim)
        self.attn1 = TextCrossAttention(c1, d_text)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, time_dim)
        self.attn_mid = TextCrossAttention(c2, d_text)
        self.mid2 = ResBlock(c2, c2, time_dim)

        p0, p1, p2 = pyramid_channels
        self.spade2 = SpadeModulate(c2, p2)
        self.dec2 = ResBlock(c2, c2, time_dim)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.spade1 = SpadeModulate(c1, p1)
        self.dec1 = ResBlock(c1, c1, time_dim)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.spade0 = SpadeModulate(c0, p0)
        self.dec0 = ResBlock(c0, c0, time_dim)

        # Standard init on the output conv: with a zero-initialized head the
        # modulation layers would get no gradient on the first step and the
        # conditioning path would stay dead one step longer than intended.
        self.out_norm = nn.GroupNorm(8, c0)
        self.out_conv = nn.Conv2d(c0, in_channels, 3, padding=1)

    def forward(self, z_t, t, text, pyramid) -> torch.Tensor:
        squeeze = z_t.dim() == 3
        if squeeze:
            z_t = z_t.unsqueeze(0)
        levels = pyramid.levels if hasattr(pyramid, "levels") else pyramid
        levels = [lv.unsqueeze(0) if lv.dim() == 3 else lv for lv in levels]
        tokens = text.tokens if hasattr(text, "tokens") else text
        if tokens.dim() == 2:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[0] == 1 and z_t.shape[0] > 1:
            tokens = tokens.expand(z_t.shape[0], -1, -1)
        t = torch.as_tensor(t, device=z_t.device)
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(z_t.dtype))

        h0 = self.attn0(self.enc0(self.conv_in(z_t), temb), tokens)
        h1 = self.attn1(self.enc1(self.down0(h0), temb), tokens)
        h2 = self.mid2(self.attn_mid(self.mid(self.down1(h1), temb), tokens), temb)

        h2 = self.dec2(self.spade2(h2, levels[2]), temb)
        u1 = self.up1(F.interpolate(h2, scale_factor=2, mode="nearest")) + h1
        u1 = self.dec1(self.spade1(u1, levels[1]), temb)
        u0 = self.up0(F.interpolate(u1, scale_factor=2, mode="nearest")) + h0
        u0 = self.dec0(self.spade0(u0, levels[0]), temb)

        out = self.out_conv(F.silu(self.out_norm(u0)))
        return out.squeeze(0) if squeeze else out


def ddim_timesteps(num_timesteps: int, steps: int, t_start: int | None = None) -> list[int]:
    t_start = num_timesteps if t_start is None else t_start
    if not 1 <= t_start <= num_timesteps:
        raise ValueError(f"t_start={t_start} outside [1, {num_timesteps}]")
    if steps > t_start:
        steps = t_start
    if steps > num_timesteps:
        raise ValueError(f"steps={steps} exceeds T={num_timesteps}")
    import numpy as np

    taus = np.round(np.linspace(1, t_start, steps)).astype(int)
    return sorted(set(int(t) for t in taus), reverse=True)


def ddim_sample(
    denoiser,
    schedule: DiffusionSchedule,
    text,
    pyramid,
    steps: int = 20,
    eta: float = 0.0,
    rng: torch.Generator | None = None,
    z_init: torch.Tensor | None = None,
    latent_shape: tuple | None = None,
    t_start: int | None = None,
) -> torch.Tensor:
    """DDIM sampler; returns the predicted clean latent. Deterministic at eta=0.

    `denoiser` is any callable (z_t, t, text, pyramid) -> predicted noise.
    The initial latent is `z_init` if given, else a standard normal draw
    with `latent_shape` (or a shape inferred from the pyramid and the
    denoiser's channel count). `t_start` runs a partial reverse chain from
    that timestep (image-to-image sampling when z_init is a noised encoding).
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if z_init is not None:
        z = z_init.clone()
    else:
        if latent_shape is None:
            levels = pyramid.levels if hasattr(pyramid, "levels") else pyramid
            if levels is None or not hasattr(denoiser, "in_channels"):
                raise ValueError("need z_init or latent_shape to start sampling")
            lead = levels[0].shape[:-3]
            latent_shape = (*lead, denoiser.in_channels, *levels[0].shape[-2:])
        z = torch.randn(latent_shape, generator=rng)

    taus = ddim_timesteps(schedule.num_timesteps, steps, t_start)
    for i, t in enumerate(taus):
        a_t = schedule.alpha_bar(t)
        a_prev = schedule.alpha_bar(taus[i + 1]) if i + 1 < len(taus) else 1.0
        eps_pred = denoiser(z, torch.full((1,), t, dtype=torch.long), text, pyramid)
        z0_pred = (z - math.sqrt(1 - a_t) * eps_pred) / math.sqrt(a_t)
        sigma = eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)
        direction = math.sqrt(max(1 - a_prev - sigma**2, 0.0)) * eps_pred
        z = math.sqrt(a_prev) * z0_pred + direction
        if sigma > 0:
            z = z + sigma * torch.randn(z.shape, generator=rng, dtype=z.dtype)
    return z

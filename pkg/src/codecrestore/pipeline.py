"""The assembled restoration model and its stage-wise parameter groups."""

from __future__ import annotations

import hashlib

import torch
import torch.nn as nn

from .compensator import DecoderCompensator, compensate_decode
from .config import ModelConfig
from .degradation_prior import DpEncoder
from .diffusion import ConditionalUnet, ToyVae, ddim_sample, make_schedule
from .errors import ShapeError
from .metrics import PerceptualDistance
from .moe_prompt import MoEPromptModule, PromptBank
from .utils import stable_seed
from .v2t import V2TPath

# Parameter groups, from finest to coarsest concern. Stage 1 trains the
# conditioning stack and the from-scratch denoiser; stage 2 trains only the
# decoder and its compensator.
STAGE1_GROUPS = frozenset(
    {"prompts", "w_gate", "w_noise", "cross_attention", "moe_trunk", "dp", "v2t",
     "spade", "denoiser"}
)
STAGE2_GROUPS = frozenset({"vae_decoder", "compensator"})

_GROUP_PREFIXES = (
    ("moe.bank.prompts", "prompts"),
    ("moe.bank.w_gate", "w_gate"),
    ("moe.bank.w_noise", "w_noise"),
    ("moe.cross_attn.", "cross_attention"),
    ("moe.", "moe_trunk"),
    ("dp.", "dp"),
    ("v2t.", "v2t"),
    ("denoiser.spade", "spade"),
    ("denoiser.", "denoiser"),
    ("vae.dec", "vae_decoder"),
    ("vae.", "vae_encoder"),
    ("compensator.", "compensator"),
    ("pdist.", "perceptual"),
)


def group_of(param_name: str) -> str:
    for prefix, group in _GROUP_PREFIXES:
        if param_name.startswith(prefix):
            return group
    raise KeyError(f"parameter {param_name} belongs to no group")


class RestorationModel(nn.Module):
    """VAE + schedule + conditioning stack + denoiser + decoder compensator."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.vae = ToyVae(cfg.latent_channels, cfg.vae_base)
        self.schedule = make_schedule(
            cfg.schedule_kind, cfg.num_timesteps, cfg.beta_start, cfg.beta_end
        )
        self.dp = DpEncoder(cfg.d_dp)
        c2 = cfg.pyramid_channels[2]
        bank = PromptBank(
            cfg.n_prompts,
            cfg.top_k,
            d_prompt=c2,
            rank=c2,
            d_route=cfg.d_route,
            renormalize=cfg.renormalize,
            init_std=cfg.prompt_init_std,
        )
        self.moe = MoEPromptModule(
            bank,
            d_dp=cfg.d_dp,
            pyramid_channels=cfg.pyramid_channels,
            d_route=cfg.d_route,
            attn_dim=cfg.attn_dim,
            dp_tokens=cfg.dp_tokens,
            aggregation=cfg.aggregation,
            router_kind=cfg.router_kind,
        )
        self.v2t = V2TPath(
            enabled=cfg.v2t_enabled,
            patch=cfg.patch,
            enhancer_dim=cfg.enhancer_dim,
            enhancer_depth=cfg.enhancer_depth,
            vit_dim=cfg.vit_dim,
            vit_depth=cfg.vit_depth,
            d_vis=cfg.d_vis,
            n_tok=cfg.n_tok,
            d_text=cfg.d_text,
        )
        self.denoiser = ConditionalUnet(
            in_channels=cfg.latent_channels,
            base_channels=cfg.unet_base,
            channel_mults=cfg.unet_mults,
            d_text=cfg.d_text,
            pyramid_channels=cfg.pyramid_channels,
            time_dim=cfg.time_dim,
        )
        self.compensator = DecoderCompensator(self.vae.decoder_stage_channels)
        self.pdist = PerceptualDistance()

    def conditioning(
        self,
        lq01: torch.Tensor,
        noise_enabled: bool = False,
        rng: torch.Generator | None = None,
    ):
        """Degradation prior, routed pyramid, gate decision, and text tokens for one batch."""
        dp = self.dp(lq01)
        pyramid, decision = self.moe(lq01, dp, noise_enabled=noise_enabled, rng=rng)
        tokens = self.v2t(lq01)
        return pyramid, decision, tokens

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {}
        for name, p in self.named_parameters():
            groups.setdefault(group_of(name), []).append((name, p))
        return groups


def build_model(cfg: ModelConfig, seed: int = 0) -> RestorationModel:
    """Construct a model with a reproducible initialization."""
    torch.manual_seed(stable_seed(seed, "model-init"))
    return RestorationModel(cfg)


def set_trainable(model: RestorationModel, groups: frozenset[str] | set[str]) -> list[nn.Parameter]:
    """Freeze everything outside `groups`; returns the trainable parameters."""
    trainable = []
    for name, p in model.named_parameters():
        keep = group_of(name) in groups
        p.requires_grad_(keep)
        if keep:
            trainable.append(p)
    return trainable


def param_group_hashes(model: RestorationModel) -> dict[str, str]:
    """Content hash per parameter group, for freezing contracts."""
    hashes = {}
    for group, params in sorted(model.param_groups().items()):
        h = hashlib.sha256()
        for name, p in sorted(params):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        hashes[group] = h.hexdigest()
    return hashes


def sample_restoration_latent(
    model: RestorationModel,
    lq01: torch.Tensor,
    pyramid,
    tokens,
    steps: int,
    eta: float,
    rng: torch.Generator,
    init_strength: float,
) -> torch.Tensor:
    """Run the reverse chain for restoration.

    With init_strength > 0 the chain starts at t = strength * T from the
    noised encoding of the LQ input (image-to-image sampling, the fidelity
    regime this toy-scale model needs); at 0 it starts from pure noise.
    """
    from .diffusion import add_noise

    if not 0.0 <= init_strength <= 1.0:
        raise ValueError(f"init_strength must lie in [0, 1], got {init_strength}")
    if init_strength == 0.0:
        return ddim_sample(
            model.denoiser, model.schedule, tokens, pyramid, steps=steps, eta=eta, rng=rng
        )
    t_start = max(1, round(init_strength * model.schedule.num_timesteps))
    z_lq = model.vae.encode(lq01 * 2 - 1)
    eps = torch.randn(z_lq.shape, generator=rng, dtype=z_lq.dtype)
    z_init = add_noise(z_lq, t_start, eps, model.schedule)
    return ddim_sample(
        model.denoiser,
        model.schedule,
        tokens,
        pyramid,
        steps=steps,
        eta=eta,
        rng=rng,
        z_init=z_init,
        t_start=t_start,
    )


def restore_tensor(
    model: RestorationModel,
    lq01: torch.Tensor,
    steps: int = 20,
    eta: float = 0.0,
    seed: int = 0,
    use_compensator: bool = False,
    init_strength: float = 0.3,
) -> torch.Tensor:
    """Full inference path: conditioning, DDIM sampling, decode; output in [0,1]."""
    squeeze = lq01.dim() == 3
    if squeeze:
        lq01 = lq01.unsqueeze(0)
    h, w = lq01.shape[-2:]
    if h % DpEncoder.total_stride or w % DpEncoder.total_stride:
        raise ShapeError(
            f"restore needs dims divisible by {DpEncoder.total_stride}, got {(h, w)}"
        )
    model.eval()
    with torch.no_grad():
        pyramid, _, tokens = model.conditioning(lq01, noise_enabled=False)
        rng = torch.Generator().manual_seed(stable_seed(seed, "sampler"))
        z0 = sample_restoration_latent(
            model, lq01, pyramid, tokens, steps, eta, rng, init_strength
        )
        if use_compensator:
            out = compensate_decode(model.vae, model.compensator, z0, lq01 * 2 - 1)
        else:
            out = model.vae.decode(z0)
        out = ((out + 1) / 2).clamp(0, 1)
    return out.squeeze(0) if squeeze else out

"""Mixture-of-prompt-experts module.

A bank of N learnable prompt matrices acts as experts. A degradation-aware
router scores them from features that have cross-attended to the degradation
prior, optionally perturbs the scores with learned-scale Gaussian noise,
applies softmax, and keeps the top K. Selected prompts are aggregated
(unweighted sum by default, gate-weighted as an option) and applied to the
coarsest feature level as a channel-axis matrix product with a residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteInput, ShapeError, ZeroPrompt

AGGREGATION_MODES = ("unweighted_sum", "gate_weighted")
ROUTER_KINDS = ("noisy_topk", "soft_all")


@dataclass
class GateDecision:
    """Routing result; fields are (N,)/(K,) for a single input or batched (B,N)/(B,K)."""

    logits: torch.Tensor
    probs: torch.Tensor
    indices: torch.Tensor
    weights: torch.Tensor
    noise_applied: bool


@dataclass
class FeaturePyramid:
    """Conditioning features at strides 1x, 2x, 4x relative to latent resolution."""

    levels: tuple[torch.Tensor, torch.Tensor, torch.Tensor]


class PromptBank(nn.Module):
    """N prompt experts of shape (d_p, r) plus the router weight matrices."""

    def __init__(
        self,
        n_prompts: int,
        top_k: int,
        d_prompt: int,
        rank: int,
        d_route: int,
        renormalize: bool = False,
        init_std: float = 0.02,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if not 1 <= top_k <= n_prompts:
            raise ValueError(f"need 1 <= K <= N, got K={top_k}, N={n_prompts}")
        self.n_prompts = n_prompts
        self.top_k = top_k
        self.renormalize = renormalize
        self.prompts = nn.Parameter(
            torch.randn(n_prompts, d_prompt, rank, generator=generator) * init_std
        )
        self.w_gate = nn.Parameter(
            torch.randn(d_route, n_prompts, generator=generator) * init_std
        )
        self.w_noise = nn.Parameter(
            torch.randn(d_route, n_prompts, generator=generator) * init_std
        )


def select_top_k(probs: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices and weights of the K largest probs, ties broken toward lower index."""
    order = torch.argsort(-probs, dim=-1, stable=True)
    indices = order[..., :k]
    weights = probs.gather(-1, indices)
    return indices, weights


def route(
    route_input: torch.Tensor,
    bank: PromptBank,
    noise_enabled: bool = False,
    rng: torch.Generator | None = None,
) -> GateDecision:
    """Noisy top-K gate: softmax(x W_g + n * softplus(x W_noise)) then keep top K.

    With noise disabled the decision is a pure function of (x, W_g). Accepts a
    single d_route vector or a (B, d_route) batch.
    """
    if not torch.isfinite(route_input).all():
        raise NonFiniteInput("routing input contains NaN or inf")
    if noise_enabled and rng is None:
        raise ValueError("noise_enabled requires a seeded generator")
    if route_input.shape[-1] != bank.w_gate.shape[0]:
        raise ShapeError(
            f"routing input dim {route_input.shape[-1]} != d_route {bank.w_gate.shape[0]}"
        )
    logits = route_input @ bank.w_gate
    if noise_enabled:
        noise = torch.randn(
            logits.shape, generator=rng, dtype=logits.dtype, device=logits.device
        )
        logits = logits + noise * F.softplus(route_input @ bank.w_noise)
    probs = torch.softmax(logits, dim=-1)
    indices, weights = select_top_k(probs, bank.top_k)
    if bank.renormalize:
        weights = weights / weights.sum(dim=-1, keepdim=True)
    return GateDecision(logits, probs, indices, weights, noise_applied=noise_enabled)


def soft_route(route_input: torch.Tensor, bank: PromptBank) -> GateDecision:
    """Soft-weighted baseline: every prompt participates with its softmax weight."""
    if not torch.isfinite(route_input).all():
        raise NonFiniteInput("routing input contains NaN or inf")
    logits = route_input @ bank.w_gate
    probs = torch.softmax(logits, dim=-1)
    n = bank.n_prompts
    indices = torch.arange(n, device=probs.device).expand(probs.shape[:-1] + (n,))
    return GateDecision(logits, probs, indices, probs, noise_applied=False)


def aggregate_prompts(
    bank: PromptBank,
    decision: GateDecision,
    features: torch.Tensor,
    mode: str = "unweighted_sum",
) -> torch.Tensor:
    """Apply the summed selected prompts to features along the channel axis.

    The aggregated prompt P = sum_i w_i * prompt_i multiplies the channel
    axis and is residual-added, so zero prompts leave features unchanged.
    Linear in the prompt bank for a fixed decision.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    if features.dim() != 4:
        raise ShapeError(f"expected (B,C,H,W) features, got {tuple(features.shape)}")
    channels = features.shape[1]
    d_p, rank = bank.prompts.shape[1], bank.prompts.shape[2]
    if rank != channels or d_p != channels:
        raise ShapeError(
            f"prompt shape ({d_p},{rank}) incompatible with {channels} feature channels"
        )
    indices = decision.indices
    if indices.dim() == 1:
        indices = indices.expand(features.shape[0], -1)
    weights = decision.weights
    if weights.dim() == 1:
        weights = weights.expand(features.shape[0], -1)
    selected = bank.prompts[indices]  # (B, K, d_p, r)
    if mode == "gate_weighted":
        selected = selected * weights[..., None, None].to(selected.dtype)
    combined = selected.sum(dim=1)  # (B, d_p, r)
    out = features + torch.einsum("bor,brhw->bohw", combined, features)
    return out.squeeze(0) if squeeze else out


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial features to degradation-prior tokens."""

    def __init__(self, channels: int, d_dp: int, n_tokens: int = 4, attn_dim: int = 32):
        super().__init__()
        if d_dp % n_tokens != 0:
            raise ValueError(f"d_dp={d_dp} not divisible by n_tokens={n_tokens}")
        self.n_tokens = n_tokens
        token_dim = d_dp // n_tokens
        self.attn_dim = attn_dim
        self.q_proj = nn.Linear(channels, attn_dim)
        self.k_proj = nn.Linear(token_dim, attn_dim)
        # Zero value bias keeps a zero prior an exact identity (residual only).
        self.v_proj = nn.Linear(token_dim, channels)
        nn.init.zeros_(self.v_proj.bias)

    def attention_weights(self, features: torch.Tensor, dp: torch.Tensor) -> torch.Tensor:
        b, c, h, w = features.shape
        q = self.q_proj(features.flatten(2).transpose(1, 2))  # (B, HW, A)
        k = self.k_proj(dp.view(b, self.n_tokens, -1))  # (B, T, A)
        return torch.softmax(q @ k.transpose(1, 2) / self.attn_dim**0.5, dim=-1)

    def forward(self, features: torch.Tensor, dp: torch.Tensor) -> torch.Tensor:
        squeeze = features.dim() == 3
        if squeeze:
            features = features.unsqueeze(0)
            dp = dp.unsqueeze(0)
        if features.dim() != 4 or dp.dim() != 2:
            raise ShapeError(
                f"expected (B,C,H,W) features and (B,d_dp) prior, got "
                f"{tuple(features.shape)} and {tuple(dp.shape)}"
            )
        b, c, h, w = features.shape
        attn = self.attention_weights(features, dp)  # (B, HW, T)
        v = self.v_proj(dp.view(b, self.n_tokens, -1))  # (B, T, C)
        out = features + (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return out.squeeze(0) if squeeze else out


class RouterPool(nn.Module):
    """Global average pool over spatial positions followed by a linear head."""

    def __init__(self, channels: int, d_route: int):
        super().__init__()
        self.proj = nn.Linear(channels, d_route)

    @staticmethod
    def pool(features: torch.Tensor) -> torch.Tensor:
        return features.mean(dim=(-2, -1))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        squeeze = features.dim() == 3
        if squeeze:
            features = features.unsqueeze(0)
        out = self.proj(self.pool(features))
        return out.squeeze(0) if squeeze else out


class TokenBlock(nn.Module):
    """Pre-norm transformer block over flattened spatial positions."""

    def __init__(self, channels: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)  # (B, HW, C)
        y = self.norm1(t)
        attn = torch.softmax(self.q(y) @ self.k(y).transpose(1, 2) / c**0.5, dim=-1)
        t = t + attn @ self.v(y)
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).reshape(b, c, h, w)


class PyramidLevel(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, downsample: bool):
        super().__init__()
        self.down = (
            nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1) if downsample else nn.Identity()
        )
        self.block = TokenBlock(out_ch)
        self.conv = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.down(x)
        return x + self.conv(self.block(x))


class MoEPromptModule(nn.Module):
    """LQ feature pyramid conditioned by routed prompt experts.

    Extracts features at latent resolution, lets them attend to the
    degradation prior, routes once per image, applies the aggregated prompts
    at the coarsest scale, and emits a 3-level pyramid for the denoiser's
    spatial modulation layers.
    """

    def __init__(
        self,
        bank: PromptBank,
        d_dp: int,
        pyramid_channels: tuple[int, int, int] = (32, 48, 64),
        d_route: int = 64,
        attn_dim: int = 32,
        dp_tokens: int = 4,
        aggregation: str = "unweighted_sum",
        router_kind: str = "noisy_topk",
    ):
        super().__init__()
        if aggregation not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {aggregation!r}")
        if router_kind not in ROUTER_KINDS:
            raise ValueError(f"unknown router kind {router_kind!r}")
        c0, c1, c2 = pyramid_channels
        if bank.prompts.shape[1] != c2 or bank.prompts.shape[2] != c2:
            raise ShapeError(
                f"prompt shape {tuple(bank.prompts.shape[1:])} must be square and equal to "
                f"the coarsest pyramid channel count {c2}"
            )
        self.bank = bank
        self.aggregation = aggregation
        self.router_kind = router_kind
        self.stem = nn.Sequential(
            nn.Conv2d(3, c0 // 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c0 // 2, c0, 3, stride=2, padding=1),
        )
        self.cross_attn = CrossAttention(c0, d_dp, n_tokens=dp_tokens, attn_dim=attn_dim)
        self.router_pool = RouterPool(c0, d_route)
        self.levels = nn.ModuleList(
            [
                PyramidLevel(c0, c0, downsample=False),
                PyramidLevel(c0, c1, downsample=True),
                PyramidLevel(c1, c2, downsample=True),
            ]
        )

    def forward(
        self,
        lq_image: torch.Tensor,
        dp: torch.Tensor,
        noise_enabled: bool | None = None,
        rng: torch.Generator | None = None,
        mode: str | None = None,
    ) -> tuple[FeaturePyramid, GateDecision]:
        squeeze = lq_image.dim() == 3
        if squeeze:
            lq_image = lq_image.unsqueeze(0)
            dp = dp.unsqueeze(0)
        if lq_image.shape[-1] % 4 or lq_image.shape[-2] % 4:
            raise ShapeError(f"image dims {tuple(lq_image.shape[-2:])} not divisible by 4")
        if noise_enabled is None:
            noise_enabled = self.training
        base = self.stem(lq_image)
        attended = self.cross_attn(base, dp)
        route_input = self.router_pool(attended)
        if self.router_kind == "soft_all":
            decision = soft_route(route_input, self.bank)
            agg_mode = "gate_weighted"
        else:
            decision = route(route_input, self.bank, noise_enabled=noise_enabled, rng=rng)
            agg_mode = mode or self.aggregation
        lvl0 = self.levels[0](attended)
        lvl1 = self.levels[1](lvl0)
        lvl2 = self.levels[2](lvl1)
        lvl2 = aggregate_prompts(self.bank, decision, lvl2, mode=agg_mode)
        if squeeze:
            lvl0, lvl1, lvl2 = lvl0.squeeze(0), lvl1.squeeze(0), lvl2.squeeze(0)
            decision = GateDecision(
                decision.logits.squeeze(0),
                decision.probs.squeeze(0),
                decision.indices.squeeze(0),
                decision.weights.squeeze(0),
                decision.noise_applied,
            )
        return FeaturePyramid((lvl0, lvl1, lvl2)), decision


def prompt_similarity_matrix(bank: PromptBank) -> np.ndarray:
    """Pairwise cosine similarity of the flattened prompts."""
    flat = bank.prompts.detach().double().flatten(1)
    norms = flat.norm(dim=1)
    if (norms == 0).any():
        raise ZeroPrompt("cosine similarity undefined for an all-zero prompt")
    unit = flat / norms[:, None]
    return (unit @ unit.T).numpy()


def importance_balance_loss(probs: torch.Tensor) -> torch.Tensor:
    """Squared coefficient of variation of summed gate probabilities (optional aux loss)."""
    importance = probs.sum(dim=0)
    return importance.var(unbiased=False) / (importance.mean() ** 2 + 1e-12)

"""Visual-to-text path: quality enhancer, visual encoder, and token adapter.

Low-quality pixels are first lightly enhanced by transformer blocks over
non-overlapping patches, embedded by a small ViT, then mapped by an MLP into
the token space the denoiser's text cross-attention consumes. When the path
is disabled a learned null token sequence is substituted (the empty-prompt
regime some diffusion restorers use).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass
class TextCondition:
    """Token sequence consumed by the denoiser; (n_tok, d_text) or batched."""

    tokens: torch.Tensor


class TransformerBlock(nn.Module):
    """Pre-norm single-head self-attention + MLP over a token sequence."""

    def __init__(self, dim: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        attn = torch.softmax(self.q(y) @ self.k(y).transpose(1, 2) / x.shape[-1] ** 0.5, dim=-1)
        x = x + attn @ self.v(y)
        return x + self.mlp(self.norm2(x))


def _patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


def _unpatchify(tokens: torch.Tensor, patch: int, channels: int, h: int, w: int) -> torch.Tensor:
    b = tokens.shape[0]
    x = tokens.reshape(b, h // patch, w // patch, channels, patch, patch)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, h, w)


def _check_patch_dims(x: torch.Tensor, patch: int) -> None:
    if x.shape[-1] % patch or x.shape[-2] % patch:
        raise ShapeError(f"image dims {tuple(x.shape[-2:])} not divisible by patch {patch}")


class PatchEnhancer(nn.Module):
    """Residual patch-token transformer; zero-initialized output projection
    makes it an exact identity at initialization."""

    def __init__(self, patch: int = 8, dim: int = 48, depth: int = 2):
        super().__init__()
        self.patch = patch
        self.embed = nn.Linear(3 * patch * patch, dim)
        self.blocks = nn.ModuleList(TransformerBlock(dim) for _ in range(depth))
        self.unembed = nn.Linear(dim, 3 * patch * patch)
        nn.init.zeros_(self.unembed.weight)
        nn.init.zeros_(self.unembed.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        _check_patch_dims(x, self.patch)
        b, c, h, w = x.shape
        t = self.embed(_patchify(x, self.patch))
        for block in self.blocks:
            t = block(t)
        out = x + _unpatchify(self.unembed(t), self.patch, c, h, w)
        return out.squeeze(0) if squeeze else out


class VisualEncoder(nn.Module):
    """Patchify, 4 transformer blocks, mean-pool, project to the visual embedding.

    No positional embedding: keeps the encoder input-size agnostic, which is
    all the toy pipeline needs from it.
    """

    def __init__(self, patch: int = 8, dim: int = 64, depth: int = 4, d_vis: int = 128):
        super().__init__()
        self.patch = patch
        self.d_vis = d_vis
        self.embed = nn.Linear(3 * patch * patch, dim)
        self.blocks = nn.ModuleList(TransformerBlock(dim) for _ in range(depth))
        self.head = nn.Linear(dim, d_vis)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        _check_patch_dims(x, self.patch)
        t = self.embed(_patchify(x, self.patch))
        for block in self.blocks:
            t = block(t)
        out = self.head(t.mean(dim=1))
        return out.squeeze(0) if squeeze else out


class V2TAdapter(nn.Module):
    """Two-layer MLP from the visual embedding to the text token sequence."""

    def __init__(self, d_vis: int = 128, n_tok: int = 4, d_text: int = 64):
        super().__init__()
        self.n_tok = n_tok
        self.d_text = d_text
        self.mlp = nn.Sequential(
            nn.Linear(d_vis, d_vis), nn.GELU(), nn.Linear(d_vis, n_tok * d_text)
        )

    def forward(self, vis: torch.Tensor) -> torch.Tensor:
        squeeze = vis.dim() == 1
        if squeeze:
            vis = vis.unsqueeze(0)
        tokens = self.mlp(vis).reshape(vis.shape[0], self.n_tok, self.d_text)
        return tokens.squeeze(0) if squeeze else tokens


class V2TPath(nn.Module):
    """enhance -> visual_encode -> adapt, or a learned null sequence when disabled."""

    def __init__(
        self,
        enabled: bool = True,
        patch: int = 8,
        enhancer_dim: int = 48,
        enhancer_depth: int = 2,
        vit_dim: int = 64,
        vit_depth: int = 4,
        d_vis: int = 128,
        n_tok: int = 4,
        d_text: int = 64,
    ):
        super().__init__()
        self.enabled = enabled
        self.enhancer = PatchEnhancer(patch, enhancer_dim, enhancer_depth)
        self.encoder = VisualEncoder(patch, vit_dim, vit_depth, d_vis)
        self.adapter = V2TAdapter(d_vis, n_tok, d_text)
        self.null_tokens = nn.Parameter(torch.randn(n_tok, d_text) * 0.02)

    def forward(self, lq_image: torch.Tensor) -> torch.Tensor:
        squeeze = lq_image.dim() == 3
        batch = 1 if squeeze else lq_image.shape[0]
        if not self.enabled:
            tokens = self.null_tokens.expand(batch, -1, -1)
            return tokens.squeeze(0) if squeeze else tokens
        return self.adapter(self.encoder(self.enhancer(lq_image)))

    def condition(self, lq_image: torch.Tensor) -> TextCondition:
        return TextCondition(self(lq_image))

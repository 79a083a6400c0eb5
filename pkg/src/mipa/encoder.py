"""Small two-stage patch transformer shared by both modalities."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
from torch import nn

from .mosaic import PatchGrid


@dataclass
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    stage_depths: list = field(default_factory=lambda: [2, 2])
    num_heads: int = 4
    mlp_ratio: float = 2.0
    downsample_between_stages: bool = True
    in_chans: int = 3

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not self.stage_depths or any(d < 1 for d in self.stage_depths):
            raise ValueError(f"stage_depths must be non-empty with entries >= 1, got {self.stage_depths}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be positive, got {self.patch_size}")

    def to_dict(self) -> dict:
        return asdict(self)


class TokenMap(NamedTuple):
    tokens: torch.Tensor  # (B, h, w, D)
    stage_index: int


class PatchEmbed(nn.Module):
    """Linear projection of flattened patches plus a learned 2-D position table."""

    def __init__(self, patch_size: int, in_chans: int, embed_dim: int, grid_h: int, grid_w: int):
        super().__init__()
        self.patch_size = patch_size
        self.in_dim = patch_size * patch_size * in_chans
        self.grid_h, self.grid_w = grid_h, grid_w
        self.proj = nn.Linear(self.in_dim, embed_dim)
        self.pos = nn.Parameter(torch.zeros(grid_h, grid_w, embed_dim))
        nn.init.trunc_normal_(self.pos, std=0.02)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # patches: (B, grid_h, grid_w, patch_size * patch_size * C)
        if patches.shape[1:] != (self.grid_h, self.grid_w, self.in_dim):
            raise ValueError(f"expected patches of shape (B, {self.grid_h}, {self.grid_w}, {self.in_dim}), "
                             f"got {tuple(patches.shape)}")
        return self.proj(patches) + self.pos


def image_to_patches(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, H/p, W/p, p*p*C)`` with each patch flattened as (row, col, channel)."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} is not divisible by patch_size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, gh, gw, patch_size * patch_size * c)


def grid_to_patches(grid: PatchGrid, patch_size: int) -> torch.Tensor:
    """``PatchGrid`` -> ``(1, grid_h, grid_w, p*p*C)`` in the same flattening as :func:`image_to_patches`."""
    if grid.patch_size != patch_size:
        raise ValueError(f"grid patch_size {grid.patch_size} does not match encoder patch_size {patch_size}")
    flat = torch.as_tensor(grid.patches, dtype=torch.float32).reshape(grid.n, -1)
    return flat.reshape(1, grid.grid_h, grid.grid_w, flat.shape[-1])


class Attention(nn.Module):

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.last_weights = None

    def forward(self, x: torch.Tensor, keep_weights: bool = False) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        if keep_weights:
            self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm self-attention + MLP, both residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def zero_init_residual(self):
        for layer in (self.attn.proj, self.mlp[2]):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor, keep_weights: bool = False) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), keep_weights=keep_weights)
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """2x2 neighbourhood merge halving each spatial axis."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, d = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"cannot merge an odd token grid {h}x{w}")
        x = x.reshape(b, h // 2, 2, w // 2, 2, d).permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * d)
        return self.reduce(self.norm(x))


class PatchEncoder(nn.Module):

    def __init__(self, config: EncoderConfig, grid_h: int, grid_w: int):
        super().__init__()
        self.config = config
        self.grid_h, self.grid_w = grid_h, grid_w
        d = config.embed_dim
        self.embed = PatchEmbed(config.patch_size, config.in_chans, d, grid_h, grid_w)
        self.stages = nn.ModuleList(
            nn.ModuleList(Block(d, config.num_heads, config.mlp_ratio) for _ in range(depth))
            for depth in config.stage_depths)
        n_merges = len(config.stage_depths) - 1 if config.downsample_between_stages else 0
        self.merges = nn.ModuleList(PatchMerge(d) for _ in range(n_merges))
        self.norm = nn.LayerNorm(d)
        self.apply(_init_weights)

    def stage1_shape(self) -> tuple:
        return self.grid_h, self.grid_w

    def final_shape(self) -> tuple:
        factor = 2 ** len(self.merges)
        return self.grid_h // factor, self.grid_w // factor

    def zero_init_residuals(self):
        for stage in self.stages:
            for block in stage:
                block.zero_init_residual()

    def embed_patches(self, images) -> TokenMap:
        """Embed a ``(B, C, H, W)`` batch, or a single :class:`PatchGrid` as a batch of one."""
        if isinstance(images, PatchGrid):
            return TokenMap(self.embed(grid_to_patches(images, self.config.patch_size)), 0)
        return TokenMap(self.embed(image_to_patches(images, self.config.patch_size)), 0)

    def encode(self, tokens: TokenMap, keep_weights: bool = False) -> tuple:
        x = tokens.tokens
        stage1 = None
        for idx, stage in enumerate(self.stages):
            if idx > 0 and self.merges:
                x = self.merges[idx - 1](x)
            b, h, w, d = x.shape
            flat = x.reshape(b, h * w, d)
            for block in stage:
                flat = block(flat, keep_weights=keep_weights)
            x = flat.reshape(b, h, w, d)
            if idx == 0:
                stage1 = TokenMap(x, 1)
        final = TokenMap(self.norm(x), len(self.stages))
        if not (torch.isfinite(stage1.tokens).all() and torch.isfinite(final.tokens).all()):
            raise FloatingPointError("non-finite activations in encoder")
        return stage1, final

    def forward(self, images: torch.Tensor) -> tuple:
        return self.encode(self.embed_patches(images))


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)

"""
Shared observation encoders: a small ViT and a RAD-style CNN.
Both map a cropped 9x84x84 stack scaled to [0, 1] to a 128-dim latent.
"""

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nncore import TransformerBlock, conv2d, count_parameters, layer_norm
from .utils import validate_shape


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 84
    patch_size: int = 12
    in_channels: int = 9
    embed_dim: int = 128
    depth: int = 4
    heads: int = 8
    mlp_dim: int = 128

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not tile image size {self.image_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_size ** 2


@dataclass
class TokenSequence:
    tokens: torch.Tensor
    positions: torch.Tensor
    mask_indices: Optional[torch.Tensor] = None

    def __len__(self):
        return self.tokens.shape[1]


@dataclass
class EncoderOutput:
    tokens: TokenSequence
    latent: torch.Tensor
    per_block_activations: list = field(default_factory=list)


def patchify(obs, patch_size=12):
    """
    (B, C, H, W) -> (B, L, C*p*p) in row-major grid order,
    each vector laid out channel-major, then row, then column
    """
    if obs.dim() != 4 or obs.shape[2] % patch_size or obs.shape[3] % patch_size:
        raise ValueError(f"patchify expects (B, C, H, W) tiled by {patch_size}, got {tuple(obs.shape)}")
    B, C, H, W = obs.shape
    h, w = H // patch_size, W // patch_size
    x = obs.reshape(B, C, h, patch_size, w, patch_size)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(B, h * w, C * patch_size * patch_size)


def unpatchify(patches, channels=9, patch_size=12):
    B, L, _ = patches.shape
    grid = int(round(L ** 0.5))
    x = patches.reshape(B, grid, grid, channels, patch_size, patch_size)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(B, channels, grid * patch_size, grid * patch_size)


def visible_indices(mask_indices, num_patches):
    """Complement of each row of a (B, M) mask, kept in ascending grid order"""
    B = mask_indices.shape[0]
    is_masked = torch.zeros(B, num_patches, dtype=torch.bool, device=mask_indices.device)
    is_masked.scatter_(1, mask_indices, True)
    order = torch.argsort(is_masked.to(torch.int8), dim=1, stable=True)
    return order[:, :num_patches - mask_indices.shape[1]]


class ViTEncoder(nn.Module):
    """Patch embedding + learnable 1D positions + pre-norm blocks; no class token"""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or ViTConfig()
        cfg = self.config
        self.latent_dim = cfg.embed_dim

        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, cfg.embed_dim))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_dim) for _ in range(cfg.depth)]
        )

        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def embed(self, patches, mask=None, use_mask_token=True):
        """
        Project patches and add positions.
        With a (B, M) mask and use_mask_token, masked slots carry the shared mask token;
        without it, masked patches are dropped before the projection.
        """
        cfg = self.config
        validate_shape(patches, (cfg.num_patches, cfg.patch_dim), "embed input")
        B = patches.shape[0]
        positions = torch.arange(cfg.num_patches, device=patches.device).expand(B, -1)

        if mask is None:
            return TokenSequence(self.patch_embed(patches) + self.pos_embed, positions)

        mask = torch.as_tensor(mask, dtype=torch.long, device=patches.device)
        if mask.dim() == 1:
            mask = mask.expand(B, -1)
        if mask.numel() and (mask.min() < 0 or mask.max() >= cfg.num_patches):
            raise ValueError(f"mask indices must lie in [0, {cfg.num_patches})")

        if use_mask_token:
            is_masked = torch.zeros(B, cfg.num_patches, dtype=torch.bool, device=patches.device)
            is_masked.scatter_(1, mask, True)
            x = self.patch_embed(patches)
            x = torch.where(is_masked.unsqueeze(-1), self.mask_token.to(x.dtype).expand_as(x), x)
            return TokenSequence(x + self.pos_embed, positions, mask)

        keep = visible_indices(mask, cfg.num_patches)
        kept = torch.gather(patches, 1, keep.unsqueeze(-1).expand(-1, -1, patches.shape[-1]))
        pos = self.pos_embed.expand(B, -1, -1)
        pos = torch.gather(pos, 1, keep.unsqueeze(-1).expand(-1, -1, pos.shape[-1]))
        return TokenSequence(self.patch_embed(kept) + pos, keep, mask)

    def forward_tokens(self, seq, collect_last_k=0):
        x = seq.tokens
        activations = []
        first_collected = len(self.blocks) - collect_last_k
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i >= first_collected:
                activations.append(x)
        latent = layer_norm(x.mean(dim=1))
        return EncoderOutput(TokenSequence(x, seq.positions, seq.mask_indices), latent, activations)

    def forward(self, obs):
        patches = patchify(obs, self.config.patch_size)
        return self.forward_tokens(self.embed(patches)).latent


class CnnEncoder(nn.Module):
    """
    Conv 3x3 (stride 2, then 1, 1, 1) with ReLU, average-pooled before the
    linear projection so its size stays comparable to the ViT
    """

    def __init__(self, in_channels=9, num_filters=32, num_layers=4, latent_dim=128, image_size=84, pool=2):
        super().__init__()
        self.latent_dim = latent_dim
        self.pool = pool
        self.convs = nn.ModuleList([nn.Conv2d(in_channels, num_filters, 3, stride=2)])
        for _ in range(num_layers - 1):
            self.convs.append(nn.Conv2d(num_filters, num_filters, 3, stride=1))

        size = (image_size - 3) // 2 + 1 - 2 * (num_layers - 1)
        size = size // pool if pool > 1 else size
        self.fc = nn.Linear(num_filters * size * size, latent_dim)
        self.ln = nn.LayerNorm(latent_dim)

    def forward(self, obs):
        validate_shape(obs, (self.convs[0].in_channels, None, None), "cnn input")
        h = obs
        for conv in self.convs:
            h = torch.relu(conv2d(h, conv.weight, conv.bias, stride=conv.stride[0]))
        if self.pool > 1:
            h = F.avg_pool2d(h, self.pool)
        h = self.fc(h.flatten(start_dim=1))
        return torch.tanh(self.ln(h))


def make_encoder(config):
    """Build the encoder named by config.encoder"""
    if config.encoder == "vit":
        return ViTEncoder(ViTConfig(
            patch_size=config.patch_size,
            embed_dim=config.latent_dim,
            depth=config.vit_depth,
            heads=config.attention_heads,
            mlp_dim=config.vit_mlp_dim,
        ))
    if config.encoder == "cnn":
        return CnnEncoder(latent_dim=config.latent_dim, pool=config.cnn_pool)
    raise ValueError(f"Unknown encoder '{config.encoder}'. Use 'vit' or 'cnn'")


def parameter_ratio(config):
    """CNN / ViT parameter count for the given config's shapes"""
    vit = count_parameters(ViTEncoder(ViTConfig(
        patch_size=config.patch_size, embed_dim=config.latent_dim, depth=config.vit_depth,
        heads=config.attention_heads, mlp_dim=config.vit_mlp_dim,
    )))
    cnn = count_parameters(CnnEncoder(latent_dim=config.latent_dim, pool=config.cnn_pool))
    return cnn / vit

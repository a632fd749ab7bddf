"""Hybrid conv/transformer image encoder.

Stem (/2) -> inverted-bottleneck stages (/2 each) -> three hybrid blocks
(local conv, channel reduce, transformer stack, restore + 1x1 fusion) ->
1x1 conv to the shared width, flattened to patch tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .layers import TransformerLayer, count_params


@dataclass
class PatchFeatures:
    tokens: torch.Tensor  # B x N x d
    grid: tuple

    @property
    def pooled(self) -> torch.Tensor:
        return self.tokens.mean(1)


def conv_out_side(side: int, stride: int) -> int:
    # 3x3 conv, padding 1: floor((s - 1) / stride) + 1 == ceil(s / stride)
    return (side - 1) // stride + 1


def norm(channels: int) -> nn.GroupNorm:
    # per-sample normalisation over (C, H, W); keeps the forward batch-pointwise
    return nn.GroupNorm(1, channels)


class InvertedBottleneck(nn.Module):
    def __init__(self, c_in, c_out, stride, expansion):
        super().__init__()
        mid = c_in * expansion
        self.expand = nn.Conv2d(c_in, mid, 1)
        self.expand_norm = norm(mid)
        self.depthwise = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, groups=mid)
        self.depthwise_norm = norm(mid)
        self.project = nn.Conv2d(mid, c_out, 1)
        self.project_norm = norm(c_out)
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x):
        y = F.silu(self.expand_norm(self.expand(x)))
        y = F.silu(self.depthwise_norm(self.depthwise(y)))
        y = self.project_norm(self.project(y))
        return x + y if self.residual else y


class HybridBlock(nn.Module):
    def __init__(self, c_in, c_out, dim, layers, heads, stride, grid, ffn_mult=2):
        super().__init__()
        self.stride = stride
        self.grid = grid  # output side length this block was built for
        self.local = nn.Conv2d(c_in, c_in, 3, stride=stride, padding=1)
        self.local_norm = norm(c_in)
        self.reduce = nn.Conv2d(c_in, dim, 1)
        self.pos = nn.Parameter(torch.randn(grid * grid, dim) * 0.02)
        self.layers = nn.ModuleList(TransformerLayer(dim, heads, ffn_mult) for _ in range(layers))
        self.restore = nn.Conv2d(dim, c_out, 1)
        self.fuse = nn.Conv2d(c_in + c_out, c_out, 1)
        self.fuse_norm = norm(c_out)

    def forward(self, x, skip_transformer=False):
        local = F.silu(self.local_norm(self.local(x)))
        b, _, h, w = local.shape
        if h != self.grid or w != self.grid:
            raise ShapeError(f"block built for {self.grid}x{self.grid}, got {h}x{w}")
        t = self.reduce(local).flatten(2).transpose(1, 2) + self.pos
        if not skip_transformer:
            for layer in self.layers:
                t = layer(t)
        t = t.transpose(1, 2).reshape(b, -1, h, w)
        return F.silu(self.fuse_norm(self.fuse(torch.cat([local, self.restore(t)], dim=1))))

    def attention_maps(self):
        return [layer.attn.last_probs for layer in self.layers]


class ImageEncoder(nn.Module):
    def __init__(self, cfg, resolution=None):
        super().__init__()
        self.resolution = resolution or cfg.image_resolution
        sizes = cfg.spatial_sizes(self.resolution)
        n_stages = len(cfg.image_stage_channels)

        self.stem = nn.Conv2d(3, cfg.image_stem_channels, 3, stride=2, padding=1)
        self.stem_norm = norm(cfg.image_stem_channels)
        blocks = []
        c = cfg.image_stem_channels
        for c_out, n in zip(cfg.image_stage_channels, cfg.image_stage_blocks):
            for i in range(n):
                blocks.append(InvertedBottleneck(c, c_out, 2 if i == 0 else 1, cfg.image_expansion))
                c = c_out
        self.stages = nn.Sequential(*blocks)

        hybrid = []
        for i in range(3):
            hybrid.append(
                HybridBlock(
                    c,
                    cfg.image_hybrid_channels[i],
                    cfg.image_hybrid_dims[i],
                    cfg.transformer_layers_per_block[i],
                    cfg.image_heads,
                    cfg.image_hybrid_strides[i],
                    sizes[1 + n_stages + i],
                    cfg.image_ffn_mult,
                )
            )
            c = cfg.image_hybrid_channels[i]
        self.hybrid = nn.ModuleList(hybrid)
        self.head = nn.Conv2d(c, cfg.embed_dim, 1)

    def stem_features(self, images):
        """Feature map entering the first hybrid block."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(images.shape)}")
        if images.shape[-2:] != (self.resolution, self.resolution):
            raise ShapeError(f"expected {self.resolution}x{self.resolution}, got {tuple(images.shape[-2:])}")
        return self.stages(F.silu(self.stem_norm(self.stem(images))))

    def forward(self, images) -> PatchFeatures:
        x = self.stem_features(images)
        for block in self.hybrid:
            x = block(x)
        fmap = self.head(x)
        b, d, h, w = fmap.shape
        return PatchFeatures(tokens=fmap.flatten(2).transpose(1, 2).contiguous(), grid=(h, w))

    def attention_maps(self):
        return [p for block in self.hybrid for p in block.attention_maps()]


def encode_image(images, encoder: ImageEncoder) -> PatchFeatures:
    return encoder(images)


def count_image_params(encoder: nn.Module) -> int:
    return count_params(encoder)

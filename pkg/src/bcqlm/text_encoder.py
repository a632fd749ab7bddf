"""Lightweight text encoder: factorised embedding + bottlenecked transformer layers."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError, VocabError
from .layers import FeedForward, MultiHeadAttention, count_params


@dataclass
class TextFeatures:
    tokens: torch.Tensor  # B x T x d
    pooled: torch.Tensor  # B x d, before L2 normalisation
    mask: torch.Tensor  # B x T


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(1) / w.sum(1)


class BottleneckLayer(nn.Module):
    """y = LN_out(x + Up(FFN(Attn(Down(LN_in(x)))))) with attention and FFN in the narrow width."""

    def __init__(self, hidden, bottleneck, heads, ffn_mult=2):
        super().__init__()
        self.hidden = hidden
        self.ln_in = nn.LayerNorm(hidden)
        self.down = nn.Linear(hidden, bottleneck)
        self.attn = MultiHeadAttention(bottleneck, heads)
        self.ffn = FeedForward(bottleneck, bottleneck * ffn_mult)
        self.up = nn.Linear(bottleneck, hidden)
        self.ln_out = nn.LayerNorm(hidden)

    def forward(self, x, mask):
        if x.dim() != 3 or x.shape[-1] != self.hidden:
            raise ShapeError(f"expected (B, T, {self.hidden}), got {tuple(x.shape)}")
        if mask.shape != x.shape[:2]:
            raise ShapeError(f"mask {tuple(mask.shape)} does not align with {tuple(x.shape[:2])}")
        h = self.down(self.ln_in(x))
        h = self.attn(h, key_mask=mask) * mask.to(h.dtype).unsqueeze(-1)
        return self.ln_out(x + self.up(self.ffn(h)))


class TextEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.max_len = cfg.text_max_len
        self.embed_a = nn.Embedding(cfg.vocab_size, cfg.text_embed_small)
        self.embed_b = nn.Linear(cfg.text_embed_small, cfg.text_hidden, bias=False)
        self.pos = nn.Parameter(torch.randn(cfg.text_max_len, cfg.text_hidden) * 0.02)
        self.layers = nn.ModuleList(
            BottleneckLayer(cfg.text_hidden, cfg.text_bottleneck, cfg.text_heads, cfg.text_ffn_mult)
            for _ in range(cfg.text_layers)
        )
        self.proj = nn.Linear(cfg.text_hidden, cfg.embed_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> TextFeatures:
        if ids.dim() != 2 or ids.shape[1] > self.max_len:
            raise ShapeError(f"ids must be (B, T<= {self.max_len}), got {tuple(ids.shape)}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise VocabError(f"token id outside [0, {self.vocab_size})")
        x = self.embed_b(self.embed_a(ids)) + self.pos[: ids.shape[1]]
        for layer in self.layers:
            x = layer(x, mask)
        return TextFeatures(tokens=self.proj(x), pooled=self.proj(masked_mean(x, mask)), mask=mask)

    def attention_maps(self):
        return [layer.attn.last_probs for layer in self.layers]


def encode_text(ids, mask, encoder: TextEncoder) -> TextFeatures:
    return encoder(ids, mask)


def count_text_params(encoder: nn.Module) -> int:
    return count_params(encoder)

"""Question-gated cross-modal attention fusion.

Visual patch tokens query the question's token features; a sigmoid gate
computed from each patch and the pooled, projected question decides how much
of the attended signal is added back to the patch. The fused patches are
refined by an FFN + LayerNorm and mapped to decoder-space pseudo tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import MaskError, ShapeError, VariantError
from .layers import FeedForward, MultiHeadAttention

VARIANTS = ("standard", "token_balance", "visual_query")


@dataclass
class FusionOutput:
    attended: torch.Tensor
    gate: torch.Tensor
    modulated: torch.Tensor
    fused: torch.Tensor
    pseudo: torch.Tensor


def pool_text(tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mask-weighted mean over the token axis."""
    if tokens.shape[:2] != mask.shape:
        raise ShapeError(f"mask {tuple(mask.shape)} vs tokens {tuple(tokens.shape)}")
    w = mask.to(tokens.dtype)
    counts = w.sum(1, keepdim=True)
    if bool((counts == 0).any()):
        raise MaskError("every row needs at least one unmasked token")
    return (tokens * w.unsqueeze(-1)).sum(1) / counts


class GateMLP(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(2 * dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class QGCAM(nn.Module):
    def __init__(self, dim, heads, gate_hidden, decoder_dim, variant="standard"):
        super().__init__()
        if variant not in VARIANTS:
            raise VariantError(f"unknown fusion variant {variant!r}")
        self.dim = dim
        self.variant = variant
        self.cross = MultiHeadAttention(dim, heads)
        self.text_proj = nn.Linear(dim, dim)
        self.gate_mlp = GateMLP(dim, gate_hidden)
        self.ffn = FeedForward(dim, 4 * dim)
        self.norm = nn.LayerNorm(dim)
        # extra self/cross layer used only by the visual-query variant
        self.vq_attn = MultiHeadAttention(dim, heads)
        self.adapter = nn.Linear(dim, decoder_dim)

    @classmethod
    def from_config(cls, cfg, variant=None):
        return cls(cfg.embed_dim, cfg.attention_heads_fusion, cfg.gate_width, cfg.decoder_dim,
                   variant or cfg.qgcam_variant)

    def _check(self, image_tokens, text_tokens, text_mask):
        if image_tokens.dim() != 3 or image_tokens.shape[-1] != self.dim:
            raise ShapeError(f"visual tokens must be (B, N, {self.dim}), got {tuple(image_tokens.shape)}")
        if text_tokens.dim() != 3 or text_tokens.shape[-1] != self.dim:
            raise ShapeError(f"text tokens must be (B, T, {self.dim}), got {tuple(text_tokens.shape)}")
        if image_tokens.shape[0] != text_tokens.shape[0] or text_mask.shape != text_tokens.shape[:2]:
            raise ShapeError("batch or mask shape mismatch")

    def forward(self, image_tokens, text_tokens, text_mask, variant=None, gate_override=None) -> FusionOutput:
        return fuse_variant(variant or self.variant, image_tokens, text_tokens, text_mask, self, gate_override)


def cross_attend(image_tokens, text_tokens, text_mask, params: QGCAM) -> torch.Tensor:
    params._check(image_tokens, text_tokens, text_mask)
    return params.cross(image_tokens, context=text_tokens, key_mask=text_mask)


def compute_gate(image_tokens, pooled_text, params: QGCAM) -> torch.Tensor:
    if pooled_text.dim() != 2 or pooled_text.shape != (image_tokens.shape[0], params.dim):
        raise ShapeError(f"pooled text must be (B, {params.dim}), got {tuple(pooled_text.shape)}")
    ctx = params.text_proj(pooled_text).unsqueeze(1).expand(-1, image_tokens.shape[1], -1)
    return torch.sigmoid(params.gate_mlp(torch.cat([image_tokens, ctx], dim=-1)))


def fuse(image_tokens, attended, gate, params: QGCAM):
    if attended.shape != image_tokens.shape or gate.shape != image_tokens.shape[:2] + (1,):
        raise ShapeError("fusion inputs disagree in shape")
    modulated = image_tokens + gate * attended
    return modulated, params.norm(modulated + params.ffn(modulated))


def adapt(fused, params: QGCAM) -> torch.Tensor:
    if fused.shape[-1] != params.dim:
        raise ShapeError(f"fused width {fused.shape[-1]} != {params.dim}")
    return params.adapter(fused)


def token_balance_scale(image_tokens, text_tokens, text_mask) -> torch.Tensor:
    """Per-item ratio of mean text-token norm to mean patch-token norm, shape (B, 1, 1)."""
    text_norm = pool_text(text_tokens.norm(dim=-1, keepdim=True), text_mask)
    image_norm = image_tokens.norm(dim=-1).mean(1, keepdim=True)
    return (text_norm / image_norm).unsqueeze(-1)


def fuse_variant(kind, image_tokens, text_tokens, text_mask, params: QGCAM, gate_override=None) -> FusionOutput:
    if kind not in VARIANTS:
        raise VariantError(f"unknown fusion variant {kind!r}")
    if kind == "token_balance":
        image_tokens = image_tokens * token_balance_scale(image_tokens, text_tokens, text_mask)
    attended = cross_attend(image_tokens, text_tokens, text_mask, params)
    gate = compute_gate(image_tokens, pool_text(text_tokens, text_mask), params)
    if gate_override is not None:
        gate = torch.full_like(gate, float(gate_override))
    modulated, fused = fuse(image_tokens, attended, gate, params)
    if kind == "visual_query":
        context = torch.cat([fused, text_tokens], dim=1)
        ones = torch.ones(fused.shape[:2], dtype=text_mask.dtype, device=text_mask.device)
        fused = fused + params.vq_attn(fused, context=context, key_mask=torch.cat([ones, text_mask], dim=1))
    return FusionOutput(attended, gate, modulated, fused, adapt(fused, params))


def trainable_parameters(params: QGCAM, kind: str):
    """Parameters that influence the output of the given variant."""
    skip = "vq_attn." if kind != "visual_query" else None
    return [(n, p) for n, p in params.named_parameters() if skip is None or not n.startswith(skip)]

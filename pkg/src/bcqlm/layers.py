"""Building blocks shared by the encoders, the fusion module and the decoder.

Every matrix product goes through ``F.linear``/``torch.matmul`` so the
instrumented FLOP counter sees exactly the operations the analytic model in
``bcqlm.pipeline.flops`` assumes.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


def attention(q, k, v, key_mask=None, causal=False):
    """Scaled dot-product attention over (B, heads, L, d_head) tensors.

    ``key_mask`` is (B, Lk) with 1 for visible keys; hidden keys get -inf
    logits. Returns the attended values and the probability tensor.
    """
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.bool()[:, None, None, :], float("-inf"))
    if causal:
        lq, lk = scores.shape[-2:]
        future = torch.ones(lq, lk, dtype=torch.bool, device=scores.device).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    return torch.matmul(probs, v), probs


class MultiHeadAttention(nn.Module):
    """Multi-head attention with separate query and key/value sources."""

    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_probs = None

    def forward(self, x, context=None, key_mask=None, causal=False):
        context = x if context is None else context
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(context), self.heads)
        v = split_heads(self.v(context), self.heads)
        y, probs = attention(q, k, v, key_mask=key_mask, causal=causal)
        self.last_probs = probs.detach()
        return self.out(merge_heads(y))


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerLayer(nn.Module):
    """Pre-norm transformer layer: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim, heads, ffn_mult=2):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * ffn_mult)

    def forward(self, x, key_mask=None, causal=False):
        x = x + self.attn(self.ln1(x), key_mask=key_mask, causal=causal)
        return x + self.ffn(self.ln2(x))

    def zero_residual_(self):
        """Zero both output projections so the layer becomes the identity."""
        with torch.no_grad():
            for lin in (self.attn.out, self.ffn.fc2):
                lin.weight.zero_()
                lin.bias.zero_()


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

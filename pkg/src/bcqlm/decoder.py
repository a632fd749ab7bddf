"""Miniature causal language decoder with response-only supervision.

Stands in for a pretrained LLM: pseudo tokens from the fusion module are
prepended to the embedded instruction/response text, and only response
tokens contribute to the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyResponseError, ShapeError
from .layers import TransformerLayer, count_params


@dataclass
class DecoderInput:
    sequence: torch.Tensor  # B x (N+T) x d_dec
    loss_mask: torch.Tensor  # B x (N+T) bool, True where the next token is a response token
    labels: torch.Tensor  # B x (N+T) long, labels[t] = token at t+1
    num_visual: int


class Decoder(nn.Module):
    def __init__(self, vocab_size, dim, layers, heads, max_len, ffn_mult=2):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.layers = nn.ModuleList(TransformerLayer(dim, heads, ffn_mult) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size)
        self.trainable_mask = {name: True for name, _ in self.named_parameters()}

    @classmethod
    def from_config(cls, cfg, max_len=None):
        return cls(cfg.vocab_size, cfg.decoder_dim, cfg.decoder_layers, cfg.decoder_heads,
                   max_len or cfg.decoder_max_len, cfg.decoder_ffn_mult)


def assemble_input(pseudo, text_ids, response_mask, decoder: Decoder) -> DecoderInput:
    """Concatenate pseudo tokens with embedded text and build next-token labels.

    ``response_mask`` marks response positions in ``text_ids``; pass None when
    assembling a prompt for generation (no supervision).
    """
    if pseudo.dim() != 3 or pseudo.shape[-1] != decoder.dim:
        raise ShapeError(f"pseudo tokens must be (B, N, {decoder.dim}), got {tuple(pseudo.shape)}")
    if text_ids.dim() != 2 or text_ids.shape[0] != pseudo.shape[0]:
        raise ShapeError("text ids must be (B, T) with matching batch")
    b, n = pseudo.shape[:2]
    seq = torch.cat([pseudo, decoder.tok_emb(text_ids).to(pseudo.dtype)], dim=1)
    if seq.shape[1] > decoder.max_len:
        raise ShapeError(f"sequence length {seq.shape[1]} exceeds decoder capacity {decoder.max_len}")

    full_ids = torch.cat([text_ids.new_zeros(b, n), text_ids], dim=1)
    labels = torch.zeros_like(full_ids)
    labels[:, :-1] = full_ids[:, 1:]
    loss_mask = torch.zeros(full_ids.shape, dtype=torch.bool, device=text_ids.device)
    if response_mask is not None:
        if response_mask.shape != text_ids.shape:
            raise ShapeError("response mask must match text ids")
        if bool((response_mask.sum(1) == 0).any()):
            raise EmptyResponseError("every item needs at least one response token")
        resp_full = torch.cat([response_mask.new_zeros(b, n), response_mask], dim=1).bool()
        loss_mask[:, :-1] = resp_full[:, 1:]
    return DecoderInput(seq, loss_mask, labels, n)


def decode_forward(inp: DecoderInput, decoder: Decoder) -> torch.Tensor:
    x = inp.sequence
    if x.dim() != 3 or x.shape[-1] != decoder.dim or x.shape[1] > decoder.max_len:
        raise ShapeError(f"bad decoder input {tuple(x.shape)}")
    x = x + decoder.pos[: x.shape[1]]
    for layer in decoder.layers:
        x = layer(x, causal=True)
    return decoder.head(decoder.norm(x))


def generation_loss(logits, inp: DecoderInput) -> torch.Tensor:
    """Mean cross-entropy over supervised (response) positions only."""
    sel = inp.loss_mask
    if not bool(sel.any()):
        raise EmptyResponseError("no supervised positions")
    return F.cross_entropy(logits[sel], inp.labels[sel])


def unfreeze_order(decoder: Decoder):
    """Parameter names from the output side inwards: head, final norm, top layer down, embeddings."""
    return [name for name, _ in reversed(list(decoder.named_parameters()))]


def set_unfreeze_ratio(decoder: Decoder, ratio: float) -> float:
    """Mark tensors trainable (output side first) until >= ratio of scalars; return the fraction."""
    if not 0 < ratio <= 1:
        raise ValueError(f"unfreeze ratio must lie in (0, 1], got {ratio}")
    params = dict(decoder.named_parameters())
    total = sum(p.numel() for p in params.values())
    mask = {name: False for name in params}
    count = 0
    for name in unfreeze_order(decoder):
        if count >= ratio * total:
            break
        mask[name] = True
        count += params[name].numel()
    for name, p in params.items():
        p.requires_grad_(mask[name])
    decoder.trainable_mask = mask
    return count / total


def freeze_all(decoder: Decoder) -> float:
    decoder.requires_grad_(False)
    decoder.trainable_mask = {name: False for name, _ in decoder.named_parameters()}
    return 0.0


def trainable_fraction(decoder: Decoder) -> float:
    params = dict(decoder.named_parameters())
    total = sum(p.numel() for p in params.values())
    return sum(params[n].numel() for n, on in decoder.trainable_mask.items() if on) / total


@torch.no_grad()
def greedy_generate(model, image, question_ids, question_mask, prompt_ids, max_new_tokens, eos_id, allowed=None):
    """Argmax decoding for a single item; returns generated token ids (EOS excluded).

    ``model`` must provide ``pseudo_tokens(images, ids, mask)`` and ``decoder``.
    ``prompt_ids`` is the 1-D unpadded instruction (BOS + question words).
    ``allowed`` limits the argmax to ids below it (the embedding table may be
    wider than the tokenizer vocabulary).
    """
    if max_new_tokens <= 0:
        return []
    decoder = model.decoder
    pseudo = model.pseudo_tokens(image.unsqueeze(0), question_ids.unsqueeze(0), question_mask.unsqueeze(0))
    ids = prompt_ids.unsqueeze(0)
    out = []
    for _ in range(max_new_tokens):
        if pseudo.shape[1] + ids.shape[1] > decoder.max_len:
            break
        logits = decode_forward(assemble_input(pseudo, ids, None, decoder), decoder)
        nxt = int(logits[0, -1, :allowed].argmax())
        if nxt == eos_id:
            break
        out.append(nxt)
        ids = torch.cat([ids, ids.new_tensor([[nxt]])], dim=1)
    return out


def count_decoder_params(decoder: nn.Module) -> int:
    return count_params(decoder)

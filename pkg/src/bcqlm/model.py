"""Containers wiring the encoders, fusion module and decoder together."""

from __future__ import annotations

import torch
import torch.nn as nn

from .alignment import EmbeddingBatch, ProjectionHeads
from .archive import load_entries, read_archive, state_to_entries, write_archive
from .decoder import Decoder
from .image_encoder import ImageEncoder
from .qgcam import QGCAM
from .text_encoder import TextEncoder

PREFIXES = {
    "text": "text_encoder",
    "image": "image_encoder",
    "heads": "alignment",
    "qgcam": "qgcam",
    "decoder": "decoder",
}


class BreezeCLIP(nn.Module):
    def __init__(self, cfg, resolution=None):
        super().__init__()
        self.text = TextEncoder(cfg)
        self.image = ImageEncoder(cfg, resolution)
        self.heads = ProjectionHeads(cfg.teacher_dim, cfg.embed_dim)

    def embed(self, images, ids, mask) -> EmbeddingBatch:
        return EmbeddingBatch(self.image(images).pooled, self.text(ids, mask).pooled)

    def entries(self) -> dict:
        out = {}
        for key in ("text", "image", "heads"):
            out.update(state_to_entries(getattr(self, key), PREFIXES[key]))
        return out

    def load(self, entries) -> None:
        for key in ("text", "image", "heads"):
            load_entries(getattr(self, key), entries, PREFIXES[key])

    def encoder_param_count(self) -> int:
        """Scalars in the two encoders (projection heads excluded)."""
        return sum(p.numel() for m in (self.text, self.image) for p in m.parameters())


class BcQLM(nn.Module):
    def __init__(self, cfg, resolution=None):
        super().__init__()
        self.cfg = cfg
        self.breezeclip = BreezeCLIP(cfg, resolution)
        self.qgcam = QGCAM.from_config(cfg)
        n = cfg.spatial_sizes(resolution or cfg.image_resolution)[-1] ** 2
        self.decoder = Decoder.from_config(cfg, max_len=n + cfg.text_max_len)

    def fusion(self, images, ids, mask):
        patches = self.breezeclip.image(images)
        text = self.breezeclip.text(ids, mask)
        return self.qgcam(patches.tokens, text.tokens, text.mask)

    def pseudo_tokens(self, images, ids, mask):
        return self.fusion(images, ids, mask).pseudo

    def entries(self) -> dict:
        out = self.breezeclip.entries()
        out.update(state_to_entries(self.qgcam, PREFIXES["qgcam"]))
        out.update(state_to_entries(self.decoder, PREFIXES["decoder"]))
        return out

    def load(self, entries, stage1_only=False) -> None:
        self.breezeclip.load(entries)
        if not stage1_only:
            load_entries(self.qgcam, entries, PREFIXES["qgcam"])
            load_entries(self.decoder, entries, PREFIXES["decoder"])


def save_checkpoint(module, path) -> int:
    return write_archive(module.entries(), path)


def load_checkpoint(module, path, **kwargs) -> None:
    module.load(read_archive(path), **kwargs)


def seeded(cls, cfg, seed=None, dtype=torch.float32, **kwargs):
    """Instantiate ``cls(cfg)`` with a fixed torch seed so weights are reproducible."""
    torch.manual_seed(cfg.seed if seed is None else seed)
    return cls(cfg, **kwargs).to(dtype)

"""Stage-1 objectives and the teacher-embedding interface."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, TeacherLookupError


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


@dataclass
class EmbeddingBatch:
    image: torch.Tensor  # B x d
    text: torch.Tensor  # B x d

    def normalized(self) -> "EmbeddingBatch":
        return EmbeddingBatch(l2_normalize(self.image), l2_normalize(self.text))


@dataclass
class TeacherEmbeddings:
    image: torch.Tensor  # B x d_t
    text: torch.Tensor  # B x d_t
    source: str


def _cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    # row-wise log-sum-exp minus the target logit, averaged over rows
    lse = torch.logsumexp(logits, dim=1)
    return (lse - logits.gather(1, targets[:, None]).squeeze(1)).mean()


def contrastive_loss(e: EmbeddingBatch, tau: float, alpha: float) -> torch.Tensor:
    """(1/alpha) * (CE(I T^T / tau, y) + CE(T I^T / tau, y)) with y = arange(B)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    e = e.normalized()
    if e.image.shape != e.text.shape:
        raise ShapeError(f"{tuple(e.image.shape)} vs {tuple(e.text.shape)}")
    y = torch.arange(e.image.shape[0], device=e.image.device)
    logits = e.image @ e.text.T / tau
    return (_cross_entropy(logits, y) + _cross_entropy(logits.T, y)) / alpha


def distill_loss(student: EmbeddingBatch, teacher_proj, beta: float) -> torch.Tensor:
    """(1/beta) * (MSE(I_s, I_t) + MSE(T_s, T_t)) on unit-norm rows."""
    s = student.normalized()
    t_img, t_txt = teacher_proj
    if s.image.shape != t_img.shape or s.text.shape != t_txt.shape:
        raise ShapeError(
            f"student {tuple(s.image.shape)}/{tuple(s.text.shape)} vs teacher {tuple(t_img.shape)}/{tuple(t_txt.shape)}"
        )
    return (F.mse_loss(s.image, t_img) + F.mse_loss(s.text, t_txt)) / beta


def total_loss(lc, ld, lambda1: float, lambda2: float):
    return lambda1 * lc + lambda2 * ld


class ProjectionHeads(nn.Module):
    def __init__(self, teacher_dim, dim):
        super().__init__()
        self.image_head = nn.Linear(teacher_dim, dim)
        self.text_head = nn.Linear(teacher_dim, dim)


def project_teacher(t: TeacherEmbeddings, heads: ProjectionHeads):
    d_t = heads.image_head.in_features
    if t.image.shape[-1] != d_t or t.text.shape[-1] != d_t:
        raise ShapeError(f"teacher width {t.image.shape[-1]}/{t.text.shape[-1]} != head input {d_t}")
    return l2_normalize(heads.image_head(t.image)), l2_normalize(heads.text_head(t.text))


class FrozenRandomTeacher(nn.Module):
    """Fixed-seed conv image tower + bag-of-words text tower; never trained.

    Stands in for a pretrained teacher so stage 1 runs without external assets.
    """

    source = "frozen-random-net"

    def __init__(self, vocab_size, dim, seed=1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, 16, 5, stride=4, padding=2)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.image_out = nn.Linear(32, dim)
        self.words = nn.Embedding(vocab_size, 32)
        self.text_out = nn.Linear(32, dim)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * (1.0 / max(1, p.shape[-1]) ** 0.5))
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images, ids, mask) -> TeacherEmbeddings:
        h = torch.tanh(self.conv2(torch.tanh(self.conv1(images))))
        img = self.image_out(h.mean(dim=(2, 3)))
        w = mask.to(self.words.weight.dtype).unsqueeze(-1)
        bag = (self.words(ids) * w).sum(1) / w.sum(1).clamp_min(1)
        txt = self.text_out(torch.tanh(bag))
        return TeacherEmbeddings(img.detach(), txt.detach(), self.source)


class ArchiveTeacher:
    """Precomputed teacher vectors keyed ``teacher/image/{id}`` and ``teacher/text/{id}``."""

    source = "precomputed-archive"

    def __init__(self, entries: Mapping[str, np.ndarray]):
        self.entries = entries

    def lookup(self, item_ids) -> TeacherEmbeddings:
        rows_i, rows_t = [], []
        for item in item_ids:
            ki, kt = f"teacher/image/{item}", f"teacher/text/{item}"
            if ki not in self.entries or kt not in self.entries:
                raise TeacherLookupError(f"no teacher embedding for item {item!r}")
            rows_i.append(np.asarray(self.entries[ki]))
            rows_t.append(np.asarray(self.entries[kt]))
        img = torch.from_numpy(np.stack(rows_i)).float()
        txt = torch.from_numpy(np.stack(rows_t)).float()
        return TeacherEmbeddings(img, txt, self.source)


def teacher_embed(batch, teacher) -> TeacherEmbeddings:
    """Query either teacher kind with a batch dict (images, ids, mask, item_ids)."""
    if isinstance(teacher, ArchiveTeacher):
        return teacher.lookup(batch["item_ids"])
    out = teacher(batch["images"], batch["ids"], batch["mask"])
    return TeacherEmbeddings(out.image.to(batch["images"].dtype), out.text.to(batch["images"].dtype), out.source)

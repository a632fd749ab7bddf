"""Evaluation metrics: cosine alignment statistics, PCA export, VQA accuracy."""

from __future__ import annotations

import csv
import re
import string
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import DegenerateDataError, MetricsError


@dataclass
class CosineStats:
    pos_mean: float
    neg_mean: float
    gap: float


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)  # per-epoch {stage, epoch, loss, pos_mean, neg_mean, gap, lr}
    vqa_accuracy: float | None = None
    efficiency: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cosine_metrics(image, text) -> CosineStats:
    """Mean cosine of matched pairs, of mismatched pairs, and their difference."""
    i, t = _unit_rows(image), _unit_rows(text)
    b = i.shape[0]
    if b < 2:
        raise MetricsError("negative-pair statistics need at least two items")
    sim = i @ t.T
    pos = float(np.trace(sim) / b)
    neg = float((sim.sum() - np.trace(sim)) / (b * (b - 1)))
    return CosineStats(pos, neg, pos - neg)


@dataclass
class PCAResult:
    coords: np.ndarray  # M x 3
    explained_variance: np.ndarray  # (3,)
    components: np.ndarray  # 3 x d
    mean: np.ndarray


def pca3(x) -> PCAResult:
    """Project rows onto the top three principal directions of the centred data.

    Sign convention: the first nonzero loading of every component is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4:
        raise DegenerateDataError("need at least 4 rows of 2-D data")
    mean = x.mean(0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12 * max(1.0, np.abs(x).max()):
        raise DegenerateDataError("data has rank 0 after centring")
    k = min(3, vt.shape[0])
    comps = np.zeros((3, x.shape[1]))
    comps[:k] = vt[:k]
    var = np.zeros(3)
    var[:k] = s[:k] ** 2 / (x.shape[0] - 1)
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return PCAResult(xc @ comps.T, var, comps, mean)


def write_pca_csv(path, image_emb, text_emb, ids) -> PCAResult:
    """Joint PCA of image and text embeddings; columns id, modality, x, y, z, is_positive_pair."""
    i, t = _unit_rows(image_emb), _unit_rows(text_emb)
    res = pca3(np.concatenate([i, t]))
    sim = np.sum(i * t, axis=1)
    neg = (i @ t.T)
    # a pair counts as positive when its matched similarity beats every mismatched one
    np.fill_diagonal(neg, -np.inf)
    positive = sim > np.maximum(neg.max(axis=1), neg.max(axis=0))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "modality", "x", "y", "z", "is_positive_pair"])
        n = len(ids)
        for row, (x, y, z) in enumerate(res.coords):
            k = row % n
            w.writerow([ids[k], "image" if row < n else "text", f"{x:.8f}", f"{y:.8f}", f"{z:.8f}", int(positive[k])])
    return res


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    text = text.lower().translate(_PUNCT)
    return " ".join(_ARTICLES.sub(" ", text).split())


def vqa_accuracy(predictions, references) -> float:
    if len(predictions) != len(references):
        raise MetricsError(f"{len(predictions)} predictions vs {len(references)} references")
    if not references:
        raise MetricsError("no items to score")
    hits = [normalize_answer(p) == normalize_answer(r) for p, r in zip(predictions, references)]
    return sum(hits) / len(hits)

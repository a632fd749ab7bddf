"""Deterministic synthetic scenes, captions, VQA triples, tokenizer and preprocessing."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .archive import write_archive
from .errors import GraphError, ImageFormatError, VocabError

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "purple": (150, 60, 190),
    "white": (245, 245, 245),
}
CATEGORIES = ("circle", "square", "triangle", "cross")
INVERSE = {"left of": "right of", "right of": "left of", "above": "below", "below": "above"}
ANSWERS = tuple(COLORS) + ("yes", "no")
TEMPLATE_VERSION = 1


# --------------------------------------------------------------------------
# scene graphs and captions


@dataclass
class SceneObject:
    id: int
    category: str
    attributes: list = field(default_factory=list)


@dataclass
class SceneGraph:
    objects: list
    relations: list  # (subject_id, predicate, object_id)

    def validate(self) -> None:
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise GraphError("object ids must be unique")
        known = set(ids)
        for s, _, o in self.relations:
            if s not in known or o not in known:
                raise GraphError(f"relation references unknown object ({s}, {o})")

    def to_json(self) -> dict:
        return {
            "objects": [{"id": o.id, "category": o.category, "attributes": list(o.attributes)} for o in self.objects],
            "relations": [list(r) for r in self.relations],
        }

    @classmethod
    def from_json(cls, data: dict) -> "SceneGraph":
        objs = [SceneObject(o["id"], o["category"], list(o["attributes"])) for o in data["objects"]]
        return cls(objs, [tuple(r) for r in data["relations"]])


def _phrase(obj: SceneObject) -> str:
    return " ".join(["the", *obj.attributes, obj.category])


def render_caption(g: SceneGraph) -> str:
    """Relations as "{subject} is {predicate} {object}", then unrelated objects, joined by "; "."""
    g.validate()
    by_id = {o.id: o for o in g.objects}
    clauses = []
    mentioned = set()
    for s, pred, o in sorted(g.relations, key=lambda r: (r[0], r[2], r[1])):
        clauses.append(f"{_phrase(by_id[s])} is {pred} {_phrase(by_id[o])}")
        mentioned.update((s, o))
    for obj in sorted(g.objects, key=lambda o: o.id):
        if obj.id not in mentioned:
            clauses.append(_phrase(obj))
    return "; ".join(clauses)


def relation_holds(g: SceneGraph, a: int, pred: str, b: int) -> bool:
    rels = set(map(tuple, g.relations))
    return (a, pred, b) in rels or (b, INVERSE[pred], a) in rels


def answer_question(g: SceneGraph, question: str) -> str:
    """Rule-based oracle over the graph for the two question templates."""
    by_cat = {o.category: o for o in g.objects}
    m = re.fullmatch(r"what color is the (\w+)\?", question)
    if m:
        return by_cat[m.group(1)].attributes[0]
    m = re.fullmatch(r"is the (\w+) (left of|right of|above|below) the (\w+)\?", question)
    if m:
        a, pred, b = by_cat[m.group(1)].id, m.group(2), by_cat[m.group(3)].id
        return "yes" if relation_holds(g, a, pred, b) else "no"
    raise ValueError(f"question outside the template grammar: {question!r}")


# --------------------------------------------------------------------------
# procedural images


def _shape_mask(category, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if category == "circle":
        return dy * dy + dx * dx <= r * r
    if category == "square":
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if category == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if category == "cross":
        arm = r / 3
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    raise GraphError(f"cannot draw {category!r}")


def draw_scene(layout, resolution: int, rng: np.random.Generator) -> np.ndarray:
    """Render (category, color, cy, cx, r) tuples in pixel units onto a noisy gray canvas."""
    img = np.full((resolution, resolution, 3), 110.0)
    img += rng.normal(0.0, 6.0, size=img.shape)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    for category, color, cy, cx, r in layout:
        img[_shape_mask(category, yy, xx, cy, cx, r)] = COLORS[color]
    return np.clip(img, 0, 255).astype(np.uint8)


@dataclass
class SynthItem:
    item_id: str
    graph: SceneGraph
    pixels: np.ndarray  # H x W x 3 uint8
    caption: str
    question: str
    answer: str


def _item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def synth_item(seed: int, index: int, resolution: int) -> SynthItem:
    rng = _item_rng(seed, index)
    cats = rng.choice(len(CATEGORIES), size=2, replace=False)
    cols = rng.choice(len(COLORS), size=2, replace=False)
    color_names = list(COLORS)
    objects = [SceneObject(i, CATEGORIES[c], [color_names[k]]) for i, (c, k) in enumerate(zip(cats, cols))]

    r = resolution / 7.0
    horizontal = bool(rng.integers(2))
    near = resolution * rng.uniform(0.2, 0.3)
    far = resolution * rng.uniform(0.7, 0.8)
    mid = resolution * rng.uniform(0.35, 0.65)
    first = int(rng.integers(2))  # which object sits at the "near" coordinate
    coords = {}
    for obj in objects:
        a = near if obj.id == first else far
        coords[obj.id] = (mid, a) if horizontal else (a, mid)

    subj = int(rng.integers(2))
    other = 1 - subj
    subj_is_near = subj == first
    if horizontal:
        pred = "left of" if subj_is_near else "right of"
    else:
        pred = "above" if subj_is_near else "below"
    graph = SceneGraph(objects, [(subj, pred, other)])

    layout = [(o.category, o.attributes[0], *coords[o.id], r) for o in objects]
    pixels = draw_scene(layout, resolution, rng)

    if rng.integers(2) == 0:
        target = objects[int(rng.integers(2))]
        question = f"what color is the {target.category}?"
    else:
        a = int(rng.integers(2))
        b = 1 - a
        axis_preds = ("left of", "right of") if horizontal else ("above", "below")
        cross_preds = ("above", "below") if horizontal else ("left of", "right of")
        if rng.integers(2) == 0:
            q_pred = next(p for p in axis_preds if relation_holds(graph, a, p, b))
        elif rng.integers(2) == 0:
            q_pred = next(p for p in axis_preds if not relation_holds(graph, a, p, b))
        else:
            q_pred = cross_preds[int(rng.integers(2))]
        question = f"is the {objects[a].category} {q_pred} the {objects[b].category}?"
    answer = answer_question(graph, question)
    return SynthItem(f"{seed}-{index}", graph, pixels, render_caption(graph), question, answer)


def synth_dataset(seed: int, n_items: int, resolution: int = 224) -> list:
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    return [synth_item(seed, i, resolution) for i in range(n_items)]


# --------------------------------------------------------------------------
# tokenizer

_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> list:
    return _WORD.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if not tokens or any(s not in tokens for s in SPECIALS):
            raise VocabError("vocabulary must contain the special tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    pad_id = property(lambda self: self.stoi[PAD])
    unk_id = property(lambda self: self.stoi[UNK])
    bos_id = property(lambda self: self.stoi[BOS])
    eos_id = property(lambda self: self.stoi[EOS])

    def to_json(self) -> str:
        return json.dumps({"tokens": self.itos}, indent=0) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text)["tokens"])


def template_corpus() -> list:
    """Every word the template grammar can emit."""
    texts = [f"the {c} {k}" for c in COLORS for k in CATEGORIES]
    texts += [f"is {p}" for p in INVERSE]
    texts += ["what color is the", "yes no"]
    return texts


def build_vocab(corpus: Iterable[str]) -> Vocab:
    counts = Counter(w for text in corpus for w in words(text))
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocab(list(SPECIALS) + [w for w in ranked if w not in SPECIALS])


@dataclass
class TokenSequence:
    ids: list
    attention_mask: list
    raw: str


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    if vocab is None or len(vocab) == 0:
        raise VocabError("empty vocabulary")
    body = [vocab.stoi.get(w, vocab.unk_id) for w in words(text)][: max(0, max_len - 2)]
    ids = [vocab.bos_id, *body, vocab.eos_id]
    n = len(ids)
    return TokenSequence(ids + [vocab.pad_id] * (max_len - n), [1] * n + [0] * (max_len - n), text)


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    special = {vocab.stoi[s] for s in SPECIALS}
    ids = list(ids)
    bad = [i for i in ids if not 0 <= i < len(vocab)]
    if bad:
        raise VocabError(f"token ids {bad} outside vocabulary of size {len(vocab)}")
    return " ".join(vocab.itos[i] for i in ids if i not in special)


def encode_dialogue(question: str, answer: str, vocab: Vocab, max_len: int):
    """ids = BOS + question + answer + EOS (padded); response mask covers answer + EOS."""
    q = [vocab.stoi.get(w, vocab.unk_id) for w in words(question)]
    a = [vocab.stoi.get(w, vocab.unk_id) for w in words(answer)] + [vocab.eos_id]
    if 1 + len(a) > max_len:
        raise VocabError("answer does not fit in the text window")
    q = q[: max_len - 1 - len(a)]
    ids = [vocab.bos_id, *q, *a]
    resp = [0] * (1 + len(q)) + [1] * len(a)
    pad = max_len - len(ids)
    return ids + [vocab.pad_id] * pad, [1] * len(ids) + [0] * pad, resp + [0] * pad


def prompt_ids(question: str, vocab: Vocab) -> list:
    return [vocab.bos_id] + [vocab.stoi.get(w, vocab.unk_id) for w in words(question)]


# --------------------------------------------------------------------------
# images

DEFAULT_MEAN = (0.481, 0.458, 0.408)
DEFAULT_STD = (0.269, 0.261, 0.276)


def preprocess_image(raw, resolution: int, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    """H'xW'x3 pixels in [0, 255] -> 3 x res x res float32, bilinear resize then per-channel normalise."""
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ImageFormatError(f"expected H x W x 3 pixels, got shape {arr.shape}")
    x = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)
    if x.shape[1:] != (resolution, resolution):
        x = F.interpolate(x[None], size=(resolution, resolution), mode="bilinear", align_corners=False)[0]
    x = x / 255.0
    m = torch.tensor(mean, dtype=torch.float32)[:, None, None]
    s = torch.tensor(std, dtype=torch.float32)[:, None, None]
    return ((x - m) / s).numpy()


def load_image_file(path, resolution: int, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        raw = np.load(path)
    else:
        from PIL import Image

        raw = np.asarray(Image.open(path).convert("RGB"))
    return preprocess_image(raw, resolution, mean, std)


# --------------------------------------------------------------------------
# export


def export_dataset(items: Sequence[SynthItem], out_dir, cfg) -> dict:
    """Write images as a tensor archive, metadata as JSON lines, and PNG copies."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    tensors = {}
    lines = []
    for item in items:
        tensors[f"image/{item.item_id}"] = preprocess_image(item.pixels, cfg.image_resolution, cfg.norm_mean, cfg.norm_std)
        Image.fromarray(item.pixels).save(out / "images" / f"{item.item_id}.png")
        lines.append(
            json.dumps(
                {
                    "id": item.item_id,
                    "graph": item.graph.to_json(),
                    "caption": item.caption,
                    "question": item.question,
                    "answer": item.answer,
                },
                sort_keys=True,
            )
        )
    nbytes = write_archive(tensors, out / "dataset.bcqt")
    (out / "dataset.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"items": len(items), "archive_bytes": nbytes, "template_version": TEMPLATE_VERSION}


def load_exported(out_dir):
    """Inverse of ``export_dataset``: list of dicts plus an id -> image array map."""
    from .archive import read_archive

    out = Path(out_dir)
    rows = [json.loads(line) for line in (out / "dataset.jsonl").read_text(encoding="utf-8").splitlines() if line]
    images = read_archive(out / "dataset.bcqt")
    return rows, {k.split("/", 1)[1]: v for k, v in images.items()}

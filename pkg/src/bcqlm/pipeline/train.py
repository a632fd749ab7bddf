"""Two-stage training: contrastive + distillation pretraining, then fusion/decoder training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..alignment import (
    ArchiveTeacher,
    EmbeddingBatch,
    FrozenRandomTeacher,
    TeacherEmbeddings,
    contrastive_loss,
    distill_loss,
    project_teacher,
    teacher_embed,
    total_loss,
)
from ..archive import encode_archive
from ..data import Vocab, detokenize, encode_dialogue, preprocess_image, prompt_ids, tokenize
from ..decoder import (
    assemble_input,
    decode_forward,
    freeze_all,
    generation_loss,
    greedy_generate,
    set_unfreeze_ratio,
)
from ..errors import TrainingDivergedError
from ..model import BcQLM, BreezeCLIP, save_checkpoint
from ..qgcam import fuse_variant
from .metrics import MetricsReport, cosine_metrics, vqa_accuracy

log = logging.getLogger(__name__)


def step_lr(epoch: int, base_lr: float, step_size: int, gamma: float) -> float:
    return base_lr * gamma ** (epoch // step_size)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(torch.sum(g.double() ** 2)) for g in grads if g is not None))


def clip_gradients(grads, max_norm: float):
    """Scale all gradients by max_norm / g when their global L2 norm g exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    g = global_norm(grads)
    if g <= max_norm:
        return list(grads)
    scale = max_norm / g
    return [None if x is None else x * scale for x in grads]


def clip_parameters_(params, max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    g = global_norm([p.grad for p in params])
    if g > max_norm:
        scale = max_norm / g
        for p in params:
            p.grad.mul_(scale)
    return g


def make_optimizer(params, stage_cfg):
    if stage_cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=stage_cfg.lr, betas=(0.9, 0.999), eps=1e-8,
                                weight_decay=stage_cfg.weight_decay)
    return torch.optim.AdamW(params, lr=stage_cfg.lr, betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=stage_cfg.weight_decay)


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.0
    optimizer: object = None
    generator: torch.Generator | None = None
    history: list = field(default_factory=list)  # one loss per optimisation step


def _batches(n, batch_size, generator=None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(loss, stage, step):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(stage, step, float(loss.detach()))


# --------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Data:
    item_ids: list
    images: torch.Tensor
    ids: torch.Tensor
    mask: torch.Tensor


def prepare_stage1(items, vocab: Vocab, cfg) -> Stage1Data:
    imgs = np.stack([preprocess_image(it.pixels, cfg.image_resolution, cfg.norm_mean, cfg.norm_std) for it in items])
    toks = [tokenize(it.caption, vocab, cfg.text_max_len) for it in items]
    return Stage1Data(
        [it.item_id for it in items],
        torch.from_numpy(imgs),
        torch.tensor([t.ids for t in toks]),
        torch.tensor([t.attention_mask for t in toks]),
    )


def build_teacher(cfg, teacher=None):
    if teacher is not None:
        return teacher
    return FrozenRandomTeacher(cfg.vocab_size, cfg.teacher_dim, seed=cfg.seed + 1)


def _teacher_table(data: Stage1Data, teacher) -> TeacherEmbeddings:
    batch = {"images": data.images, "ids": data.ids, "mask": data.mask, "item_ids": data.item_ids}
    return teacher_embed(batch, teacher)


def stage1_objective(model: BreezeCLIP, images, ids, mask, t_img, t_txt, cfg):
    student = model.embed(images, ids, mask)
    lc = contrastive_loss(student, cfg.tau, cfg.alpha)
    proj = project_teacher(TeacherEmbeddings(t_img, t_txt, ""), model.heads)
    ld = distill_loss(student, proj, cfg.beta)
    return total_loss(lc, ld, cfg.lambda1, cfg.lambda2), student


@torch.no_grad()
def evaluate_stage1(model: BreezeCLIP, data: Stage1Data, teacher_tab: TeacherEmbeddings, cfg):
    """Total stage-1 loss averaged over fixed in-order batches, plus cosine statistics over all items."""
    losses, img_rows, txt_rows = [], [], []
    for idx in _batches(len(data.item_ids), cfg.stage1.batch_size):
        loss, student = stage1_objective(model, data.images[idx], data.ids[idx], data.mask[idx],
                                         teacher_tab.image[idx], teacher_tab.text[idx], cfg)
        losses.append(float(loss))
        img_rows.append(student.image)
        txt_rows.append(student.text)
    stats = cosine_metrics(torch.cat(img_rows).numpy(), torch.cat(txt_rows).numpy())
    return float(np.mean(losses)), stats


def pretrain_stage1(cfg, items, vocab: Vocab, teacher=None, out_dir=None, checkpoint_every=1):
    """Train the dual encoder + projection heads; returns (model, report, state).

    With ``out_dir`` set, a checkpoint is written every ``checkpoint_every``
    epochs (0 disables them) plus ``stage1_final.bcqt``.
    """
    torch.manual_seed(cfg.seed)
    model = BreezeCLIP(cfg)
    data = prepare_stage1(items, vocab, cfg)
    teacher = build_teacher(cfg, teacher)
    tab = _teacher_table(data, teacher)
    sc = cfg.stage1
    opt = make_optimizer(model.parameters(), sc)
    state = TrainState(optimizer=opt, generator=torch.Generator().manual_seed(cfg.seed))
    report = MetricsReport()
    out = Path(out_dir) if out_dir is not None else None

    def record(epoch, lr):
        loss, stats = evaluate_stage1(model, data, tab, cfg)
        report.records.append({"stage": 1, "epoch": epoch, "loss": loss, "pos_mean": stats.pos_mean,
                               "neg_mean": stats.neg_mean, "gap": stats.gap, "lr": lr})
        log.info("stage1 epoch %d loss %.5f gap %.4f", epoch, loss, stats.gap)

    record(0, step_lr(0, sc.lr, sc.step_size, sc.gamma))
    for epoch in range(sc.epochs):
        lr = step_lr(epoch, sc.lr, sc.step_size, sc.gamma)
        for group in opt.param_groups:
            group["lr"] = lr
        state.epoch, state.lr = epoch, lr
        for idx in _batches(len(data.item_ids), sc.batch_size, state.generator):
            loss, _ = stage1_objective(model, data.images[idx], data.ids[idx], data.mask[idx],
                                       tab.image[idx], tab.text[idx], cfg)
            _check_finite(loss, "stage1", len(state.history))
            opt.zero_grad()
            loss.backward()
            clip_parameters_(model.parameters(), sc.clip_norm)
            opt.step()
            state.history.append(loss.item())
        record(epoch + 1, lr)
        if out is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(model, out / f"stage1_epoch{epoch + 1:03d}.bcqt")
    if out is not None:
        save_checkpoint(model, out / "stage1_final.bcqt")
    return model, report, state


@torch.no_grad()
def stage1_embeddings(model: BreezeCLIP, data: Stage1Data) -> EmbeddingBatch:
    e = model.embed(data.images, data.ids, data.mask)
    return EmbeddingBatch(e.image, e.text)


# --------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Data:
    item_ids: list
    questions: list
    answers: list
    images: torch.Tensor
    q_ids: torch.Tensor
    q_mask: torch.Tensor
    text_ids: torch.Tensor
    resp_mask: torch.Tensor


def prepare_stage2(items, vocab: Vocab, cfg) -> Stage2Data:
    imgs = np.stack([preprocess_image(it.pixels, cfg.image_resolution, cfg.norm_mean, cfg.norm_std) for it in items])
    q = [tokenize(it.question, vocab, cfg.text_max_len) for it in items]
    dia = [encode_dialogue(it.question, it.answer, vocab, cfg.text_max_len) for it in items]
    return Stage2Data(
        [it.item_id for it in items],
        [it.question for it in items],
        [it.answer for it in items],
        torch.from_numpy(imgs),
        torch.tensor([t.ids for t in q]),
        torch.tensor([t.attention_mask for t in q]),
        torch.tensor([d[0] for d in dia]),
        torch.tensor([d[2] for d in dia]),
    )


@torch.no_grad()
def frozen_features(model: BcQLM, data: Stage2Data):
    """BreezeCLIP outputs are constant in stage 2, so compute them once."""
    patches = model.breezeclip.image(data.images).tokens
    text = model.breezeclip.text(data.q_ids, data.q_mask)
    return patches, text.tokens, text.mask


def stage2_loss(model: BcQLM, patches, t_tokens, t_mask, text_ids, resp_mask):
    fusion = fuse_variant(model.qgcam.variant, patches, t_tokens, t_mask, model.qgcam)
    inp = assemble_input(fusion.pseudo, text_ids, resp_mask, model.decoder)
    return generation_loss(decode_forward(inp, model.decoder), inp)


@torch.no_grad()
def mean_generation_loss(model: BcQLM, feats, data: Stage2Data, batch_size, image_perm=None):
    patches, t_tokens, t_mask = feats
    if image_perm is not None:
        patches = patches[image_perm]
    total, count = 0.0, 0
    for idx in _batches(len(data.item_ids), batch_size):
        loss = stage2_loss(model, patches[idx], t_tokens[idx], t_mask[idx], data.text_ids[idx], data.resp_mask[idx])
        n = int(data.resp_mask[idx].sum())
        total += float(loss) * n
        count += n
    return total / count


def freeze_breezeclip(model: BcQLM) -> None:
    model.breezeclip.requires_grad_(False)
    model.breezeclip.eval()


def apply_unfreeze(model: BcQLM, ratio: float) -> float:
    if ratio == 0:
        return freeze_all(model.decoder)
    return set_unfreeze_ratio(model.decoder, ratio)


def train_stage2(cfg, items, vocab: Vocab, breezeclip_entries, out_dir=None, checkpoint_every=1):
    """Train fusion + adapter + unfrozen decoder fraction on top of a frozen BreezeCLIP."""
    torch.manual_seed(cfg.seed + 2)
    model = BcQLM(cfg)
    model.breezeclip.load(breezeclip_entries)
    freeze_breezeclip(model)
    frozen_before = encode_archive(model.breezeclip.entries())
    fraction = apply_unfreeze(model, cfg.stage2.unfreeze_ratio)

    data = prepare_stage2(items, vocab, cfg)
    feats = frozen_features(model, data)
    sc = cfg.stage2
    params = [p for p in list(model.qgcam.parameters()) + list(model.decoder.parameters()) if p.requires_grad]
    opt = make_optimizer(params, sc)
    state = TrainState(optimizer=opt, generator=torch.Generator().manual_seed(cfg.seed + 2))
    report = MetricsReport()
    out = Path(out_dir) if out_dir is not None else None

    def record(epoch, lr):
        loss = mean_generation_loss(model, feats, data, sc.batch_size)
        report.records.append({"stage": 2, "epoch": epoch, "loss": loss, "pos_mean": None,
                               "neg_mean": None, "gap": None, "lr": lr})
        log.info("stage2 epoch %d loss %.5f", epoch, loss)

    record(0, step_lr(0, sc.lr, sc.step_size, sc.gamma))
    patches, t_tokens, t_mask = feats
    for epoch in range(sc.epochs):
        lr = step_lr(epoch, sc.lr, sc.step_size, sc.gamma)
        for group in opt.param_groups:
            group["lr"] = lr
        state.epoch, state.lr = epoch, lr
        for idx in _batches(len(data.item_ids), sc.batch_size, state.generator):
            loss = stage2_loss(model, patches[idx], t_tokens[idx], t_mask[idx], data.text_ids[idx], data.resp_mask[idx])
            _check_finite(loss, "stage2", len(state.history))
            opt.zero_grad()
            loss.backward()
            clip_parameters_(params, sc.clip_norm)
            opt.step()
            state.history.append(loss.item())
        record(epoch + 1, lr)
        if out is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(model, out / f"stage2_epoch{epoch + 1:03d}.bcqt")
    if out is not None:
        save_checkpoint(model, out / "stage2_final.bcqt")

    state.frozen_unchanged = encode_archive(model.breezeclip.entries()) == frozen_before
    state.trainable_fraction = fraction
    return model, report, state


def answer(model: BcQLM, vocab: Vocab, cfg, image: torch.Tensor, question: str, max_new_tokens=4) -> str:
    """Greedy answer for one preprocessed image (3 x H x W) and a question string."""
    q = tokenize(question, vocab, cfg.text_max_len)
    ids = greedy_generate(
        model,
        image,
        torch.tensor(q.ids),
        torch.tensor(q.attention_mask),
        torch.tensor(prompt_ids(question, vocab)[: cfg.text_max_len]),
        max_new_tokens,
        vocab.eos_id,
        allowed=len(vocab),
    )
    return detokenize(ids, vocab)


def evaluate_vqa(model: BcQLM, vocab: Vocab, cfg, items, max_new_tokens=4):
    model.eval()
    preds = []
    for it in items:
        img = torch.from_numpy(preprocess_image(it.pixels, cfg.image_resolution, cfg.norm_mean, cfg.norm_std))
        preds.append(answer(model, vocab, cfg, img, it.question, max_new_tokens))
    return preds, vqa_accuracy(preds, [it.answer for it in items])

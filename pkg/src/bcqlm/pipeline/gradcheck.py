"""Central finite-difference verification of autograd gradients (float64).

Each component is instantiated at a micro size, a fixed scalar probe loss is
built from its output, and for every trainable tensor a seeded sample of
entries is perturbed by +/- h (h = 1e-5 * max(1, |theta|)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..config import load_preset
from ..errors import GradientCheckError

COMPONENTS = ("text_encoder", "image_encoder", "alignment", "qgcam", "decoder")
QGCAM_VARIANTS = ("standard", "token_balance", "visual_query")
# below this magnitude errors are effectively absolute (zero-gradient entries,
# e.g. attention key biases, leave only finite-difference roundoff)
ERROR_FLOOR = 1e-5


def micro_config():
    """Smallest config that still exercises every code path."""
    return load_preset("tiny").replace(
        image_resolution=64,
        text_max_len=6,
        embed_dim=16,
        vocab_size=16,
        text_embed_small=4,
        text_hidden=8,
        text_bottleneck=4,
        text_layers=2,
        text_heads=2,
        image_stem_channels=4,
        image_stage_channels=[4, 8],
        image_stage_blocks=[1, 1],
        image_expansion=2,
        image_hybrid_channels=[8, 8, 8],
        image_hybrid_dims=[4, 4, 4],
        image_heads=2,
        attention_heads_fusion=8,
        decoder_layers=1,
        decoder_dim=8,
        decoder_heads=2,
        teacher_dim=6,
    )


@dataclass
class Probe:
    name: str
    params: list  # (name, tensor) pairs checked
    loss: object  # zero-argument callable returning a scalar tensor


def _text_probe(cfg, gen):
    from ..text_encoder import TextEncoder

    enc = TextEncoder(cfg.replace(text_max_len=4)).double()
    ids = torch.randint(4, cfg.vocab_size, (2, 4), generator=gen)
    mask = torch.tensor([[1, 1, 1, 1], [1, 1, 1, 0]])
    r_tok = torch.randn(2, 4, cfg.embed_dim, generator=gen, dtype=torch.float64)
    r_pool = torch.randn(2, cfg.embed_dim, generator=gen, dtype=torch.float64)

    def loss():
        f = enc(ids, mask)
        return (f.tokens * r_tok * mask[..., None]).sum() + (f.pooled * r_pool).sum()

    return [Probe("text_encoder", list(enc.named_parameters()), loss)]


def _image_probe(cfg, gen):
    from ..image_encoder import ImageEncoder

    enc = ImageEncoder(cfg).double()
    images = torch.randn(2, 3, cfg.image_resolution, cfg.image_resolution, generator=gen, dtype=torch.float64)
    r = torch.randn(2, cfg.num_patches, cfg.embed_dim, generator=gen, dtype=torch.float64)

    def loss():
        return (enc(images).tokens * r).sum()

    return [Probe("image_encoder", list(enc.named_parameters()), loss)]


def _alignment_probe(cfg, gen):
    from ..alignment import EmbeddingBatch, ProjectionHeads, TeacherEmbeddings, distill_loss, project_teacher

    heads = ProjectionHeads(cfg.teacher_dim, cfg.embed_dim).double()
    b = 3
    student = EmbeddingBatch(
        torch.randn(b, cfg.embed_dim, generator=gen, dtype=torch.float64),
        torch.randn(b, cfg.embed_dim, generator=gen, dtype=torch.float64),
    )
    teacher = TeacherEmbeddings(
        torch.randn(b, cfg.teacher_dim, generator=gen, dtype=torch.float64),
        torch.randn(b, cfg.teacher_dim, generator=gen, dtype=torch.float64),
        "test",
    )

    def loss():
        return distill_loss(student, project_teacher(teacher, heads), cfg.beta)

    return [Probe("alignment", list(heads.named_parameters()), loss)]


def _qgcam_probes(cfg, gen, variants=QGCAM_VARIANTS):
    from ..qgcam import QGCAM, fuse_variant, trainable_parameters

    probes = []
    n, t = 5, 4
    img = torch.randn(2, n, cfg.embed_dim, generator=gen, dtype=torch.float64)
    txt = torch.randn(2, t, cfg.embed_dim, generator=gen, dtype=torch.float64)
    mask = torch.tensor([[1, 1, 1, 0], [1, 1, 1, 1]])
    r = torch.randn(2, n, cfg.decoder_dim, generator=gen, dtype=torch.float64)
    for kind in variants:
        mod = QGCAM.from_config(cfg, variant=kind).double()

        def loss(mod=mod, kind=kind):
            return (fuse_variant(kind, img, txt, mask, mod).pseudo * r).sum()

        probes.append(Probe(f"qgcam.{kind}", trainable_parameters(mod, kind), loss))
    return probes


def _decoder_probe(cfg, gen):
    from ..decoder import Decoder, assemble_input, decode_forward, generation_loss

    n, t = 3, 5
    dec = Decoder(cfg.vocab_size, cfg.decoder_dim, 2, cfg.decoder_heads, n + t, cfg.decoder_ffn_mult).double()
    pseudo = torch.randn(2, n, cfg.decoder_dim, generator=gen, dtype=torch.float64)
    ids = torch.randint(4, cfg.vocab_size, (2, t), generator=gen)
    resp = torch.tensor([[0, 0, 1, 1, 0], [0, 0, 0, 1, 1]])

    def loss():
        inp = assemble_input(pseudo, ids, resp, dec)
        return generation_loss(decode_forward(inp, dec), inp)

    return [Probe("decoder", list(dec.named_parameters()), loss)]


def build_probes(component: str, seed: int = 0):
    cfg = micro_config()
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    if component == "text_encoder":
        return _text_probe(cfg, gen)
    if component == "image_encoder":
        return _image_probe(cfg, gen)
    if component == "alignment":
        return _alignment_probe(cfg, gen)
    if component == "qgcam":
        return _qgcam_probes(cfg, gen)
    if component.startswith("qgcam."):
        return _qgcam_probes(cfg, gen, (component.split(".", 1)[1],))
    if component == "decoder":
        return _decoder_probe(cfg, gen)
    raise ValueError(f"unknown component {component!r}; choose from {COMPONENTS}")


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def check_probe(probe: Probe, max_entries=12, seed=0, corrupt=False) -> dict:
    """Worst relative error per tensor for one probe."""
    params = [p for _, p in probe.params]
    for p in params:
        p.grad = None
    probe.loss().backward()
    rng = np.random.default_rng(seed)
    worst = {}
    for k, (name, p) in enumerate(probe.params):
        grad = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        if corrupt and k == 0:
            grad.view(-1)[0] += 1.0
        flat = p.data.view(-1)
        n = flat.numel()
        picks = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        if corrupt and k == 0 and 0 not in picks:
            picks = np.concatenate([[0], picks])
        err = 0.0
        with torch.no_grad():
            for i in picks:
                i = int(i)
                orig = float(flat[i])
                h = 1e-5 * max(1.0, abs(orig))
                flat[i] = orig + h
                up = float(probe.loss())
                flat[i] = orig - h
                down = float(probe.loss())
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                err = max(err, relative_error(float(grad.view(-1)[i]), numeric))
        worst[f"{probe.name}/{name}"] = err
    return worst


def gradient_report(component: str, max_entries=12, seed=0, corrupt=False) -> dict:
    report = {}
    for probe in build_probes(component, seed):
        report.update(check_probe(probe, max_entries, seed, corrupt))
    return report


def finite_diff_check(component: str, tolerance: float = 1e-4, max_entries=12, seed=0, corrupt=False) -> float:
    """Return the worst relative error; raise GradientCheckError naming the first failing tensor."""
    report = gradient_report(component, max_entries, seed, corrupt)
    for name, err in report.items():
        if not err < tolerance:
            raise GradientCheckError(name, err, tolerance)
    return max(report.values())

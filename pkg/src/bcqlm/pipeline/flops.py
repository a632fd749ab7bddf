"""Per-sample forward FLOPs: closed-form model and an instrumented counter.

Convention: only matrix products and convolutions are counted. A
multiply-accumulate is 2 FLOPs; a bias fused into the product (``addmm``,
convolution with bias) adds one FLOP per output element. Normalisation,
activations, softmax and residual additions are not counted.
"""

from __future__ import annotations

import statistics
import time
from collections import OrderedDict

import torch
from torch.utils._python_dispatch import TorchDispatchMode

aten = torch.ops.aten


# --------------------------------------------------------------------------
# closed form


def linear_flops(m: int, n: int, k: int, bias: bool = True) -> int:
    """m -> n affine map applied to k tokens."""
    return 2 * m * n * k + (n * k if bias else 0)


def conv_flops(c_in: int, c_out: int, kernel: int, out_side: int, groups: int = 1, bias: bool = True) -> int:
    out = c_out * out_side * out_side
    return 2 * (c_in // groups) * kernel * kernel * out + (out if bias else 0)


def attention_flops(dim: int, lq: int, lk: int, kv_dim: int | None = None) -> dict:
    kv_dim = kv_dim or dim
    return {
        "proj": linear_flops(dim, dim, lq) + 2 * linear_flops(kv_dim, dim, lk) + linear_flops(dim, dim, lq),
        "scores": 4 * lq * lk * dim,  # QK^T and PV, summed over heads
    }


def transformer_layer_flops(dim: int, length: int, ffn_mult: int) -> int:
    a = attention_flops(dim, length, length)
    hidden = dim * ffn_mult
    return a["proj"] + a["scores"] + linear_flops(dim, hidden, length) + linear_flops(hidden, dim, length)


def image_encoder_flops(cfg, resolution=None) -> int:
    sizes = cfg.spatial_sizes(resolution or cfg.image_resolution)
    total = conv_flops(3, cfg.image_stem_channels, 3, sizes[0])
    c, side = cfg.image_stem_channels, sizes[0]
    for stage, (c_out, n) in enumerate(zip(cfg.image_stage_channels, cfg.image_stage_blocks)):
        for i in range(n):
            mid = c * cfg.image_expansion
            out_side = sizes[1 + stage] if i == 0 else side
            total += conv_flops(c, mid, 1, side)
            total += conv_flops(mid, mid, 3, out_side, groups=mid)
            total += conv_flops(mid, c_out, 1, out_side)
            c, side = c_out, out_side
    offset = 1 + len(cfg.image_stage_channels)
    for i in range(3):
        grid = sizes[offset + i]
        dim, c_out = cfg.image_hybrid_dims[i], cfg.image_hybrid_channels[i]
        total += conv_flops(c, c, 3, grid)
        total += conv_flops(c, dim, 1, grid)
        total += cfg.transformer_layers_per_block[i] * transformer_layer_flops(dim, grid * grid, cfg.image_ffn_mult)
        total += conv_flops(dim, c_out, 1, grid)
        total += conv_flops(c + c_out, c_out, 1, grid)
        c, side = c_out, grid
    total += conv_flops(c, cfg.embed_dim, 1, side)
    return total


def text_encoder_flops(cfg, length=None) -> int:
    t = length or cfg.text_max_len
    h, b = cfg.text_hidden, cfg.text_bottleneck
    total = linear_flops(cfg.text_embed_small, h, t, bias=False)
    per_layer = (
        linear_flops(h, b, t)
        + sum(attention_flops(b, t, t).values())
        + linear_flops(b, b * cfg.text_ffn_mult, t)
        + linear_flops(b * cfg.text_ffn_mult, b, t)
        + linear_flops(b, h, t)
    )
    total += cfg.text_layers * per_layer
    # token projection plus the pooled-vector projection
    total += linear_flops(h, cfg.embed_dim, t) + linear_flops(h, cfg.embed_dim, 1)
    return total


def qgcam_flops(cfg, n_patches=None, text_len=None, variant=None) -> dict:
    n = n_patches or cfg.num_patches
    t = text_len or cfg.text_max_len
    d = cfg.embed_dim
    variant = variant or cfg.qgcam_variant
    cross = attention_flops(d, n, t)
    parts = OrderedDict()
    parts["cross.proj"] = cross["proj"]
    parts["cross.scores"] = cross["scores"]
    parts["gate"] = linear_flops(d, d, 1) + linear_flops(2 * d, cfg.gate_width, n) + linear_flops(cfg.gate_width, 1, n)
    parts["ffn"] = linear_flops(d, 4 * d, n) + linear_flops(4 * d, d, n)
    if variant == "visual_query":
        vq = attention_flops(d, n, n + t)
        parts["visual_query"] = vq["proj"] + vq["scores"]
    parts["adapter"] = linear_flops(d, cfg.decoder_dim, n)
    return parts


def decoder_flops(cfg, length=None) -> int:
    length = length or cfg.decoder_max_len
    d = cfg.decoder_dim
    total = cfg.decoder_layers * transformer_layer_flops(d, length, cfg.decoder_ffn_mult)
    return total + linear_flops(d, cfg.vocab_size, length)


def flops_report(cfg) -> dict:
    """Analytic per-sample forward FLOPs for image + question through to decoder logits."""
    q = qgcam_flops(cfg)
    modules = OrderedDict(
        image_encoder=image_encoder_flops(cfg),
        text_encoder=text_encoder_flops(cfg),
        qgcam=sum(q.values()),
        decoder=decoder_flops(cfg),
    )
    return {
        "convention": "2 FLOPs per multiply-accumulate in matmul/conv, +1 per fused bias element",
        "num_patches": cfg.num_patches,
        "text_len": cfg.text_max_len,
        "decoder_len": cfg.decoder_max_len,
        "modules": dict(modules),
        "qgcam_breakdown": dict(q),
        "total": sum(modules.values()),
    }


# --------------------------------------------------------------------------
# instrumented counter


def _numel(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


class FlopCounter(TorchDispatchMode):
    """Counts matmul/conv FLOPs of every aten op executed inside the context."""

    def __init__(self):
        super().__init__()
        self.total = 0
        self.by_op = {}

    def _add(self, name, n):
        self.total += n
        self.by_op[name] = self.by_op.get(name, 0) + n

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        out = func(*args, **kwargs)
        packet = func.overloadpacket
        if packet is aten.mm:
            (m, k), (_, n) = args[0].shape, args[1].shape
            self._add("mm", 2 * m * n * k)
        elif packet is aten.addmm:
            (m, k), (_, n) = args[1].shape, args[2].shape
            self._add("addmm", 2 * m * n * k + m * n)
        elif packet is aten.bmm:
            (b, m, k), (_, _, n) = args[0].shape, args[1].shape
            self._add("bmm", 2 * b * m * n * k)
        elif packet is aten.baddbmm:
            (b, m, k), (_, _, n) = args[1].shape, args[2].shape
            self._add("baddbmm", 2 * b * m * n * k + b * m * n)
        elif packet is aten.convolution:
            x, w, bias = args[0], args[1], args[2]
            groups = args[8]
            c_out, c_in_g, kh, kw = w.shape
            out_elems = _numel(out.shape)
            self._add("convolution", 2 * c_in_g * kh * kw * out_elems + (out_elems if bias is not None else 0))
        return out


@torch.no_grad()
def instrumented_flops(model, cfg, seed=0) -> dict:
    """Run a batch-1 forward of every stage under the counter; totals per module."""
    from ..data import tokenize  # noqa: F401  (keeps the import graph explicit)
    from ..decoder import assemble_input, decode_forward
    from ..qgcam import fuse_variant

    gen = torch.Generator().manual_seed(seed)
    res = cfg.image_resolution
    images = torch.randn(1, 3, res, res, generator=gen)
    ids = torch.randint(4, cfg.vocab_size, (1, cfg.text_max_len), generator=gen)
    mask = torch.ones_like(ids)
    counts = OrderedDict()

    with FlopCounter() as c:
        patches = model.breezeclip.image(images)
    counts["image_encoder"] = c.total
    with FlopCounter() as c:
        text = model.breezeclip.text(ids, mask)
    counts["text_encoder"] = c.total
    with FlopCounter() as c:
        fused = fuse_variant(model.qgcam.variant, patches.tokens, text.tokens, text.mask, model.qgcam)
    counts["qgcam"] = c.total
    inp = assemble_input(fused.pseudo, ids, None, model.decoder)
    with FlopCounter() as c:
        decode_forward(inp, model.decoder)
    counts["decoder"] = c.total
    return {"modules": dict(counts), "total": sum(counts.values())}


@torch.no_grad()
def measure_latency(model, cfg, runs=5, seed=0) -> dict:
    """Median wall-clock ms per sample over ``runs`` timed forwards after one warmup."""
    import resource

    from ..decoder import assemble_input, decode_forward

    gen = torch.Generator().manual_seed(seed)
    res = cfg.image_resolution
    images = torch.randn(1, 3, res, res, generator=gen)
    ids = torch.randint(4, cfg.vocab_size, (1, cfg.text_max_len), generator=gen)
    mask = torch.ones_like(ids)

    def forward():
        pseudo = model.pseudo_tokens(images, ids, mask)
        decode_forward(assemble_input(pseudo, ids, None, model.decoder), model.decoder)

    forward()
    times = []
    for _ in range(max(5, runs)):
        t0 = time.perf_counter()
        forward()
        times.append((time.perf_counter() - t0) * 1000)
    peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return {"latency_ms_per_sample": statistics.median(times), "peak_memory_bytes": peak_kb * 1024}

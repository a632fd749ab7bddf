"""Closed-form parameter counts from a config, and archive payload accounting.

The formulas below restate each layer's weight shapes directly; they never
instantiate a module, so they serve as an independent check on
``sum(p.numel())`` over the built models.
"""

from __future__ import annotations

import json
import struct


def _linear(n_in, n_out, bias=True):
    return n_in * n_out + (n_out if bias else 0)


def _conv(c_in, c_out, k, groups=1):
    return c_out * (c_in // groups) * k * k + c_out


def _norm(c):
    return 2 * c


def _mha(d, kv=None):
    kv = kv or d
    return _linear(d, d) + 2 * _linear(kv, d) + _linear(d, d)


def _ffn(d, hidden):
    return _linear(d, hidden) + _linear(hidden, d)


def _transformer_layer(d, mult):
    return 2 * _norm(d) + _mha(d) + _ffn(d, d * mult)


def text_encoder_params(cfg) -> int:
    h, b = cfg.text_hidden, cfg.text_bottleneck
    layer = _norm(h) + _linear(h, b) + _mha(b) + _ffn(b, b * cfg.text_ffn_mult) + _linear(b, h) + _norm(h)
    return (
        cfg.vocab_size * cfg.text_embed_small
        + _linear(cfg.text_embed_small, h, bias=False)
        + cfg.text_max_len * h
        + cfg.text_layers * layer
        + _linear(h, cfg.embed_dim)
    )


def image_encoder_params(cfg, resolution=None) -> int:
    sizes = cfg.spatial_sizes(resolution)
    n_stages = len(cfg.image_stage_channels)
    total = _conv(3, cfg.image_stem_channels, 3) + _norm(cfg.image_stem_channels)
    c = cfg.image_stem_channels
    for c_out, n in zip(cfg.image_stage_channels, cfg.image_stage_blocks):
        for _ in range(n):
            mid = c * cfg.image_expansion
            total += _conv(c, mid, 1) + _norm(mid) + _conv(mid, mid, 3, groups=mid) + _norm(mid)
            total += _conv(mid, c_out, 1) + _norm(c_out)
            c = c_out
    for i in range(3):
        c_out, dim = cfg.image_hybrid_channels[i], cfg.image_hybrid_dims[i]
        grid = sizes[1 + n_stages + i]
        total += _conv(c, c, 3) + _norm(c) + _conv(c, dim, 1) + grid * grid * dim
        total += cfg.transformer_layers_per_block[i] * _transformer_layer(dim, cfg.image_ffn_mult)
        total += _conv(dim, c_out, 1) + _conv(c + c_out, c_out, 1) + _norm(c_out)
        c = c_out
    return total + _conv(c, cfg.embed_dim, 1)


def projection_head_params(cfg) -> int:
    return 2 * _linear(cfg.teacher_dim, cfg.embed_dim)


def breezeclip_params(cfg, resolution=None) -> dict:
    """Parameter counts per BreezeCLIP part; ``encoders`` excludes the projection heads."""
    text = text_encoder_params(cfg)
    image = image_encoder_params(cfg, resolution)
    heads = projection_head_params(cfg)
    return {"text_encoder": text, "image_encoder": image, "alignment": heads,
            "encoders": text + image, "total": text + image + heads}


def archive_payload(blob: bytes) -> dict:
    """Bytes and scalar count per entry prefix, read from the manifest of an archive."""
    _, _, head_len = struct.unpack_from("<4sIQ", blob, 0)
    start = struct.calcsize("<4sIQ")
    manifest = json.loads(blob[start : start + head_len])["entries"]
    widths = {"f32": 4, "f64": 8, "i64": 8}
    out = {}
    for e in manifest:
        prefix = e["name"].split("/", 1)[0]
        acc = out.setdefault(prefix, {"bytes": 0, "scalars": 0})
        acc["bytes"] += e["nbytes"]
        acc["scalars"] += e["nbytes"] // widths[e["dtype"]]
    payload = len(blob) - start - head_len
    if payload != sum(a["bytes"] for a in out.values()):
        raise ValueError(f"archive payload {payload} bytes disagrees with its manifest")
    return out

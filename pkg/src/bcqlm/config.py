"""Model/training configuration: JSON presets plus validated overrides."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import ConfigSyntaxError, ConfigValidationError

PRESETS = ("tiny", "reference-large")


@dataclass
class StageConfig:
    optimizer: str = "adam"
    lr: float = 1e-5
    step_size: int = 10
    gamma: float = 0.5
    epochs: int = 64
    batch_size: int = 32
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    # fraction of decoder parameters left trainable; only read by stage 2
    unfreeze_ratio: float = 1.0


@dataclass
class ModelConfig:
    preset: str = "tiny"
    seed: int = 0

    image_resolution: int = 224
    text_max_len: int = 77
    embed_dim: int = 512
    vocab_size: int = 256

    text_embed_small: int = 16
    text_hidden: int = 64
    text_bottleneck: int = 32
    text_layers: int = 2
    text_heads: int = 2
    text_ffn_mult: int = 2

    image_stem_channels: int = 16
    image_stage_channels: list = field(default_factory=lambda: [24, 32])
    image_stage_blocks: list = field(default_factory=lambda: [1, 1])
    image_expansion: int = 4
    image_hybrid_channels: list = field(default_factory=lambda: [48, 64, 64])
    image_hybrid_dims: list = field(default_factory=lambda: [32, 48, 48])
    image_hybrid_strides: list = field(default_factory=lambda: [2, 2, 1])
    transformer_layers_per_block: list = field(default_factory=lambda: [2, 4, 3])
    image_heads: int = 2
    image_ffn_mult: int = 2

    attention_heads_fusion: int = 8
    gate_hidden: int = 0  # 0 means "same as embed_dim"
    qgcam_variant: str = "standard"

    decoder_layers: int = 4
    decoder_dim: int = 128
    decoder_heads: int = 4
    decoder_ffn_mult: int = 2

    teacher_dim: int = 64
    teacher_source: str = "frozen-random-net"

    tau: float = 0.07
    alpha: float = 0.5
    beta: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0

    norm_mean: list = field(default_factory=lambda: [0.481, 0.458, 0.408])
    norm_std: list = field(default_factory=lambda: [0.269, 0.261, 0.276])

    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(
        default_factory=lambda: StageConfig(
            optimizer="adamw", lr=1e-4, step_size=5, gamma=0.1, epochs=15, weight_decay=0.01
        )
    )

    # derived geometry -------------------------------------------------
    def spatial_sizes(self, resolution: int | None = None) -> list[int]:
        """Feature-map side length after stem, each conv stage, and each hybrid block."""
        s = resolution if resolution is not None else self.image_resolution
        sizes = []
        s = math.ceil(s / 2)
        sizes.append(s)
        for _ in self.image_stage_channels:
            s = math.ceil(s / 2)
            sizes.append(s)
        for stride in self.image_hybrid_strides:
            s = math.ceil(s / stride)
            sizes.append(s)
        return sizes

    @property
    def num_patches(self) -> int:
        side = self.spatial_sizes()[-1]
        return side * side

    @property
    def decoder_max_len(self) -> int:
        return self.num_patches + self.text_max_len

    @property
    def gate_width(self) -> int:
        return self.gate_hidden or self.embed_dim

    def replace(self, **changes) -> "ModelConfig":
        cfg = _merge(to_dict(self), changes)
        return from_dict(cfg)


def _stage_fields():
    return {f.name for f in fields(StageConfig)}


def _check(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigValidationError(name, msg)


def validate(cfg: ModelConfig) -> ModelConfig:
    _check(cfg.preset in PRESETS, "preset", f"unknown preset {cfg.preset!r}")
    _check(cfg.image_resolution >= 32, "image_resolution", "must be >= 32")
    _check(cfg.text_max_len >= 2, "text_max_len", "must leave room for begin/end markers")
    _check(cfg.embed_dim >= 1, "embed_dim", "must be positive")
    _check(
        cfg.embed_dim % cfg.attention_heads_fusion == 0,
        "embed_dim",
        f"{cfg.embed_dim} not divisible by attention_heads_fusion={cfg.attention_heads_fusion}",
    )
    _check(cfg.vocab_size >= 5, "vocab_size", "must hold the special tokens")
    _check(cfg.text_embed_small < cfg.text_hidden, "text_embed_small", "factorised width must be < text_hidden")
    _check(cfg.text_bottleneck < cfg.text_hidden, "text_bottleneck", "must be < text_hidden")
    _check(cfg.text_bottleneck % cfg.text_heads == 0, "text_heads", "must divide text_bottleneck")
    _check(cfg.text_layers >= 1, "text_layers", "must be >= 1")
    _check(len(cfg.image_stage_channels) == len(cfg.image_stage_blocks), "image_stage_blocks", "length mismatch")
    _check(all(b >= 1 for b in cfg.image_stage_blocks), "image_stage_blocks", "each stage needs a block")
    _check(len(cfg.transformer_layers_per_block) == 3, "transformer_layers_per_block", "need three hybrid blocks")
    _check(all(n >= 1 for n in cfg.transformer_layers_per_block), "transformer_layers_per_block", "counts >= 1")
    if cfg.preset == "reference-large":
        _check(
            sum(cfg.transformer_layers_per_block) == 9,
            "transformer_layers_per_block",
            "reference preset uses 9 self-attention layers",
        )
    for name in ("image_hybrid_channels", "image_hybrid_dims", "image_hybrid_strides"):
        _check(len(getattr(cfg, name)) == 3, name, "need three entries")
    _check(all(s in (1, 2) for s in cfg.image_hybrid_strides), "image_hybrid_strides", "stride must be 1 or 2")
    _check(
        all(dim % cfg.image_heads == 0 for dim in cfg.image_hybrid_dims),
        "image_heads",
        "must divide every hybrid transformer width",
    )
    _check(cfg.decoder_dim % cfg.decoder_heads == 0, "decoder_dim", "not divisible by decoder_heads")
    _check(cfg.qgcam_variant in ("standard", "token_balance", "visual_query"), "qgcam_variant", "unknown variant")
    _check(cfg.teacher_source in ("frozen-random-net", "precomputed-archive"), "teacher_source", "unknown source")
    _check(cfg.teacher_dim >= 1, "teacher_dim", "must be positive")
    for name in ("tau", "alpha", "beta", "lambda1", "lambda2"):
        value = getattr(cfg, name)
        _check(isinstance(value, (int, float)) and value > 0, name, "must be > 0")
    _check(len(cfg.norm_mean) == 3, "norm_mean", "need three channels")
    _check(len(cfg.norm_std) == 3 and all(s > 0 for s in cfg.norm_std), "norm_std", "need three positive values")
    for stage in ("stage1", "stage2"):
        sc: StageConfig = getattr(cfg, stage)
        _check(sc.optimizer in ("adam", "adamw"), f"{stage}.optimizer", "adam or adamw")
        _check(sc.lr > 0, f"{stage}.lr", "must be > 0")
        _check(sc.step_size >= 1, f"{stage}.step_size", "must be >= 1")
        _check(sc.gamma > 0, f"{stage}.gamma", "must be > 0")
        _check(sc.epochs >= 0, f"{stage}.epochs", "must be >= 0")
        _check(sc.batch_size >= 1, f"{stage}.batch_size", "must be >= 1")
        _check(sc.clip_norm > 0, f"{stage}.clip_norm", "must be > 0")
        _check(sc.weight_decay >= 0, f"{stage}.weight_decay", "must be >= 0")
        _check(0 <= sc.unfreeze_ratio <= 1, f"{stage}.unfreeze_ratio", "must lie in [0, 1]")
    return cfg


def to_dict(cfg: ModelConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def from_dict(data: dict[str, Any]) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    for key in data:
        if key not in known:
            raise ConfigValidationError(key, "unknown field")
    kwargs = dict(data)
    for stage in ("stage1", "stage2"):
        if stage in kwargs:
            raw = kwargs[stage]
            if not isinstance(raw, dict):
                raise ConfigValidationError(stage, "must be an object")
            for key in raw:
                if key not in _stage_fields():
                    raise ConfigValidationError(f"{stage}.{key}", "unknown field")
            kwargs[stage] = StageConfig(**raw)
    try:
        cfg = ModelConfig(**kwargs)
    except TypeError as exc:  # pragma: no cover - guarded by the key check above
        raise ConfigValidationError("config", str(exc)) from exc
    return validate(cfg)


def preset_dict(name: str) -> dict[str, Any]:
    if name not in PRESETS:
        raise ConfigValidationError("preset", f"unknown preset {name!r}")
    text = resources.files("bcqlm.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_preset(name: str) -> ModelConfig:
    base = to_dict(ModelConfig())
    return from_dict(_merge(base, preset_dict(name)))


def parse_config(text: str) -> ModelConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(str(exc)) from exc
    if not isinstance(data, dict):
        raise ConfigSyntaxError("top level must be a JSON object")
    preset = data.get("preset", "tiny")
    if not isinstance(preset, str):
        raise ConfigValidationError("preset", "must be a string")
    base = _merge(to_dict(ModelConfig()), preset_dict(preset))
    return from_dict(_merge(base, data))


def load_config(path) -> ModelConfig:
    """Load a JSON config file; a bare preset name is also accepted."""
    if not Path(path).exists() and Path(path).stem in PRESETS:
        return load_preset(Path(path).stem)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigSyntaxError(f"not UTF-8: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: ModelConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")

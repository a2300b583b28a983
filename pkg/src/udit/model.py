"""U-DiT denoiser: config, deterministic initialisation and the conditional forward pass."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttentionParams
from .blocks import (
    DownParams,
    FFNParams,
    UDiTBlockParams,
    UpParams,
    decoder_transition,
    encoder_transition,
    merge_block,
    udit_block,
)
from .tensor import Tensor

__all__ = [
    "UDiTConfig",
    "EmbedderParams",
    "ModelParams",
    "PRESETS",
    "preset",
    "build",
    "forward",
    "forward_cfg",
    "guide",
    "named_parameters",
    "parameter_count",
    "timestep_embedding",
    "merge_reparam",
]


@dataclass(frozen=True)
class UDiTConfig:
    base_channels: int = 96
    heads: int = 4
    depths: tuple[int, ...] = (2, 5, 8, 5, 2)
    in_channels: int = 4
    input_size: tuple[int, int] = (32, 32)
    num_classes: int = 1000
    num_timesteps: int = 1000
    embed_ratio: int = 3
    freq_dim: int = 256
    mlp_ratio: int = 4
    cosine_attn: bool = True
    rope: bool = True
    dwconv_ffn: bool = True
    reparam: bool = True
    downsample: tuple[bool, ...] | None = None
    predict_sigma: bool = False
    cfg_dropout_prob: float = 0.1
    tau_init: float = 0.1
    rope_base: float = 10000.0
    ln_eps: float = 1e-6
    final_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.downsample is None:
            object.__setattr__(self, "downsample", (True,) * self.stages)
        else:
            object.__setattr__(self, "downsample", tuple(bool(d) for d in self.downsample))
        self.validate()

    @property
    def stages(self) -> int:
        return (len(self.depths) + 1) // 2

    @property
    def cfg_enabled(self) -> bool:
        return self.cfg_dropout_prob > 0

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels if self.predict_sigma else self.in_channels

    def channels(self, stage: int) -> int:
        return self.base_channels * 2**stage

    def stage_heads(self, stage: int) -> int:
        return self.heads * 2**stage

    def embed_dim(self, stage: int) -> int:
        return self.embed_ratio * self.channels(stage)

    def segment_stage(self, segment: int) -> int:
        return min(segment, len(self.depths) - 1 - segment)

    def validate(self) -> None:
        if len(self.depths) % 2 == 0 or any(d < 0 for d in self.depths):
            raise ValueError(f"depths must be an odd-length list of non-negative counts, got {self.depths}")
        if self.base_channels <= 0 or self.heads <= 0:
            raise ValueError("base_channels and heads must be positive")
        if self.base_channels % self.heads:
            raise ValueError(f"base_channels {self.base_channels} not divisible by heads {self.heads}")
        hd = self.base_channels // self.heads
        if self.rope and hd % 4:
            raise ValueError(f"RoPE2D needs head dim divisible by 4, got {hd}")
        if len(self.downsample) != self.stages:
            raise ValueError(f"downsample needs one flag per stage ({self.stages}), got {len(self.downsample)}")
        if not 0.0 <= self.cfg_dropout_prob <= 1.0:
            raise ValueError("cfg_dropout_prob must lie in [0, 1]")
        if self.num_classes < 1 or self.num_timesteps < 1 or self.embed_ratio < 1:
            raise ValueError("num_classes, num_timesteps and embed_ratio must be positive")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be positive")
        self.check_latent(self.input_size)

    def check_latent(self, hw: tuple[int, int]) -> None:
        h, w = hw
        for k in range(self.stages):
            if k < self.stages - 1 or self.downsample[k]:
                if h % 2 or w % 2:
                    raise ValueError(f"latent {hw} cannot be halved at stage {k} (extent {(h, w)})")
            if k < self.stages - 1:
                h, w = h // 2, w // 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        d["input_size"] = list(self.input_size)
        d["downsample"] = list(self.downsample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UDiTConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


PRESETS: dict[str, dict] = {
    "udit-t": dict(base_channels=32, heads=2, depths=(1, 1, 2, 1, 1), input_size=(8, 8), num_classes=2),
    "udit-s": dict(base_channels=96, heads=4),
    "udit-b": dict(base_channels=192, heads=8),
    "udit-l": dict(base_channels=384, heads=16),
    # ImageNet-scale ablation pair: plain blocks, with and without token downsampling
    "udit-t-toy": dict(
        base_channels=64, heads=2, depths=(1, 1, 2, 1, 1),
        cosine_attn=False, rope=False, dwconv_ffn=False, reparam=False,
    ),
    "dit-unet": dict(
        base_channels=64, heads=2, depths=(1, 1, 2, 1, 1), downsample=(False, False, False),
        cosine_attn=False, rope=False, dwconv_ffn=False, reparam=False,
    ),
}


def preset(name: str, **overrides) -> UDiTConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return UDiTConfig(**{**PRESETS[name], **overrides})


@dataclass
class EmbedderParams:
    """Timestep MLP (frequency features -> e -> e) and class table of one stage."""

    t_fc1_w: Tensor
    t_fc1_b: Tensor
    t_fc2_w: Tensor
    t_fc2_b: Tensor
    label_table: Tensor


@dataclass
class ModelParams:
    config: UDiTConfig
    in_w: Tensor
    in_b: Tensor
    embedders: list[EmbedderParams]
    segments: list[list[UDiTBlockParams]]
    downs: list[DownParams]
    ups: list[UpParams]
    final_g: Tensor | None
    final_b: Tensor | None
    out_w: Tensor
    out_b: Tensor


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}" if prefix else str(i))
    elif is_dataclass(obj) and not isinstance(obj, UDiTConfig):
        for f in fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def named_parameters(params) -> list[tuple[str, Tensor]]:
    """Every parameter tensor with a stable dotted name, in construction order."""
    return list(_walk(params, ""))


def parameter_count(params) -> int:
    return sum(t.size for _, t in named_parameters(params))


class _Init:
    def __init__(self, seed: int, dtype, meta: bool = False):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.meta = meta

    def _placeholder(self, shape) -> Tensor:
        # zero-stride view: carries the shape without allocating the buffer
        t = Tensor.__new__(Tensor)
        t.data = np.broadcast_to(self.dtype(0), shape)
        t.requires_grad, t.grad, t._node, t.name = False, None, None, None
        return t

    def trunc_normal(self, shape, std: float = 0.02) -> Tensor:
        if self.meta:
            return self._placeholder(shape)
        z = self.rng.standard_normal(shape)
        bad = np.abs(z) > 2.0
        while bad.any():
            z[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > 2.0
        return Tensor(z * std, requires_grad=True, dtype=self.dtype)

    def zeros(self, shape) -> Tensor:
        if self.meta:
            return self._placeholder(shape)
        return Tensor(np.zeros(shape), requires_grad=True, dtype=self.dtype)

    def const(self, shape, value: float) -> Tensor:
        if self.meta:
            return self._placeholder(shape)
        return Tensor(np.full(shape, value), requires_grad=True, dtype=self.dtype)


def _build_block(cfg: UDiTConfig, stage: int, init: _Init) -> UDiTBlockParams:
    c, e = cfg.channels(stage), cfg.embed_dim(stage)
    heads = cfg.stage_heads(stage)
    hidden = cfg.mlp_ratio * c
    s = 2 if cfg.downsample[stage] else 1
    attn = AttentionParams(
        qkv_w=init.trunc_normal((3 * c, c)),
        qkv_b=init.zeros(3 * c),
        out_w=init.trunc_normal((c, c)),
        out_b=init.zeros(c),
        heads=heads,
        log_tau=init.const(heads, math.log(cfg.tau_init)) if cfg.cosine_attn else None,
        rope=cfg.rope,
        cosine=cfg.cosine_attn,
        s=s,
        dw_kernel=init.trunc_normal((c, 1, 3, 3)) if s == 2 else None,
        dw_shortcut=True,
        rope_base=cfg.rope_base,
    )
    ffn = FFNParams(
        fc1_w=init.trunc_normal((hidden, c)),
        fc1_b=init.zeros(hidden),
        fc2_w=init.trunc_normal((c, hidden)),
        fc2_b=init.zeros(c),
        dw_kernel=init.trunc_normal((hidden, 1, 3, 3)) if cfg.dwconv_ffn else None,
        dw_shortcut=cfg.dwconv_ffn and cfg.reparam,
    )
    return UDiTBlockParams(
        norm1_g=init.const(c, 1.0),
        norm1_b=init.zeros(c),
        norm2_g=init.const(c, 1.0),
        norm2_b=init.zeros(c),
        attn=attn,
        ffn=ffn,
        ada_w=init.zeros((6 * c, e)),
        ada_b=init.zeros(6 * c),
        eps=cfg.ln_eps,
    )


def build(config: UDiTConfig, seed: int = 0, meta: bool = False) -> ModelParams:
    """Initialise parameters deterministically from ``seed`` in the current precision.

    adaLN output layers and the output head start at zero; other weights use a
    truncated normal with std 0.02, biases zero, norm gains one. ``meta=True``
    builds shape-only placeholders (no memory, not runnable) for weight censuses.
    """
    config.validate()
    init = _Init(seed, T.get_dtype(), meta)
    c0 = config.base_channels
    in_w, in_b = init.trunc_normal((c0, config.in_channels)), init.zeros(c0)

    rows = config.num_classes + (1 if config.cfg_enabled else 0)
    embedders = []
    for k in range(config.stages):
        e = config.embed_dim(k)
        embedders.append(
            EmbedderParams(
                t_fc1_w=init.trunc_normal((e, config.freq_dim)),
                t_fc1_b=init.zeros(e),
                t_fc2_w=init.trunc_normal((e, e)),
                t_fc2_b=init.zeros(e),
                label_table=init.trunc_normal((rows, e)),
            )
        )

    segments, downs, ups = [], [], []
    n_seg = len(config.depths)
    for i, depth in enumerate(config.depths):
        k = config.segment_stage(i)
        if i > config.stages - 1:
            c = config.channels(k)
            ups.append(
                UpParams(
                    up_w=init.trunc_normal((4 * c, 2 * c)),
                    up_b=init.zeros(4 * c),
                    fuse_w=init.trunc_normal((c, 2 * c)),
                    fuse_b=init.zeros(c),
                )
            )
        segments.append([_build_block(config, k, init) for _ in range(depth)])
        if i < config.stages - 1:
            c = config.channels(k)
            downs.append(
                DownParams(
                    dw_kernel=init.trunc_normal((c, 1, 3, 3)),
                    proj_w=init.trunc_normal((2 * c, 4 * c)),
                    proj_b=init.zeros(2 * c),
                )
            )
    assert len(segments) == n_seg

    return ModelParams(
        config=config,
        in_w=in_w,
        in_b=in_b,
        embedders=embedders,
        segments=segments,
        downs=downs,
        ups=ups,
        final_g=init.const(c0, 1.0) if config.final_norm else None,
        final_b=init.zeros(c0) if config.final_norm else None,
        out_w=init.zeros((config.out_channels, c0)),
        out_b=init.zeros(config.out_channels),
    )


def merge_reparam(params: ModelParams) -> ModelParams:
    """Inference copy with every depthwise-plus-identity pair folded into one kernel."""
    from .blocks import reparam_merge

    segments = [[merge_block(b) for b in seg] for seg in params.segments]
    downs = [
        dataclasses.replace(d, dw_kernel=reparam_merge(d.dw_kernel), dw_shortcut=False) if d.dw_shortcut else d
        for d in params.downs
    ]
    return dataclasses.replace(params, segments=segments, downs=downs)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features [cos, sin] of shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros_like(emb[:, :1])], axis=1)
    return emb


def _stage_embedding(p: EmbedderParams, t_freq: Tensor, y: np.ndarray) -> Tensor:
    h = T.linear(t_freq, p.t_fc1_w, p.t_fc1_b)
    h = T.linear(T.silu(h), p.t_fc2_w, p.t_fc2_b)
    return T.add(h, T.embedding(p.label_table, y))


def _check_inputs(cfg: UDiTConfig, x_t: Tensor, t: np.ndarray, y: np.ndarray) -> None:
    if x_t.ndim != 4 or x_t.shape[1] != cfg.in_channels:
        raise ValueError(f"expected latent (B, {cfg.in_channels}, H, W), got {x_t.shape}")
    cfg.check_latent(x_t.shape[2:])
    b = x_t.shape[0]
    if t.shape != (b,) or y.shape != (b,):
        raise ValueError(f"t and y must have shape ({b},), got {t.shape} and {y.shape}")
    if t.size and (t.min() < 0 or t.max() >= cfg.num_timesteps):
        raise ValueError(f"timesteps must lie in [0, {cfg.num_timesteps})")
    top = cfg.num_classes if cfg.cfg_enabled else cfg.num_classes - 1
    if y.size and (y.min() < 0 or y.max() > top):
        raise ValueError(f"labels must lie in [0, {top}]")


def forward(params: ModelParams, x_t, t, y) -> Tensor:
    """Predict the noise in ``x_t`` (B, C, H, W) at timesteps ``t`` for labels ``y``.

    Label ``num_classes`` selects the unconditional (null) row when guidance is enabled.
    """
    cfg = params.config
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t, dtype=params.in_w.dtype)
    t = np.asarray(t)
    y = np.asarray(y, dtype=np.int64)
    _check_inputs(cfg, x_t, t, y)

    t_freq = Tensor(timestep_embedding(t, cfg.freq_dim), dtype=x_t.dtype)
    embs = [_stage_embedding(p, t_freq, y) for p in params.embedders]

    h = T.channel_linear(x_t, params.in_w, params.in_b)
    skips = []
    for i, blocks in enumerate(params.segments):
        k = cfg.segment_stage(i)
        if i > cfg.stages - 1:
            h = decoder_transition(h, skips.pop(), params.ups[i - cfg.stages])
        for blk in blocks:
            h = udit_block(h, embs[k], blk)
        if i < cfg.stages - 1:
            skips.append(h)
            h = encoder_transition(h, params.downs[i])
    if cfg.final_norm:
        h = T.layer_norm(h, params.final_g, params.final_b, cfg.ln_eps)
    return T.channel_linear(h, params.out_w, params.out_b)


def guide(eps_cond: Tensor, eps_uncond: Tensor, w: float) -> Tensor:
    """``eps_uncond + w * (eps_cond - eps_uncond)``."""
    return T.add(eps_uncond, T.scale(T.sub(eps_cond, eps_uncond), w))


def forward_cfg(params: ModelParams, x_t, t, y, w: float) -> Tensor:
    """Classifier-free guided prediction ``eps_u + w * (eps_c - eps_u)``.

    ``w == 1`` returns the conditional prediction itself. With ``predict_sigma``
    only the noise channels are guided.
    """
    cfg = params.config
    if not cfg.cfg_enabled:
        raise ValueError("model was built without a null label (cfg_dropout_prob == 0); guidance unavailable")
    cond = forward(params, x_t, t, y)
    if w == 1.0:
        return cond
    null = np.full(np.shape(y), cfg.num_classes, dtype=np.int64)
    uncond = forward(params, x_t, t, null)
    c = cfg.in_channels
    ec, eu = T.take(cond, (slice(None), slice(0, c))), T.take(uncond, (slice(None), slice(0, c)))
    guided = guide(ec, eu, w)
    if cfg.predict_sigma:
        guided = T.concat([guided, T.take(cond, (slice(None), slice(c, None)))], axis=1)
    return guided

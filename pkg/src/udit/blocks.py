"""U-DiT transformer block, depthwise-conv FFN and stage transitions."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .attention import AttentionParams, downsampler, self_attention
from .tensor import Tensor

__all__ = [
    "FFNParams",
    "UDiTBlockParams",
    "DownParams",
    "UpParams",
    "ffn_dwconv",
    "reparam_merge",
    "merge_block",
    "udit_block",
    "modulate",
    "encoder_transition",
    "decoder_transition",
]


@dataclass
class FFNParams:
    """Two channel-linear maps with an optional depthwise 3x3 conv on the hidden map.

    ``dw_shortcut`` marks the train-time identity branch parallel to the conv.
    """

    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    dw_kernel: Tensor | None = None
    dw_shortcut: bool = False


@dataclass
class UDiTBlockParams:
    norm1_g: Tensor
    norm1_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    attn: AttentionParams
    ffn: FFNParams
    ada_w: Tensor  # (6c, e)
    ada_b: Tensor
    eps: float = 1e-6


@dataclass
class DownParams:
    """Encoder transition: downsampler kernel plus the 4c -> 2c projection."""

    dw_kernel: Tensor
    proj_w: Tensor
    proj_b: Tensor
    dw_shortcut: bool = True


@dataclass
class UpParams:
    """Decoder transition: 2c -> 4c lift before batch_to_space, and the 2c -> c skip fuse."""

    up_w: Tensor
    up_b: Tensor
    fuse_w: Tensor
    fuse_b: Tensor


def reparam_merge(dw_kernel) -> Tensor:
    """Fold a parallel identity branch into a depthwise 3x3 kernel (centre tap + 1)."""
    k = dw_kernel.data if isinstance(dw_kernel, Tensor) else np.asarray(dw_kernel)
    if k.ndim != 4 or k.shape[1:] != (1, 3, 3):
        raise ValueError(f"reparam_merge expects a (C, 1, 3, 3) kernel, got {k.shape}")
    merged = k.copy()
    merged[:, 0, 1, 1] += 1
    return Tensor(merged, dtype=merged.dtype)


def ffn_dwconv(x: Tensor, p: FFNParams) -> Tensor:
    h = T.gelu(T.channel_linear(x, p.fc1_w, p.fc1_b))
    if p.dw_kernel is not None:
        y = T.depthwise_conv2d(h, p.dw_kernel)
        h = T.add(y, h) if p.dw_shortcut else y
    return T.channel_linear(h, p.fc2_w, p.fc2_b)


def modulate(z: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``z * (1 + scale) + shift`` with (B, c) modulations broadcast over tokens."""
    b, c = shift.shape
    shift = T.reshape(shift, (b, c, 1, 1))
    scale = T.reshape(scale, (b, c, 1, 1))
    return T.add(T.mul(z, T.add(scale, 1.0)), shift)


def udit_block(x: Tensor, emb: Tensor, p: UDiTBlockParams) -> Tensor:
    """adaLN-Zero block: gated attention then gated FFN, both pre-norm."""
    c = x.shape[1]
    if emb.ndim != 2 or emb.shape[1] != p.ada_w.shape[1] or emb.shape[0] != x.shape[0]:
        raise ValueError(f"embedding {emb.shape} does not match block (batch {x.shape[0]}, dim {p.ada_w.shape[1]})")
    if p.ada_w.shape[0] != 6 * c:
        raise ValueError(f"adaLN produces {p.ada_w.shape[0]} values, block needs {6 * c}")
    mod = T.linear(T.silu(emb), p.ada_w, p.ada_b)
    shift1, scale1, gate1, shift2, scale2, gate2 = T.chunk(mod, 6, axis=1)
    b = x.shape[0]

    h = modulate(T.layer_norm(x, p.norm1_g, p.norm1_b, p.eps), shift1, scale1)
    x = T.add(x, T.mul(T.reshape(gate1, (b, c, 1, 1)), self_attention(h, p.attn)))
    h = modulate(T.layer_norm(x, p.norm2_g, p.norm2_b, p.eps), shift2, scale2)
    return T.add(x, T.mul(T.reshape(gate2, (b, c, 1, 1)), ffn_dwconv(h, p.ffn)))


def merge_block(p: UDiTBlockParams) -> UDiTBlockParams:
    """Inference copy of a block with every parallel identity branch folded into its kernel."""
    attn, ffn = p.attn, p.ffn
    if attn.dw_kernel is not None and attn.dw_shortcut:
        attn = replace(attn, dw_kernel=reparam_merge(attn.dw_kernel), dw_shortcut=False)
    if ffn.dw_kernel is not None and ffn.dw_shortcut:
        ffn = replace(ffn, dw_kernel=reparam_merge(ffn.dw_kernel), dw_shortcut=False)
    return replace(p, attn=attn, ffn=ffn)


def encoder_transition(x: Tensor, p: DownParams) -> Tensor:
    """(B, c, h, w) -> (B, 2c, h/2, w/2): downsampler, phases into channels, 4c -> 2c."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"encoder transition needs even spatial extents, got {(h, w)}")
    if p.proj_w.shape[1] != 4 * c:
        raise ValueError(f"projection expects {p.proj_w.shape[1]} channels, got 4*{c}")
    y = downsampler(x, p.dw_kernel, p.dw_shortcut)
    y = T.reshape(y, (b, 4 * c, h // 2, w // 2))
    return T.channel_linear(y, p.proj_w, p.proj_b)


def decoder_transition(x: Tensor, skip: Tensor, p: UpParams) -> Tensor:
    """(B, 2c, h, w) + skip (B, c, 2h, 2w) -> (B, c, 2h, 2w)."""
    b, c2, h, w = x.shape
    c = p.fuse_w.shape[0]
    if skip.shape != (b, c, 2 * h, 2 * w):
        raise ValueError(f"skip shape {skip.shape} does not match expected {(b, c, 2 * h, 2 * w)}")
    up = T.channel_linear(x, p.up_w, p.up_b)
    up = T.batch_to_space(T.reshape(up, (4 * b, c, h, w)), 2)
    return T.channel_linear(T.concat([skip, up], axis=1), p.fuse_w, p.fuse_b)

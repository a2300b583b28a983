"""Self-attention variants used by U-DiT blocks.

``multi_head_attention`` is plain full-resolution attention. ``downsampled_self_attention``
folds the four 2x2 spatial phases of the query-key-value map into the batch
axis, lets each phase attend only within itself, and folds the results back, so
the element count never changes while the attention core costs a quarter of the
full-resolution version.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "AttentionParams",
    "Rope2DTable",
    "multi_head_attention",
    "downsampled_self_attention",
    "self_attention",
    "cosine_logits",
    "apply_rope2d",
    "downsampler",
    "MAX_LOGIT_SCALE",
]

MAX_LOGIT_SCALE = 100.0
COSINE_EPS = 1e-8


@dataclass
class AttentionParams:
    """Weights and switches of one attention layer.

    ``qkv_w`` is (3c, c), ``out_w`` is (c, c). ``log_tau`` holds one log-temperature
    per head for cosine logits; the effective inverse temperature is capped at
    :data:`MAX_LOGIT_SCALE`. ``dw_kernel`` is the depthwise 3x3 kernel of the
    downsampler (used only when ``s == 2``); ``dw_shortcut`` says whether the
    parallel identity branch is still separate (False once merged).
    """

    qkv_w: Tensor
    qkv_b: Tensor
    out_w: Tensor
    out_b: Tensor
    heads: int
    log_tau: Tensor | None = None
    rope: bool = False
    cosine: bool = False
    s: int = 1
    dw_kernel: Tensor | None = None
    dw_shortcut: bool = True
    rope_base: float = 10000.0

    def __post_init__(self):
        c = self.out_w.shape[0]
        if c % self.heads:
            raise ValueError(f"channels {c} not divisible by heads {self.heads}")
        if self.s not in (1, 2):
            raise ValueError(f"downsample factor must be 1 or 2, got {self.s}")
        if self.cosine and self.log_tau is None:
            raise ValueError("cosine attention needs log_tau")
        if self.rope and (c // self.heads) % 4:
            raise ValueError(f"RoPE2D needs head dim divisible by 4, got {c // self.heads}")

    @property
    def channels(self) -> int:
        return self.out_w.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


class Rope2DTable:
    """Cos/sin tables for 2-D rotary embeddings.

    The first half of each head's channels rotates with the column (x) index,
    the second half with the row (y) index; within a half, channels (2i, 2i+1)
    form a rotation pair with frequency ``base ** (-2i / (head_dim / 2))``.
    """

    def __init__(self, head_dim: int, max_x: int, max_y: int, base: float = 10000.0):
        if head_dim % 4:
            raise ValueError(f"RoPE2D needs head dim divisible by 4, got {head_dim}")
        self.head_dim = head_dim
        self.base = base
        half = head_dim // 2
        freqs = base ** (-np.arange(0, half, 2, dtype=np.float64) / half)
        self.x_angles = np.arange(max_x, dtype=np.float64)[:, None] * freqs[None, :]
        self.y_angles = np.arange(max_y, dtype=np.float64)[:, None] * freqs[None, :]

    def angles(self, positions: np.ndarray) -> np.ndarray:
        """Angles (tokens, head_dim / 2) for integer (x, y) positions of shape (tokens, 2)."""
        positions = np.asarray(positions)
        return np.concatenate([self.x_angles[positions[:, 0]], self.y_angles[positions[:, 1]]], axis=1)

    def cos_sin(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ang = self.angles(positions)
        return np.cos(ang), np.sin(ang)


def grid_positions(h: int, w: int) -> np.ndarray:
    """Row-major (x, y) positions of an h x w grid."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


@lru_cache(maxsize=64)
def _grid_cos_sin(head_dim: int, h: int, w: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    table = Rope2DTable(head_dim, w, h, base)
    return table.cos_sin(grid_positions(h, w))


def apply_rope2d(t: Tensor, positions: np.ndarray, table: Rope2DTable) -> Tensor:
    """Rotate ``t`` (..., tokens, head_dim) by the 2-D position of each token."""
    if t.shape[-1] != table.head_dim:
        raise ValueError(f"head dim {t.shape[-1]} does not match table ({table.head_dim})")
    cos, sin = table.cos_sin(positions)
    return T.rotate_pairs(t, cos, sin)


def logit_scale(log_tau: Tensor) -> Tensor:
    """Per-head 1/tau, capped at MAX_LOGIT_SCALE."""
    return T.exp(T.clamp_max(T.scale(log_tau, -1.0), math.log(MAX_LOGIT_SCALE)))


def cosine_logits(q: Tensor, k: Tensor, log_tau: Tensor) -> Tensor:
    """Cosine similarity of every query/key pair divided by the head temperature.

    ``q`` and ``k`` are (B, heads, tokens, head_dim); ``log_tau`` is (heads,).
    """
    qn = T.l2_normalize(q, axis=-1, eps=COSINE_EPS)
    kn = T.l2_normalize(k, axis=-1, eps=COSINE_EPS)
    logits = T.matmul(qn, T.transpose(kn, (0, 1, 3, 2)))
    return T.mul(logits, T.reshape(logit_scale(log_tau), (-1, 1, 1)))


def _attend(qkv: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head attention core over a (B, 3c, h, w) map; returns (B, c, h, w)."""
    b, c3, h, w = qkv.shape
    c, nh = c3 // 3, p.heads
    hd, n = c // nh, h * w
    t = T.transpose(T.reshape(qkv, (b, 3, nh, hd, n)), (1, 0, 2, 4, 3))
    q, k, v = T.take(t, 0), T.take(t, 1), T.take(t, 2)
    if p.rope:
        cos, sin = _grid_cos_sin(hd, h, w, p.rope_base)
        q = T.rotate_pairs(q, cos, sin)
        k = T.rotate_pairs(k, cos, sin)
    if p.cosine:
        logits = cosine_logits(q, k, p.log_tau)
    else:
        logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    a = T.softmax(logits, axis=-1)
    o = T.matmul(a, v)
    return T.reshape(T.transpose(o, (0, 1, 3, 2)), (b, c, h, w))


def _check_input(x: Tensor, p: AttentionParams) -> None:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ValueError(f"attention expects (B, {p.channels}, H, W), got {x.shape}")


def multi_head_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Full-resolution attention over all h*w tokens of ``x`` (B, c, h, w)."""
    _check_input(x, p)
    qkv = T.channel_linear(x, p.qkv_w, p.qkv_b)
    return T.channel_linear(_attend(qkv, p), p.out_w, p.out_b)


def downsampler(x: Tensor, dw_kernel: Tensor | None, shortcut: bool = True) -> Tensor:
    """Depthwise 3x3 conv in parallel with an identity shortcut, then 2x space-to-batch.

    (B, c, h, w) -> (4B, c, h/2, w/2). With ``dw_kernel=None`` this is the bare
    space-to-batch; with ``shortcut=False`` the kernel is assumed to carry the
    identity already (merged form).
    """
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"downsampler needs even spatial extents, got {x.shape[2:]}")
    if dw_kernel is not None:
        y = T.depthwise_conv2d(x, dw_kernel)
        x = T.add(y, x) if shortcut else y
    return T.space_to_batch(x, 2)


def downsampled_self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Attention among 2x-downsampled tokens; output keeps the (B, c, h, w) shape.

    Each of the four phase sub-grids ``x[:, :, dy::2, dx::2]`` attends only
    within itself. When ``p.dw_kernel`` is set the downsampler's depthwise
    branch is applied first.
    """
    _check_input(x, p)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"downsampled attention needs even h and w, got {x.shape[2:]}")
    xs = downsampler(x, p.dw_kernel, p.dw_shortcut)
    qkv = T.channel_linear(xs, p.qkv_w, p.qkv_b)
    o = T.batch_to_space(_attend(qkv, p), 2)
    return T.channel_linear(o, p.out_w, p.out_b)


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    if p.s == 2:
        return downsampled_self_attention(x, p)
    return multi_head_attention(x, p)

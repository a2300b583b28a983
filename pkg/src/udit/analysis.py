"""Analytical parameter and FLOP accounting for U-DiT and isotropic DiT configs.

Counting conventions match :func:`udit.tensor.trace_flops`: a multiply-add is
2 FLOPs, softmax costs 5 FLOPs per element, layer norm 8 FLOPs per element,
element-wise ops and bias adds are free. Costs are for a single sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import UDiTConfig, build, forward, named_parameters

__all__ = [
    "CostEntry",
    "CostReport",
    "IsoDiTConfig",
    "ISO_PRESETS",
    "count",
    "attention_cost",
    "compare",
    "verify_against_runtime",
    "RuntimeCheck",
]


@dataclass(frozen=True)
class CostEntry:
    name: str
    params: int
    flops: int
    group: str = ""
    attention_core: bool = False
    contraction: bool = True


@dataclass
class CostReport:
    name: str
    entries: list[CostEntry] = field(default_factory=list)

    def add(self, name: str, params: int = 0, flops: int = 0, group: str = "", **kw) -> None:
        self.entries.append(CostEntry(name, int(params), int(flops), group, **kw))

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def attention_core_flops(self) -> int:
        """QK^T plus AV products only."""
        return sum(e.flops for e in self.entries if e.attention_core)

    @property
    def macs(self) -> float:
        """Multiply-adds of the contractions (matmuls, linears, convolutions)."""
        return sum(e.flops for e in self.entries if e.contraction) / 2

    def by_group(self) -> dict[str, tuple[int, int]]:
        out: dict[str, list[int]] = {}
        for e in self.entries:
            acc = out.setdefault(e.group, [0, 0])
            acc[0] += e.params
            acc[1] += e.flops
        return {k: (v[0], v[1]) for k, v in out.items()}

    def records(self) -> list[str]:
        """Machine-readable key=value lines."""
        lines = [
            f"model={self.name} params={self.params} flops={self.flops} "
            f"attention_core_flops={self.attention_core_flops} macs={int(self.macs)}"
        ]
        for g, (p, f) in self.by_group().items():
            lines.append(f"model={self.name} group={g} params={p} flops={f}")
        return lines

    def summary(self) -> str:
        return (
            f"{self.name}: params {self.params / 1e6:.2f}M  GFLOPs {self.flops / 1e9:.2f}  "
            f"attention-core GFLOPs {self.attention_core_flops / 1e9:.3f}  GMACs {self.macs / 1e9:.2f}"
        )


@dataclass(frozen=True)
class IsoDiTConfig:
    """Isotropic DiT: patchify, ``depth`` adaLN-Zero blocks, linear unpatchify."""

    hidden: int = 384
    depth: int = 12
    heads: int = 6
    patch: int = 2
    in_channels: int = 4
    input_size: tuple[int, int] = (32, 32)
    num_classes: int = 1000
    learn_sigma: bool = True
    mlp_ratio: int = 4
    freq_dim: int = 256

    def __post_init__(self):
        h, w = self.input_size
        if h % self.patch or w % self.patch:
            raise ValueError(f"latent {self.input_size} not divisible by patch size {self.patch}")
        if self.hidden % self.heads:
            raise ValueError("hidden not divisible by heads")


ISO_PRESETS: dict[str, IsoDiTConfig] = {
    "dit-s2": IsoDiTConfig(384, 12, 6, 2),
    "dit-s4": IsoDiTConfig(384, 12, 6, 4),
    "dit-b2": IsoDiTConfig(768, 12, 12, 2),
    "dit-l2": IsoDiTConfig(1024, 24, 16, 2),
    "dit-l4": IsoDiTConfig(1024, 24, 16, 4),
    "dit-xl2": IsoDiTConfig(1152, 28, 16, 2),
}


def attention_cost(n: int, d: int, s: int = 1) -> int:
    """FLOPs of QK^T and AV for an n x n map of dimension d, tokens downsampled by ``s``.

    Full attention costs ``2 * 2 * n**4 * d``; with ``s = 2`` four sub-attentions
    over ``(n / 2) ** 2`` tokens each cost exactly a quarter of that in total.
    """
    if s not in (1, 2):
        raise ValueError(f"s must be 1 or 2, got {s}")
    if n % s:
        raise ValueError(f"side {n} not divisible by downsample factor {s}")
    tokens = (n // s) ** 2
    return s * s * 2 * (2 * tokens * tokens * d)


def _attn_core(tokens: int, c: int, heads: int, groups: int) -> tuple[int, int]:
    """(QK^T + AV flops, softmax flops) for ``groups`` independent attentions."""
    per = tokens // groups
    core = groups * 2 * (2 * per * per * c)
    soft = groups * 5 * heads * per * per
    return core, soft


def _count_udit(cfg: UDiTConfig, latent: tuple[int, int, int], name: str) -> CostReport:
    cin, h0, w0 = latent
    if cin != cfg.in_channels:
        raise ValueError(f"latent channels {cin} do not match config ({cfg.in_channels})")
    cfg.check_latent((h0, w0))
    r = CostReport(name)
    c0 = cfg.base_channels
    n0 = h0 * w0
    r.add("input_head", c0 * cin + c0, 2 * n0 * c0 * cin, "head")

    rows = cfg.num_classes + (1 if cfg.cfg_enabled else 0)
    for k in range(cfg.stages):
        e = cfg.embed_dim(k)
        g = f"embed{k}"
        r.add(f"{g}.t_fc1", cfg.freq_dim * e + e, 2 * cfg.freq_dim * e, g)
        r.add(f"{g}.t_fc2", e * e + e, 2 * e * e, g)
        r.add(f"{g}.labels", rows * e, 0, g)

    sizes = [(h0 >> k, w0 >> k) for k in range(cfg.stages)]
    for i, depth in enumerate(cfg.depths):
        k = cfg.segment_stage(i)
        c, e, heads = cfg.channels(k), cfg.embed_dim(k), cfg.stage_heads(k)
        hidden = cfg.mlp_ratio * c
        n = sizes[k][0] * sizes[k][1]
        g = f"seg{i}"
        if i > cfg.stages - 1:
            r.add(f"{g}.up", 2 * c * 4 * c + 4 * c, 2 * (n // 4) * 2 * c * 4 * c, g)
            r.add(f"{g}.fuse", 2 * c * c + c, 2 * n * 2 * c * c, g)
        for j in range(depth):
            b = f"{g}.block{j}"
            s = 2 if cfg.downsample[k] else 1
            r.add(f"{b}.adaln", 6 * c * e + 6 * c, 2 * e * 6 * c, g)
            r.add(f"{b}.norm1", 2 * c, 8 * c * n, g, contraction=False)
            if s == 2:
                r.add(f"{b}.attn.downsampler", 9 * c, 2 * 9 * c * n, g)
            r.add(f"{b}.attn.qkv", 3 * c * c + 3 * c, 2 * n * 3 * c * c, g)
            core, soft = _attn_core(n, c, heads, s * s)
            r.add(f"{b}.attn.core", 0, core, g, attention_core=True)
            r.add(f"{b}.attn.softmax", 0, soft, g, contraction=False)
            if cfg.cosine_attn:
                r.add(f"{b}.attn.log_tau", heads, 0, g)
            r.add(f"{b}.attn.out", c * c + c, 2 * n * c * c, g)
            r.add(f"{b}.norm2", 2 * c, 8 * c * n, g, contraction=False)
            r.add(f"{b}.ffn.fc1", c * hidden + hidden, 2 * n * c * hidden, g)
            if cfg.dwconv_ffn:
                r.add(f"{b}.ffn.dwconv", 9 * hidden, 2 * 9 * hidden * n, g)
            r.add(f"{b}.ffn.fc2", hidden * c + c, 2 * n * hidden * c, g)
        if i < cfg.stages - 1:
            r.add(f"{g}.down.dwconv", 9 * c, 2 * 9 * c * n, g)
            r.add(f"{g}.down.proj", 4 * c * 2 * c + 2 * c, 2 * (n // 4) * 4 * c * 2 * c, g)

    cout = cfg.out_channels
    if cfg.final_norm:
        r.add("final_norm", 2 * c0, 8 * c0 * n0, "head", contraction=False)
    r.add("output_head", c0 * cout + cout, 2 * n0 * c0 * cout, "head")
    return r


def _count_iso(cfg: IsoDiTConfig, latent: tuple[int, int, int], name: str) -> CostReport:
    cin, hh, ww = latent
    if hh % cfg.patch or ww % cfg.patch:
        raise ValueError(f"latent {(hh, ww)} not divisible by patch size {cfg.patch}")
    r = CostReport(name)
    d, p = cfg.hidden, cfg.patch
    n = (hh // p) * (ww // p)
    cout = 2 * cin if cfg.learn_sigma else cin
    hidden = cfg.mlp_ratio * d
    r.add("patch_embed", cin * p * p * d + d, 2 * n * cin * p * p * d, "head")
    r.add("t_embed", cfg.freq_dim * d + d + d * d + d, 2 * cfg.freq_dim * d + 2 * d * d, "embed")
    r.add("labels", (cfg.num_classes + 1) * d, 0, "embed")
    for j in range(cfg.depth):
        b = f"block{j}"
        r.add(f"{b}.adaln", 6 * d * d + 6 * d, 2 * d * 6 * d, "blocks")
        r.add(f"{b}.norms", 0, 2 * 8 * d * n, "blocks", contraction=False)
        r.add(f"{b}.attn.qkv", 3 * d * d + 3 * d, 2 * n * 3 * d * d, "blocks")
        core, soft = _attn_core(n, d, cfg.heads, 1)
        r.add(f"{b}.attn.core", 0, core, "blocks", attention_core=True)
        r.add(f"{b}.attn.softmax", 0, soft, "blocks", contraction=False)
        r.add(f"{b}.attn.out", d * d + d, 2 * n * d * d, "blocks")
        r.add(f"{b}.mlp", 2 * d * hidden + hidden + d, 4 * n * d * hidden, "blocks")
    r.add("final.adaln", 2 * d * d + 2 * d, 2 * d * 2 * d, "head")
    r.add("final.norm", 0, 8 * d * n, "head", contraction=False)
    r.add("final.linear", d * p * p * cout + p * p * cout, 2 * n * d * p * p * cout, "head")
    return r


def count(config, latent: tuple[int, int, int] | None = None, name: str | None = None) -> CostReport:
    """Analytical cost of one forward pass at ``latent`` = (C, H, W)."""
    if latent is None:
        latent = (config.in_channels,) + tuple(config.input_size)
    if isinstance(config, UDiTConfig):
        return _count_udit(config, tuple(latent), name or "udit")
    if isinstance(config, IsoDiTConfig):
        return _count_iso(config, tuple(latent), name or "dit")
    raise TypeError(f"unsupported config type {type(config).__name__}")


def compare(reports: list[CostReport], reference: int = 0) -> str:
    """Side-by-side aligned table; the last column is the FLOP ratio to ``reports[reference]``."""
    ref = reports[reference].flops if reports else 0
    header = f"{'model':<16}{'params(M)':>12}{'GFLOPs':>10}{'attn-core GFLOPs':>18}{'GMACs':>9}{'ratio':>8}"
    lines = [header, "-" * len(header)]
    for r in reports:
        ratio = r.flops / ref if ref else float("nan")
        lines.append(
            f"{r.name:<16}{r.params / 1e6:>12.2f}{r.flops / 1e9:>10.3f}"
            f"{r.attention_core_flops / 1e9:>18.4f}{r.macs / 1e9:>9.3f}{ratio:>8.3f}"
        )
    return "\n".join(lines)


@dataclass
class RuntimeCheck:
    analytical_params: int
    instantiated_params: int
    analytical_flops: int
    traced_flops: int
    mismatches: list[str] = field(default_factory=list)

    @property
    def flop_rel_error(self) -> float:
        if self.analytical_flops == 0:
            return 0.0 if self.traced_flops == 0 else float("inf")
        return abs(self.traced_flops - self.analytical_flops) / self.analytical_flops

    @property
    def ok(self) -> bool:
        return self.analytical_params == self.instantiated_params and self.flop_rel_error <= 1e-3 and not self.mismatches


def verify_against_runtime(
    config: UDiTConfig, latent: tuple[int, int, int] | None = None, trace: bool = True, seed: int = 0
) -> RuntimeCheck:
    """Compare analytical counts with a weight census of a built model and a traced forward pass.

    ``trace=False`` builds shape-only weights (no forward), which keeps the
    census cheap for large configs.
    """
    latent = tuple(latent or (config.in_channels,) + tuple(config.input_size))
    report = count(config, latent)
    params = build(config, seed, meta=not trace)
    census = sum(t.size for _, t in named_parameters(params))
    traced = 0
    mismatches = []
    if census != report.params:
        mismatches.append(f"params: analytical {report.params} vs instantiated {census}")
    if trace:
        x = np.zeros((1,) + latent, dtype=params.in_w.dtype)
        with T.no_grad(), T.trace_flops() as tally:
            forward(params, x, np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64))
        traced = tally.total
        rel = abs(traced - report.flops) / max(report.flops, 1)
        if rel > 1e-3:
            mismatches.append(f"flops: analytical {report.flops} vs traced {traced} ({rel:.2e})")
    return RuntimeCheck(report.params, census, report.flops, traced if trace else report.flops, mismatches)

"""Finite-difference verification of every backward rule, in float64.

Each case builds a function of a few tensors; the check compares the gradient
of ``sum(f(inputs) * R)`` (fixed random ``R``) against fourth-order central
differences.
The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``
where ``floor`` is ``1e-3`` times the largest gradient magnitude of that input,
so coordinates whose true gradient is essentially zero are judged on an
absolute scale.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionParams, downsampled_self_attention, multi_head_attention
from .blocks import DownParams, FFNParams, UDiTBlockParams, UpParams, decoder_transition, encoder_transition, ffn_dwconv, udit_block
from .model import build, forward, named_parameters, preset
from .tensor import Tensor

__all__ = ["GradCase", "GradResult", "TOLERANCE", "MODULES", "check", "cases", "run_suite", "format_report"]

TOLERANCE = 1e-6
STEP = 1e-3
MODULES = ("tensor", "attention", "blocks", "model")

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


@dataclass(frozen=True)
class GradCase:
    name: str
    module: str
    build: Builder
    max_coords: int | None = None  # per input; None checks every coordinate
    directional: int = 0  # extra random-direction probes over all inputs jointly


@dataclass(frozen=True)
class GradResult:
    name: str
    module: str
    max_rel_error: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _loss(fn, inputs, r) -> float:
    with T.no_grad():
        return float(np.sum(fn(*inputs).data * r))


def _central(f: Callable[[float], float]) -> float:
    """Fourth-order central difference of ``f`` at 0: truncation O(h^4), round-off O(eps / h)."""
    h = STEP
    return (8 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12 * h)


def check(case: GradCase, seed: int = 0) -> GradResult:
    with T.precision("float64"):
        rng = np.random.default_rng(seed)
        fn, inputs = case.build(rng)
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        out = fn(*inputs)
        r = rng.standard_normal(out.shape)
        T.backward(T.sum_(T.mul(out, Tensor(r))))
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        worst, coords = 0.0, 0
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            idx = np.arange(flat.size)
            if case.max_coords is not None and flat.size > case.max_coords:
                idx = rng.choice(flat.size, case.max_coords, replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]

                def at(delta):
                    flat[i] = orig + delta
                    return _loss(fn, inputs, r)

                num[j] = _central(at)
                flat[i] = orig
            sel = af[idx]
            floor = 1e-3 * max(np.abs(af).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
            err = np.abs(sel - num) / np.maximum(np.maximum(np.abs(sel), np.abs(num)), floor)
            worst = max(worst, float(err.max(initial=0.0)))
            coords += len(idx)

        for _ in range(case.directional):
            dirs = [rng.standard_normal(t.shape) for t in inputs]
            norm = math.sqrt(sum(float(np.sum(d * d)) for d in dirs))
            dirs = [d / norm for d in dirs]
            exact = sum(float(np.sum(a * d)) for a, d in zip(analytic, dirs))
            base = [t.data.copy() for t in inputs]

            def along(delta):
                for t, b, d in zip(inputs, base, dirs):
                    t.data[...] = b + delta * d
                return _loss(fn, inputs, r)

            num = _central(along)
            for t, b in zip(inputs, base):
                t.data[...] = b
            worst = max(worst, abs(exact - num) / max(abs(exact), abs(num), 1e-12))
            coords += 1
    return GradResult(case.name, case.module, worst, coords)


# -- op cases ----------------------------------------------------------------


def _t(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is not None:
        return Tensor(rng.uniform(lo, hi, shape))
    return Tensor(rng.standard_normal(shape))


def _unary(op):
    return lambda rng: (op, [_t(rng, 3, 4)])


def _op_cases() -> list[GradCase]:
    c = []

    def add(name, build, **kw):
        c.append(GradCase(name, "tensor", build, **kw))

    add("add", lambda rng: (T.add, [_t(rng, 2, 3, 4), _t(rng, 3, 1)]))
    add("sub", lambda rng: (T.sub, [_t(rng, 2, 1, 4), _t(rng, 3, 4)]))
    add("mul", lambda rng: (T.mul, [_t(rng, 2, 3, 4), _t(rng, 1, 3, 1)]))
    add("scale", lambda rng: (lambda x: T.scale(x, -1.7), [_t(rng, 3, 4)]))
    add("exp", _unary(T.exp))
    # keep values away from the kink
    add("clamp_max", lambda rng: (lambda x: T.clamp_max(x, 0.5), [Tensor(rng.choice([-1, 1], (3, 4)) * rng.uniform(0.7, 2, (3, 4)))]))
    add("silu", _unary(T.silu))
    add("gelu", _unary(T.gelu))
    add("reshape", lambda rng: (lambda x: T.reshape(x, (4, 6)), [_t(rng, 2, 3, 4)]))
    add("transpose", lambda rng: (lambda x: T.transpose(x, (2, 0, 1)), [_t(rng, 2, 3, 4)]))
    add("sum", lambda rng: (lambda x: T.sum_(x, axis=1, keepdims=True), [_t(rng, 2, 3, 4)]))
    add("mean", lambda rng: (lambda x: T.mean(x, axis=(0, 2)), [_t(rng, 2, 3, 4)]))
    add("concat", lambda rng: (lambda a, b: T.concat([a, b], axis=1), [_t(rng, 2, 3, 2), _t(rng, 2, 1, 2)]))
    add("take", lambda rng: (lambda x: T.take(x, (slice(None), slice(1, 3))), [_t(rng, 2, 4, 3)]))
    add("matmul", lambda rng: (T.matmul, [_t(rng, 2, 3, 4, 5), _t(rng, 2, 3, 5, 2)]))
    add("linear", lambda rng: (T.linear, [_t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)]))
    add("channel_linear", lambda rng: (T.channel_linear, [_t(rng, 2, 5, 3, 2), _t(rng, 4, 5), _t(rng, 4)]))
    add("softmax", lambda rng: (lambda x: T.softmax(x, axis=-1), [_t(rng, 2, 3, 5)]))
    add(
        "layer_norm",
        lambda rng: (lambda x, g, b: T.layer_norm(x, g, b, 1e-6, axis=1), [_t(rng, 2, 5, 2, 3), _t(rng, 5), _t(rng, 5)]),
    )
    add("l2_normalize", lambda rng: (lambda x: T.l2_normalize(x, axis=-1), [_t(rng, 3, 4, 6)]))

    def rot(rng):
        ang = rng.uniform(-3, 3, (5, 4))
        return (lambda x: T.rotate_pairs(x, np.cos(ang), np.sin(ang))), [_t(rng, 2, 5, 8)]

    add("rotate_pairs", rot)
    add("depthwise_conv2d", lambda rng: (T.depthwise_conv2d, [_t(rng, 2, 3, 5, 4), _t(rng, 3, 1, 3, 3)]))
    add("space_to_batch", lambda rng: (lambda x: T.space_to_batch(x, 2), [_t(rng, 2, 3, 4, 6)]))
    add("batch_to_space", lambda rng: (lambda x: T.batch_to_space(x, 2), [_t(rng, 8, 3, 2, 3)]))
    add("embedding", lambda rng: (lambda tab: T.embedding(tab, np.array([0, 2, 2, 4, 0])), [_t(rng, 5, 3)]))
    add("mse_loss", lambda rng: (T.mse_loss, [_t(rng, 2, 3, 4), _t(rng, 2, 3, 4)]))
    return c


# -- module cases ------------------------------------------------------------


def _attn_params(rng, c, heads, s, cosine, rope) -> AttentionParams:
    return AttentionParams(
        qkv_w=_t(rng, 3 * c, c) * 0.3,
        qkv_b=_t(rng, 3 * c) * 0.1,
        out_w=_t(rng, c, c) * 0.3,
        out_b=_t(rng, c) * 0.1,
        heads=heads,
        log_tau=Tensor(np.log(0.5) + 0.1 * rng.standard_normal((heads, 1, 1))) if cosine else None,
        rope=rope,
        cosine=cosine,
        s=s,
        dw_kernel=_t(rng, c, 1, 3, 3) * 0.3 if s == 2 else None,
    )


def _attention_fn(p: AttentionParams, attn):
    fields = ["qkv_w", "qkv_b", "out_w", "out_b"] + (["log_tau"] if p.cosine else []) + (["dw_kernel"] if p.dw_kernel is not None else [])

    def fn(x, *ws):
        return attn(x, dataclasses.replace(p, **dict(zip(fields, ws))))

    return fn, [getattr(p, f) for f in fields]


def _attention_case(s, cosine, rope):
    def build(rng):
        p = _attn_params(rng, 8, 2, s, cosine, rope)
        fn, ws = _attention_fn(p, downsampled_self_attention if s == 2 else multi_head_attention)
        return fn, [_t(rng, 1, 8, 4, 4)] + ws

    return build


def _block_params(rng, c, e, heads, s) -> UDiTBlockParams:
    attn = _attn_params(rng, c, heads, s, True, True)
    ffn = FFNParams(
        fc1_w=_t(rng, 4 * c, c) * 0.3,
        fc1_b=_t(rng, 4 * c) * 0.1,
        fc2_w=_t(rng, c, 4 * c) * 0.3,
        fc2_b=_t(rng, c) * 0.1,
        dw_kernel=_t(rng, 4 * c, 1, 3, 3) * 0.3,
        dw_shortcut=True,
    )
    return UDiTBlockParams(
        norm1_g=Tensor(1 + 0.1 * rng.standard_normal(c)),
        norm1_b=_t(rng, c) * 0.1,
        norm2_g=Tensor(1 + 0.1 * rng.standard_normal(c)),
        norm2_b=_t(rng, c) * 0.1,
        attn=attn,
        ffn=ffn,
        ada_w=_t(rng, 6 * c, e) * 0.3,
        ada_b=_t(rng, 6 * c) * 0.1,
    )


def _block_case(rng):
    p = _block_params(rng, 8, 6, 2, 2)

    def fn(x, emb, ada_w, qkv_w, fc1_w, dw):
        q = dataclasses.replace(
            p,
            ada_w=ada_w,
            attn=dataclasses.replace(p.attn, qkv_w=qkv_w),
            ffn=dataclasses.replace(p.ffn, fc1_w=fc1_w, dw_kernel=dw),
        )
        return udit_block(x, emb, q)

    return fn, [_t(rng, 2, 8, 4, 4), _t(rng, 2, 6), p.ada_w, p.attn.qkv_w, p.ffn.fc1_w, p.ffn.dw_kernel]


def _ffn_case(rng):
    def fn(x, w1, b1, w2, b2, dw):
        return ffn_dwconv(x, FFNParams(w1, b1, w2, b2, dw, True))

    return fn, [_t(rng, 2, 4, 3, 3), _t(rng, 16, 4), _t(rng, 16), _t(rng, 4, 16), _t(rng, 4), _t(rng, 16, 1, 3, 3)]


def _down_case(rng):
    def fn(x, dw, w, b):
        return encoder_transition(x, DownParams(dw, w, b))

    return fn, [_t(rng, 2, 3, 4, 4), _t(rng, 3, 1, 3, 3), _t(rng, 6, 12), _t(rng, 6)]


def _up_case(rng):
    def fn(x, skip, uw, ub, fw, fb):
        return decoder_transition(x, skip, UpParams(uw, ub, fw, fb))

    return fn, [_t(rng, 2, 6, 2, 2), _t(rng, 2, 3, 4, 4), _t(rng, 12, 6), _t(rng, 12), _t(rng, 3, 6), _t(rng, 3)]


def randomize(params, rng: np.random.Generator, gain: float = 0.7) -> None:
    """Overwrite every weight with seeded, fan-in scaled noise.

    Norm gains land near 1 and attention temperatures near 0.5 so activations
    stay O(1) and finite differences are well conditioned.
    """
    for name, t in named_parameters(params):
        if name.endswith("_g"):
            t.data[...] = 1 + 0.1 * rng.standard_normal(t.shape)
        elif name.endswith("log_tau"):
            t.data[...] = math.log(0.5) + 0.1 * rng.standard_normal(t.shape)
        elif t.ndim == 1:
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
        elif name.endswith("label_table"):
            t.data[...] = rng.standard_normal(t.shape)
        else:
            fan_in = int(np.prod(t.shape[1:]))
            t.data[...] = gain / math.sqrt(fan_in) * rng.standard_normal(t.shape)


def _model_case(rng):
    cfg = preset("udit-t")
    params = build(cfg, seed=0)
    randomize(params, rng)
    leaves = [t for _, t in named_parameters(params)]
    t_step = np.array([417])
    y = np.array([1])

    def fn(x, *ws):
        return forward(params, x, t_step, y)

    # the leaves are the live parameter tensors, so perturbing them perturbs the model
    return fn, [_t(rng, 1, cfg.in_channels, *cfg.input_size)] + leaves


def _module_cases() -> list[GradCase]:
    return [
        GradCase("full_attention", "attention", _attention_case(1, False, False)),
        GradCase("cosine_rope_attention", "attention", _attention_case(1, True, True)),
        GradCase("downsampled_attention", "attention", _attention_case(2, True, True), max_coords=48),
        GradCase("ffn_dwconv", "blocks", _ffn_case, max_coords=48),
        GradCase("udit_block", "blocks", _block_case, max_coords=32),
        GradCase("encoder_transition", "blocks", _down_case),
        GradCase("decoder_transition", "blocks", _up_case),
        GradCase("udit_t", "model", _model_case, max_coords=4, directional=8),
    ]


def cases(module: str = "all") -> list[GradCase]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from all, {', '.join(MODULES)}")
    every = _op_cases() + _module_cases()
    return [c for c in every if module in ("all", c.module)]


def run_suite(module: str = "all", seed: int = 0) -> list[GradResult]:
    return [check(c, seed) for c in cases(module)]


def format_report(results: list[GradResult]) -> str:
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"module={r.module} case={r.name} max_rel_error={r.max_rel_error:.3e} coords={r.coords} status={status}")
    failed = sum(not r.passed for r in results)
    lines.append(f"summary cases={len(results)} failed={failed} tolerance={TOLERANCE:g}")
    return "\n".join(lines)

"""Command-line entry point: ``udit {train,sample,flops,gradcheck,make-synth}``.

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error,
4 numerical failure, 5 assertion or tolerance failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, gradcheck
from .config import ConfigError, load_run_config
from .diffusion import NumericalError
from .formats import DigestMismatch, FormatError, load_checkpoint, write_dataset, write_ppm
from .model import PRESETS, UDiTConfig, preset
from .run import sample_from_checkpoint, train
from .synth import MixtureSpec, make_mixture

__all__ = ["main", "EXIT_OK", "EXIT_CONFIG", "EXIT_IO", "EXIT_NUMERIC", "EXIT_TOLERANCE", "REFERENCE"]

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4, 5

# Published sizes at latent (4, 32, 32): (params, GFLOPs). DiT figures are multiply-add counts.
REFERENCE = {
    "udit-s": (52.05e6, 6.04e9),
    "udit-b": (204.43e6, 22.22e9),
    "udit-l": (810.19e6, 85.00e9),
    "dit-s2": (None, 6.06e9),
    "dit-s4": (None, 1.41e9),
    "dit-b2": (None, 23.01e9),
    "dit-l2": (None, 80.71e9),
    "dit-l4": (None, 19.70e9),
    "dit-xl2": (None, 118.64e9),
}
PARAM_TOL, FLOP_TOL = 0.05, 0.10


class ToleranceFailure(Exception):
    pass


def _parse_latent(text: str) -> tuple[int, int, int]:
    """``HxWxC`` -> (C, H, W)."""
    try:
        h, w, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad latent {text!r}; expected HxWxC, e.g. 32x32x4") from None
    if min(h, w, c) < 1:
        raise ConfigError(f"bad latent {text!r}: extents must be positive")
    return c, h, w


def _parse_shape(text: str) -> tuple[int, int, int]:
    """``CxHxW`` -> (C, H, W)."""
    try:
        c, h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad shape {text!r}; expected CxHxW, e.g. 4x8x8") from None
    return c, h, w


def _arch(name: str):
    if name in PRESETS:
        return preset(name)
    if name in analysis.ISO_PRESETS:
        return analysis.ISO_PRESETS[name]
    known = sorted(PRESETS) + sorted(analysis.ISO_PRESETS)
    raise ConfigError(f"unknown arch {name!r}; known: {', '.join(known)}")


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.steps is not None:
        run = replace(run, train=replace(run.train, steps=args.steps))
    train(run, args.out, resume=args.resume, force=args.force, emit=lambda s: print(s, flush=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    x, labels, cfg = sample_from_checkpoint(ckpt, args.n, args.class_, args.cfg, args.steps, args.seed, ema=args.ema)
    out = Path(args.out)
    path = out / "samples.udlt"
    write_dataset(path, x, labels, cfg.num_classes)
    print(f"event=samples n={args.n} class={args.class_} cfg={args.cfg} steps={args.steps} path={path}")
    if args.ppm:
        for i, lat in enumerate(x):
            write_ppm(out / f"sample_{i:04d}.ppm", lat)
        print(f"event=ppm count={len(x)} dir={out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    names = [args.arch] + list(args.compare or [])
    reports = []
    for name in names:
        cfg = _arch(name)
        latent = _parse_latent(args.latent) if args.latent else None
        reports.append(analysis.count(cfg, latent, name=name))
    if args.format == "records":
        for r in reports:
            print("\n".join(r.records()))
    else:
        for r in reports:
            print(r.summary())
        if len(reports) > 1:
            print(analysis.compare(reports))
    if args.verify:
        cfg = _arch(args.arch)
        if not isinstance(cfg, UDiTConfig):
            raise ConfigError("--verify needs a U-DiT arch")
        latent = _parse_latent(args.latent) if args.latent else None
        chk = analysis.verify_against_runtime(cfg, latent, trace=args.trace)
        print(
            f"verify params_analytical={chk.analytical_params} params_instantiated={chk.instantiated_params} "
            f"flops_analytical={chk.analytical_flops} flops_traced={chk.traced_flops if args.trace else 'skipped'}"
        )
        for m in chk.mismatches:
            print(f"mismatch {m}")
        if not chk.ok:
            raise ToleranceFailure("analytical counts disagree with the built model")
    if args.check:
        failures = []
        for name, r in zip(names, reports):
            if name not in REFERENCE:
                raise ConfigError(f"no published reference for {name!r}; known: {', '.join(REFERENCE)}")
            if args.latent and _parse_latent(args.latent) != (4, 32, 32):
                raise ConfigError("--check compares against published figures at latent 32x32x4 only")
            ref_p, ref_f = REFERENCE[name]
            flops = r.macs if name.startswith("dit-") else r.flops
            checks = [("flops", flops, ref_f, FLOP_TOL)]
            if ref_p is not None:
                checks.append(("params", r.params, ref_p, PARAM_TOL))
            for what, got, ref, tol in checks:
                rel = got / ref - 1
                status = "ok" if abs(rel) <= tol else "FAIL"
                print(f"check model={name} {what}={got:.6g} reference={ref:.6g} rel={rel:+.4f} tol={tol} status={status}")
                if status != "ok":
                    failures.append(f"{name} {what}")
        if failures:
            raise ToleranceFailure("outside tolerance: " + ", ".join(failures))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.module, seed=args.seed)
    print(gradcheck.format_report(results), flush=True)
    if any(not r.passed for r in results):
        raise ToleranceFailure("gradient check failed")
    return EXIT_OK


def cmd_make_synth(args) -> int:
    try:
        spec = MixtureSpec.parse(args.mixture)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    shape = _parse_shape(args.shape)
    x, y = make_mixture(args.n, spec, shape, seed=args.seed)
    write_dataset(args.out, x, y, spec.classes)
    print(f"event=dataset n={args.n} classes={spec.classes} shape={'x'.join(map(str, shape))} path={args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udit", description="U-DiT training, sampling and cost accounting.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", default="runs", help="checkpoint directory (default: runs)")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--force", action="store_true", help="resume even if the config digest differs")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw latents from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--class", dest="class_", type=int, default=0)
    s.add_argument("--cfg", type=float, default=None, help="guidance scale; omit for plain conditional sampling")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples")
    s.add_argument("--ppm", action="store_true", help="also write one P6 preview per sample")
    s.add_argument("--ema", action="store_true", help="use EMA weights")
    s.set_defaults(func=cmd_sample)

    f = sub.add_parser("flops", help="analytical parameter and FLOP report")
    f.add_argument("--arch", required=True)
    f.add_argument("--latent", help="HxWxC, default is the arch's own latent")
    f.add_argument("--compare", nargs="*", help="further archs to tabulate against --arch")
    f.add_argument("--format", choices=("table", "records"), default="table")
    f.add_argument("--check", action="store_true", help="assert published size tolerances")
    f.add_argument("--verify", action="store_true", help="cross-check against an instantiated model")
    f.add_argument("--trace", action="store_true", help="with --verify, also run a traced forward pass")
    f.set_defaults(func=cmd_flops)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    g.add_argument("--module", default="all", choices=("all",) + gradcheck.MODULES)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("make-synth", help="write a Gaussian-mixture latent dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--mixture", default="2:2.0", help="classes[:amplitude[:sigma]]")
    m.add_argument("--shape", default="4x8x8", help="CxHxW")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, DigestMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ToleranceFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TOLERANCE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed in the terminal summary by
``conftest.py``. Running this file directly (``python tests/test_acceptance.py``)
runs the same suite through pytest with the summary.
"""

import json
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from udit import analysis as AN
from udit import attention as A
from udit import blocks as B
from udit import tensor as T
from udit.diffusion import AdamW, NoiseSchedule, init_train_state, q_sample
from udit.formats import load_checkpoint, save_checkpoint
from udit.gradcheck import TOLERANCE, run_suite
from udit.model import _build_block, _Init, build, forward, parameter_count, preset
from udit.config import RunConfig
from udit.run import fit_arrays, load_data, sample_from_checkpoint, schedule_for, state_to_checkpoint, train
from udit.synth import MixtureSpec, class_means
from udit.tensor import Tensor

from test_attention import make_params, subgrid_reference

RESULTS: dict[int, str] = {}

TOY_RUN = {
    "model": {"preset": "udit-t"},
    "diffusion": {"schedule": "linear", "T": 1000, "beta_start": 0.0001, "beta_end": 0.02, "objective": "eps"},
    "train": {"steps": 2000, "batch": 64, "lr": 0.001, "seed": 0, "checkpoint_every": 500, "log_every": 100},
    "data": {"kind": "synthetic", "n": 4096, "mixture": "2:2.0", "seed": 1},
    "sample": {"n": 16, "steps": 50, "cfg": 1.5, "class": 0, "seed": 0},
}
EVAL_SAMPLES = 128
TOY_BUDGET = 900.0
SINGLE_THREAD = {k: "1" for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}


@contextmanager
def criterion(n: int, title: str, budget: float):
    """Record a PASS/FAIL line for criterion ``n``; the runtime budget is part of the check."""
    info: dict[str, str] = {}
    t0 = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - t0
        assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget:.0f}s"
    except BaseException as e:
        elapsed = time.perf_counter() - t0
        RESULTS[n] = f"criterion {n:2d} FAIL  {title} ({elapsed:.1f}s): {type(e).__name__}: {e}".splitlines()[0]
        raise
    detail = " ".join(f"{k}={v}" for k, v in info.items())
    RESULTS[n] = f"criterion {n:2d} PASS  {title} ({elapsed:.1f}s) {detail}".rstrip()


def test_01_attention_saving():
    with criterion(1, "downsampled attention costs exactly 1/4", 1.0) as info:
        pairs = 0
        for n in range(2, 65, 2):
            for d in (8, 64):
                full, down = AN.attention_cost(n, d, 1), AN.attention_cost(n, d, 2)
                assert isinstance(full, int) and 4 * down == full, (n, d, full, down)
                pairs += 1
        info["pairs"] = pairs


def test_02_downsampled_attention_oracle():
    with criterion(2, "downsampled attention equals four sub-grid attentions (float32)", 30.0) as info:
        worst = 0.0
        rng = np.random.default_rng(0)
        with T.precision("float32"):
            for h in range(2, 9, 2):
                for w in range(2, 9, 2):
                    for kw in ({}, {"cosine": True, "rope": True}):
                        p = make_params(16, 2, rng, dtype=np.float32, s=2, **kw)
                        x = rng.standard_normal((2, 16, h, w)).astype(np.float32)
                        got = A.downsampled_self_attention(Tensor(x), p).data
                        assert got.dtype == np.float32
                        worst = max(worst, float(np.abs(got - subgrid_reference(x.astype(np.float64), p)).max()))
        info["max_abs_diff"] = f"{worst:.2e}"
        assert worst < 1e-5


PUBLISHED = {"udit-s": (52.05e6, 6.04e9), "udit-b": (204.43e6, 22.22e9), "udit-l": (810.19e6, 85.00e9)}


def test_03_published_sizes():
    with criterion(3, "analytical params/FLOPs vs published S/B/L", 10.0) as info:
        for name, (p_ref, f_ref) in PUBLISHED.items():
            cfg = preset(name)
            r = AN.count(cfg, (4, 32, 32))
            dp, df = r.params / p_ref - 1, r.flops / f_ref - 1
            info[name] = f"{r.params / 1e6:.2f}M({dp:+.1%})/{r.flops / 1e9:.2f}G({df:+.1%})"
            assert abs(dp) <= 0.05 and abs(df) <= 0.10, name
            assert r.params == parameter_count(build(cfg, meta=True)), f"{name} census mismatch"


def test_04_space_to_batch_lossless():
    with criterion(4, "space_to_batch/batch_to_space round trip is bit-exact", 10.0) as info:
        rng = np.random.default_rng(0)
        for _ in range(1000):
            b, c = rng.integers(1, 4), rng.integers(1, 9)
            h, w = 2 * rng.integers(1, 9), 2 * rng.integers(1, 9)
            dtype = (np.float32, np.float64)[rng.integers(2)]
            x = rng.standard_normal((b, c, h, w)).astype(dtype)
            s2b = T.space_to_batch(Tensor(x), 2)
            assert s2b.shape == (4 * b, c, h // 2, w // 2)
            assert np.array_equal(T.batch_to_space(s2b, 2).data, x)
            z = rng.standard_normal((4 * b, c, h // 2, w // 2)).astype(dtype)
            assert np.array_equal(T.space_to_batch(T.batch_to_space(Tensor(z), 2), 2).data, z)
        info["cases"] = 1000


def test_05_gradient_suite():
    with criterion(5, "float64 central-difference gradient checks", 300.0) as info:
        results = run_suite("all")
        names = {r.name for r in results}
        assert "udit_t" in names
        worst = max(results, key=lambda r: r.max_rel_error)
        info["cases"] = len(results)
        info["worst"] = f"{worst.name}:{worst.max_rel_error:.1e}"
        failed = [r.name for r in results if not r.passed]
        assert TOLERANCE == 1e-6 and not failed, failed


def test_06_reparam_equivalence():
    with criterion(6, "training branch vs merged kernel (float32)", 30.0) as info:
        rng = np.random.default_rng(0)
        worst = 0.0
        with T.precision("float32"):
            for _ in range(100):
                c = int(rng.integers(1, 9)) * 4
                h, w = 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))
                x = Tensor(rng.standard_normal((2, c, h, w)).astype(np.float32))

                k = Tensor((rng.standard_normal((4 * c, 1, 3, 3)) * 0.3).astype(np.float32))
                lin = [Tensor((rng.standard_normal(s) * 0.3).astype(np.float32)) for s in ((4 * c, c), (4 * c,), (c, 4 * c), (c,))]
                branch = B.FFNParams(*lin, dw_kernel=k, dw_shortcut=True)
                merged = B.FFNParams(*lin, dw_kernel=B.reparam_merge(k), dw_shortcut=False)
                d_ffn = np.abs(B.ffn_dwconv(x, branch).data - B.ffn_dwconv(x, merged).data).max()

                kd = Tensor((rng.standard_normal((c, 1, 3, 3)) * 0.3).astype(np.float32))
                d_down = np.abs(
                    A.downsampler(x, kd, shortcut=True).data - A.downsampler(x, B.reparam_merge(kd), shortcut=False).data
                ).max()
                worst = max(worst, float(d_ffn), float(d_down))
        info["max_abs_diff"] = f"{worst:.2e}"
        assert worst < 1e-5


def test_07_identity_at_init():
    with criterion(7, "blocks are identity and model output is zero at init (float64)", 10.0) as info:
        rng = np.random.default_rng(0)
        with T.precision("float64"):
            cfg = preset("udit-t")
            for stage in range(3):
                p = _build_block(cfg, stage, _Init(stage, np.float64))
                c = cfg.channels(stage)
                x = rng.standard_normal((2, c, 8 >> stage, 8 >> stage))
                emb = rng.standard_normal((2, cfg.embed_dim(stage)))
                assert np.array_equal(B.udit_block(Tensor(x), Tensor(emb), p).data, x)
            checked = 0
            for name, kw in (("udit-t", {}), ("udit-t", {"final_norm": True}), ("udit-t-toy", {}), ("dit-unet", {})):
                cfg = preset(name, **kw)
                params = build(cfg, seed=3)
                x = rng.standard_normal((2, cfg.in_channels) + tuple(cfg.input_size))
                out = forward(params, x, rng.integers(0, cfg.num_timesteps, 2), rng.integers(0, cfg.num_classes, 2)).data
                assert out.dtype == np.float64 and not out.any(), name
                checked += 1
        info["models"] = checked


def test_08_cosine_and_rope_properties():
    with criterion(8, "cosine logits scale-invariant, RoPE relative and norm-preserving", 10.0) as info:
        rng = np.random.default_rng(0)
        with T.precision("float64"):
            q, k = rng.standard_normal((2, 2, 2, 9, 16))
            log_tau = Tensor(np.log(rng.uniform(0.05, 1.0, 2)))
            base = A.cosine_logits(Tensor(q), Tensor(k), log_tau).data
            scale_err = 0.0
            for _ in range(20):
                a = rng.uniform(1e-3, 1e3, (2, 2, 9, 1))
                b = rng.uniform(1e-3, 1e3, (2, 2, 9, 1))
                scaled = A.cosine_logits(Tensor(a * q), Tensor(b * k), log_tau).data
                scale_err = max(scale_err, float(np.abs(scaled - base).max()))
            assert scale_err < 1e-6

            table = A.Rope2DTable(16, 64, 64)
            rel_err = norm_err = 0.0
            for _ in range(100):
                qv, kv = rng.standard_normal((2, 1, 16))
                pq, pk = rng.integers(0, 32, 2), rng.integers(0, 32, 2)
                shift = rng.integers(0, 32, 2)

                def dot(pa, pb):
                    ra = A.apply_rope2d(Tensor(qv), np.array([pa]), table).data
                    rb = A.apply_rope2d(Tensor(kv), np.array([pb]), table).data
                    return float((ra * rb).sum()), ra

                d0, rq = dot(pq, pk)
                d1, _ = dot(pq + shift, pk + shift)
                rel_err = max(rel_err, abs(d1 - d0))
                norm_err = max(norm_err, abs(np.linalg.norm(rq) - np.linalg.norm(qv)))
            assert rel_err < 1e-5 and norm_err < 1e-6
        info.update(scale=f"{scale_err:.1e}", offset=f"{rel_err:.1e}", norm=f"{norm_err:.1e}")


def test_09_ddpm_marginal():
    with criterion(9, "q_sample Monte Carlo variance matches 1 - alpha_bar", 60.0) as info:
        sched = NoiseSchedule.linear()
        rng = np.random.default_rng(0)
        x0 = np.full((100_000, 1), 0.7)
        for t in (1, 250, 500, 999):
            eps = rng.standard_normal(x0.shape)
            xt = q_sample(sched, x0, np.full(x0.shape[0], t), eps)
            target = 1 - sched.alpha_bars[t]
            rel = xt.var() / target - 1
            info[f"t{t}"] = f"{rel:+.2%}"
            assert abs(rel) < 0.02, t


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Train the toy configuration once; shared by the convergence and determinism criteria."""
    out = tmp_path_factory.mktemp("toy")
    run = RunConfig.from_dict(TOY_RUN)
    lines: list[str] = []
    t0 = time.perf_counter()
    state = train(run, out, emit=lines.append)
    return {"run": run, "out": out, "state": state, "seconds": time.perf_counter() - t0, "log": lines}


def _class_errors(ckpt, w, seed=0):
    means = class_means(MixtureSpec(2, 2.0), (4, 8, 8))
    errs, draws = [], []
    for c in (0, 1):
        x, _, _ = sample_from_checkpoint(ckpt, EVAL_SAMPLES, c, w, 50, seed)
        errs.append(float(np.abs(x.mean(0) - means[c]).mean()))
        draws.append(x)
    return errs, draws


@pytest.mark.slow
def test_10_toy_convergence(toy_run):
    # training counts against the budget too
    t0 = time.perf_counter()
    with criterion(10, "toy U-DiT-T convergence and sampling", TOY_BUDGET - toy_run["seconds"]) as info:
        state, out = toy_run["state"], toy_run["out"]
        losses = np.asarray(state.losses)
        assert state.step == 2000 and losses.size == 2000
        first, last = losses[:100].mean(), losses[-100:].mean()
        info["loss"] = f"{first:.3f}->{last:.3f}({last / first:.0%})"
        assert last < 0.5 * first

        ckpt = load_checkpoint(out / "last.udck")
        trained, _ = _class_errors(ckpt, None)
        guided, guided_draws = _class_errors(ckpt, 1.5)
        plain, plain_draws = _class_errors(ckpt, 1.0)
        info["err"] = "/".join(f"{e:.3f}" for e in trained)
        info["err_cfg1.5"] = "/".join(f"{e:.3f}" for e in guided)
        assert max(trained) < 0.2

        untrained = build(toy_run["run"].model, seed=0)
        untrained_ckpt = state_to_checkpoint(init_train_state(untrained, AdamW()), toy_run["run"])
        with np.errstate(over="ignore"):
            base, _ = _class_errors(untrained_ckpt, None)
        info["untrained"] = "/".join(f"{e:.3g}" for e in base)
        assert min(base) > 0.9

        assert all(np.isfinite(d).all() for d in guided_draws)
        assert not any(np.array_equal(g, p) for g, p in zip(guided_draws, plain_draws))
        info["train_s"] = f"{toy_run['seconds']:.0f}"
        toy_run["spent"] = toy_run["seconds"] + time.perf_counter() - t0


def _cli_run(tmp: Path, tag: str) -> tuple[bytes, bytes, str]:
    cfg = dict(TOY_RUN, train={"steps": 12, "batch": 8, "lr": 1e-3, "checkpoint_every": 6, "log_every": 1})
    cfg["data"] = {"n": 64, "mixture": "2:2.0", "seed": 1}
    path = tmp / "cli.json"
    path.write_text(json.dumps(cfg))
    env = {**os.environ, **SINGLE_THREAD}
    out = tmp / tag

    def udit(*args):
        return subprocess.run([sys.executable, "-m", "udit", *args], env=env, capture_output=True, text=True, check=True)

    log = udit("train", "--config", str(path), "--out", str(out)).stdout
    udit("sample", "--ckpt", str(out / "last.udck"), "--n", "4", "--steps", "5", "--cfg", "1.5", "--out", str(out / "s"))
    losses = "\n".join(line.split(" steps_per_sec")[0] for line in log.splitlines() if line.startswith("step="))
    return (out / "last.udck").read_bytes(), (out / "s" / "samples.udlt").read_bytes(), losses


@pytest.mark.slow
def test_11_determinism(toy_run, tmp_path):
    budget = TOY_BUDGET - toy_run.get("spent", toy_run["seconds"])  # 10 and 11 together
    with criterion(11, "bit-identical losses, samples and checkpoints across runs", budget) as info:
        run, out = toy_run["run"], toy_run["out"]
        # second in-process run over the first checkpoint interval
        k = run.train.checkpoint_every
        opt = AdamW(run.train.lr, *run.train.betas, run.train.adam_eps, run.train.weight_decay)
        x, y = load_data(run)
        state = init_train_state(build(run.model, seed=run.train.seed), opt, ema_decay=run.train.ema, seed=run.train.seed)
        state = fit_arrays(state, x, y, k, run.train.batch, schedule_for(run))
        assert state.losses == toy_run["state"].losses[:k]
        save_checkpoint(tmp_path / "again.udck", state_to_checkpoint(state, run))
        ref = out / f"ckpt_{k:07d}.udck"
        assert (tmp_path / "again.udck").read_bytes() == ref.read_bytes()
        a, _, _ = sample_from_checkpoint(load_checkpoint(ref), 8, 1, 1.5, 20, 4)
        b, _, _ = sample_from_checkpoint(load_checkpoint(tmp_path / "again.udck"), 8, 1, 1.5, 20, 4)
        assert np.array_equal(a, b)
        info["steps_compared"] = k

        # two fresh single-threaded CLI processes
        first, second = _cli_run(tmp_path, "a"), _cli_run(tmp_path, "b")
        assert first[0] == second[0], "checkpoint bytes differ"
        assert first[1] == second[1], "sample bytes differ"
        assert first[2] == second[2] and first[2], "logged losses differ"
        info["cli_ckpt_bytes"] = len(first[0])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))

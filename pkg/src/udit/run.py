"""Training and sampling drivers shared by the command line and the estimator."""

from __future__ import annotations

import hashlib
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig
from .diffusion import AdamW, NoiseSchedule, TrainState, init_train_state, sample, training_step
from .formats import Checkpoint, load_checkpoint, read_dataset, save_checkpoint
from .model import ModelParams, UDiTConfig, build, named_parameters
from .synth import make_mixture

__all__ = [
    "config_digest",
    "load_data",
    "state_to_checkpoint",
    "restore_state",
    "params_from_checkpoint",
    "fit_arrays",
    "train",
    "sample_from_checkpoint",
]

logger = logging.getLogger(__name__)


def config_digest(config: UDiTConfig) -> bytes:
    return hashlib.sha256(config.digest().encode()).digest()


def schedule_for(run: RunConfig) -> NoiseSchedule:
    d = run.diffusion
    return NoiseSchedule.linear(d.T, d.beta_start, d.beta_end)


def load_data(run: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Training latents and labels for ``run``, checked against the model config."""
    cfg = run.model
    shape = (cfg.in_channels,) + tuple(cfg.input_size)
    if run.data.kind == "synthetic":
        spec = run.data.mixture_spec
        if spec.classes > cfg.num_classes:
            raise ConfigError(f"mixture has {spec.classes} classes but the model only {cfg.num_classes}")
        return make_mixture(run.data.n, spec, shape, seed=run.data.seed)
    x, y, k = read_dataset(run.data.path)
    if x.shape[1:] != shape:
        raise ConfigError(f"dataset latents {x.shape[1:]} do not match model input {shape}")
    if k > cfg.num_classes:
        raise ConfigError(f"dataset has {k} classes but the model only {cfg.num_classes}")
    return x, y


def state_to_checkpoint(state: TrainState, run: RunConfig | None = None) -> Checkpoint:
    names = [n for n, _ in named_parameters(state.params)]
    tensors = {}
    for n, t in zip(names, state.leaves):
        tensors[f"param/{n}"] = t.data
    for n, m, v in zip(names, state.m, state.v):
        tensors[f"adam_m/{n}"] = m
        tensors[f"adam_v/{n}"] = v
    if state.ema is not None:
        for n, e in zip(names, state.ema):
            tensors[f"ema/{n}"] = e
    meta = {
        "config": state.params.config.to_dict(),
        "seed": state.seed,
        "dropped_labels": state.dropped_labels,
        "seen_labels": state.seen_labels,
        "ema_decay": state.ema_decay if state.ema is not None else None,
    }
    if run is not None:
        meta["run"] = run.to_dict()
    return Checkpoint(config_digest(state.params.config), state.step, meta, tensors)


def params_from_checkpoint(ckpt: Checkpoint, config: UDiTConfig | None = None, ema: bool = False) -> ModelParams:
    """Rebuild model parameters; ``ema=True`` loads the shadow weights."""
    if config is None:
        try:
            config = UDiTConfig.from_dict(ckpt.meta["config"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"checkpoint carries no usable model config ({e})") from None
    params = build(config, seed=0)
    prefix = "ema/" if ema else "param/"
    for name, t in named_parameters(params):
        key = prefix + name
        if key not in ckpt.tensors:
            raise ConfigError(f"checkpoint lacks tensor {key!r}")
        arr = ckpt.tensors[key]
        if arr.shape != t.shape:
            raise ConfigError(f"tensor {key!r} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr.astype(t.dtype)
    return params


def restore_state(ckpt: Checkpoint, config: UDiTConfig, optimizer: AdamW) -> TrainState:
    params = params_from_checkpoint(ckpt, config)
    ema_decay = ckpt.meta.get("ema_decay")
    state = init_train_state(params, optimizer, ema_decay=ema_decay, seed=int(ckpt.meta.get("seed", 0)))
    names = [n for n, _ in named_parameters(params)]
    state.m = [ckpt.tensors[f"adam_m/{n}"].astype(params.in_w.dtype) for n in names]
    state.v = [ckpt.tensors[f"adam_v/{n}"].astype(params.in_w.dtype) for n in names]
    if ema_decay:
        state.ema = [ckpt.tensors[f"ema/{n}"].astype(params.in_w.dtype) for n in names]
    state.step = ckpt.step
    state.dropped_labels = int(ckpt.meta.get("dropped_labels", 0))
    state.seen_labels = int(ckpt.meta.get("seen_labels", 0))
    return state


def fit_arrays(
    state: TrainState,
    x: np.ndarray,
    y: np.ndarray,
    steps: int,
    batch: int,
    schedule: NoiseSchedule,
    on_step: Callable[[TrainState, float], None] | None = None,
) -> TrainState:
    """Run ``steps`` updates with minibatches drawn with replacement.

    Step ``k`` draws everything from a generator seeded by ``(seed, k)``, so a
    resumed run continues exactly where an uninterrupted one would be.
    """
    x = np.asarray(x, dtype=state.params.in_w.dtype)
    y = np.asarray(y, dtype=np.int64)
    for _ in range(steps):
        rng = np.random.default_rng([state.seed, state.step])
        idx = rng.integers(0, x.shape[0], size=batch)
        state, loss = training_step(state, x[idx], y[idx], rng, schedule)
        if on_step is not None:
            on_step(state, loss)
    return state


def train(
    run: RunConfig,
    out_dir,
    resume=None,
    force: bool = False,
    emit: Callable[[str], None] = print,
) -> TrainState:
    """Train per ``run``, writing ``out_dir/ckpt_<step>.udck`` periodically and ``last.udck`` at exit."""
    out = Path(out_dir)
    tr = run.train
    optimizer = AdamW(tr.lr, tr.betas[0], tr.betas[1], tr.adam_eps, tr.weight_decay)
    schedule = schedule_for(run)
    with T.precision(tr.precision):
        x, y = load_data(run)
        if resume is not None:
            ckpt = load_checkpoint(resume, config_digest(run.model), force=force)
            state = restore_state(ckpt, run.model, optimizer)
        else:
            state = init_train_state(build(run.model, seed=tr.seed), optimizer, ema_decay=tr.ema, seed=tr.seed)
        target = tr.steps
        emit(
            f"event=start step={state.step} target={target} params={sum(t.size for t in state.leaves)} "
            f"samples={x.shape[0]} digest={run.model.digest()[:12]}"
        )
        window: list[float] = []
        t0 = time.perf_counter()
        last_step = state.step

        def on_step(s: TrainState, loss: float) -> None:
            nonlocal t0, last_step
            window.append(loss)
            if s.step % tr.log_every == 0 or s.step == target:
                now = time.perf_counter()
                rate = (s.step - last_step) / max(now - t0, 1e-9)
                emit(f"step={s.step} loss={loss:.6f} mean_loss={np.mean(window):.6f} steps_per_sec={rate:.3f}")
                window.clear()
                t0, last_step = now, s.step
            if s.step % tr.checkpoint_every == 0 and s.step != target:
                path = out / f"ckpt_{s.step:07d}.udck"
                save_checkpoint(path, state_to_checkpoint(s, run))
                emit(f"event=checkpoint step={s.step} path={path}")

        state = fit_arrays(state, x, y, max(target - state.step, 0), tr.batch, schedule, on_step)
        path = out / "last.udck"
        save_checkpoint(path, state_to_checkpoint(state, run))
        emit(f"event=done step={state.step} path={path}")
    return state


def sample_from_checkpoint(
    ckpt: Checkpoint,
    n: int,
    cls: int,
    w: float | None,
    steps: int,
    seed: int,
    ema: bool = False,
) -> tuple[np.ndarray, np.ndarray, UDiTConfig]:
    """Draw ``n`` latents of class ``cls``; returns (latents, labels, config)."""
    params = params_from_checkpoint(ckpt, ema=ema)
    cfg = params.config
    if ckpt.digest != config_digest(cfg):
        raise ConfigError("checkpoint digest does not match its embedded config")
    if not 0 <= cls < cfg.num_classes:
        raise ConfigError(f"class {cls} out of range for {cfg.num_classes} classes")
    if w is not None and not cfg.cfg_enabled:
        raise ConfigError("guidance requested but the checkpoint was trained without label dropout")
    if not 1 <= steps <= cfg.num_timesteps:
        raise ConfigError(f"steps must lie in [1, {cfg.num_timesteps}]")
    schedule = None
    run = ckpt.meta.get("run")
    if run is not None:
        d = run["diffusion"]
        schedule = NoiseSchedule.linear(d["T"], d["beta_start"], d["beta_end"])
    labels = np.full(n, cls, dtype=np.int64)
    x = sample(params, n, labels, w=w, steps=steps, seed=seed, schedule=schedule)
    return x, labels, cfg

"""DDPM forward process, epsilon-prediction training and ancestral sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as _model
from . import tensor as T
from .model import ModelParams, named_parameters
from .tensor import Tensor

__all__ = [
    "NoiseSchedule",
    "NumericalError",
    "AdamW",
    "TrainState",
    "init_train_state",
    "q_sample",
    "drop_labels",
    "diffusion_loss",
    "training_step",
    "p_sample_step",
    "posterior_mean",
    "sample",
]

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a loss or sampler state stops being finite."""


@dataclass
class NoiseSchedule:
    """Beta table plus every coefficient derived from it.

    ``timesteps[i]`` is the model timestep fed to the network at index ``i``;
    for a respaced schedule it points back into the original table.
    """

    betas: np.ndarray
    timesteps: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.alpha_bars_prev = np.append(1.0, self.alpha_bars[:-1])
        self.sqrt_alpha_bars = np.sqrt(self.alpha_bars)
        self.sqrt_one_minus_alpha_bars = np.sqrt(1.0 - self.alpha_bars)
        self.posterior_variance = self.betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        self.posterior_coef_x0 = self.betas * np.sqrt(self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        self.posterior_coef_xt = (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bars)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
        return cls(np.linspace(beta_start, beta_end, T, dtype=np.float64), np.arange(T))

    @property
    def T(self) -> int:
        return len(self.betas)

    def respace(self, steps: int) -> NoiseSchedule:
        """Evenly spaced subset of ``steps`` timesteps with betas recomputed from alpha-bar."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must lie in [1, {self.T}], got {steps}")
        if steps == self.T:
            return self
        idx = np.unique(np.round(np.linspace(0, self.T - 1, steps)).astype(np.int64))
        ab = self.alpha_bars[idx]
        betas = 1.0 - ab / np.append(1.0, ab[:-1])
        return NoiseSchedule(betas, self.timesteps[idx])


def _bcast(coef: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    return coef[t].reshape((-1,) + (1,) * (ndim - 1))


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` for per-sample timesteps ``t``."""
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x0.shape[0],))
    if t.min() < 0 or t.max() >= schedule.T:
        raise ValueError(f"timesteps must lie in [0, {schedule.T})")
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 {x0.shape}")
    a = _bcast(schedule.sqrt_alpha_bars, t, x0.ndim)
    s = _bcast(schedule.sqrt_one_minus_alpha_bars, t, x0.ndim)
    return (a * x0 + s * eps).astype(x0.dtype, copy=False)


def posterior_mean(schedule: NoiseSchedule, x0: np.ndarray, x_t: np.ndarray, t) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x_0)."""
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x0.shape[0],))
    return _bcast(schedule.posterior_coef_x0, t, x0.ndim) * x0 + _bcast(schedule.posterior_coef_xt, t, x0.ndim) * x_t


def drop_labels(y: np.ndarray, prob: float, null_label: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Replace each label by ``null_label`` with probability ``prob``; returns (labels, n_dropped)."""
    if prob <= 0:
        return y, 0
    drop = rng.random(y.shape[0]) < prob
    return np.where(drop, null_label, y), int(drop.sum())


@dataclass
class AdamW:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def step(self, params: list[Tensor], m: list[np.ndarray], v: list[np.ndarray], step: int) -> None:
        """One decoupled-weight-decay Adam update; ``step`` counts from 1."""
        bc1 = 1.0 - self.beta1**step
        bc2 = 1.0 - self.beta2**step
        for p, mi, vi in zip(params, m, v):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            mi *= self.beta1
            mi += (1.0 - self.beta1) * g
            vi *= self.beta2
            vi += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * mi / (np.sqrt(vi / bc2) + self.eps)


@dataclass
class TrainState:
    params: ModelParams
    optimizer: AdamW
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    ema: list[np.ndarray] | None = None
    ema_decay: float = 0.9999
    seed: int = 0
    dropped_labels: int = 0
    seen_labels: int = 0
    losses: list[float] = field(default_factory=list)

    @property
    def leaves(self) -> list[Tensor]:
        return [t for _, t in named_parameters(self.params)]


def init_train_state(
    params: ModelParams, optimizer: AdamW | None = None, ema_decay: float | None = None, seed: int = 0
) -> TrainState:
    leaves = [t for _, t in named_parameters(params)]
    for t in leaves:
        t.requires_grad = True
    return TrainState(
        params=params,
        optimizer=optimizer or AdamW(),
        m=[np.zeros_like(t.data) for t in leaves],
        v=[np.zeros_like(t.data) for t in leaves],
        ema=[t.data.copy() for t in leaves] if ema_decay else None,
        ema_decay=ema_decay or 0.9999,
        seed=seed,
    )


Predictor = Callable[[ModelParams, Tensor, np.ndarray, np.ndarray], Tensor]


def diffusion_loss(
    params: ModelParams,
    x0: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    t: np.ndarray | None = None,
    eps: np.ndarray | None = None,
    predict: Predictor | None = None,
    dropout: float | None = None,
) -> tuple[Tensor, dict]:
    """Mean squared error between the predicted and the injected noise.

    Timesteps, noise and label dropout are drawn from ``rng`` in that order
    unless ``t`` / ``eps`` are given. ``dropout`` overrides the config's label
    dropout probability (0 for evaluation).
    """
    cfg = params.config
    b = x0.shape[0]
    if t is None:
        t = rng.integers(0, schedule.T, size=b)
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    y, dropped = drop_labels(
        np.asarray(y, dtype=np.int64), cfg.cfg_dropout_prob if dropout is None else dropout, cfg.num_classes, rng
    )
    x_t = q_sample(schedule, x0, t, eps)
    predict = predict or _model.forward
    out = predict(params, Tensor(x_t, dtype=x0.dtype), schedule.timesteps[t], y)
    if out.shape[1] != x0.shape[1]:
        out = T.take(out, (slice(None), slice(0, x0.shape[1])))
    loss = T.mse_loss(out, Tensor(eps, dtype=x0.dtype))
    return loss, {"t": t, "dropped": dropped, "labels": y}


def training_step(
    state: TrainState,
    x0: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
) -> tuple[TrainState, float]:
    """One optimiser update on a batch; mutates and returns ``state`` with the loss."""
    leaves = state.leaves
    for p in leaves:
        p.grad = None
    loss, info = diffusion_loss(state.params, x0, y, rng, schedule)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {state.step + 1}")
    T.backward(loss)
    state.step += 1
    state.optimizer.step(leaves, state.m, state.v, state.step)
    if state.ema is not None:
        d = state.ema_decay
        for e, p in zip(state.ema, leaves):
            e *= d
            e += (1.0 - d) * p.data
    state.dropped_labels += info["dropped"]
    state.seen_labels += len(y)
    state.losses.append(value)
    return state, value


def _predict_eps(params: ModelParams, x: np.ndarray, t_model: np.ndarray, y: np.ndarray, w: float | None) -> np.ndarray:
    xt = Tensor(x, dtype=x.dtype)
    if w is None:
        out = _model.forward(params, xt, t_model, y)
    else:
        out = _model.forward_cfg(params, xt, t_model, y, w)
    return out.data[:, : x.shape[1]]


def p_sample_step(
    params: ModelParams,
    x_t: np.ndarray,
    i: int,
    y: np.ndarray,
    w: float | None,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    eps_hat: np.ndarray | None = None,
) -> np.ndarray:
    """One ancestral step from schedule index ``i`` to ``i - 1``.

    ``w=None`` uses the plain conditional prediction, otherwise guided
    prediction with scale ``w``. ``eps_hat`` bypasses the network.
    """
    if i < 0 or i >= schedule.T:
        raise ValueError(f"schedule index must lie in [0, {schedule.T}), got {i}")
    b = x_t.shape[0]
    if eps_hat is None:
        with T.no_grad():
            eps_hat = _predict_eps(params, x_t, np.full(b, schedule.timesteps[i]), y, w)
    coef = schedule.betas[i] / schedule.sqrt_one_minus_alpha_bars[i]
    mean = (x_t - coef * eps_hat) / np.sqrt(schedule.alphas[i])
    if i > 0:
        mean = mean + np.sqrt(schedule.posterior_variance[i]) * rng.standard_normal(x_t.shape)
    out = mean.astype(x_t.dtype, copy=False)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite sampler state at index {i}")
    return out


def sample(
    params: ModelParams,
    n: int,
    y,
    w: float | None = None,
    steps: int = 50,
    seed: int = 0,
    schedule: NoiseSchedule | None = None,
    size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Draw ``n`` latents by ancestral sampling over ``steps`` evenly spaced timesteps."""
    cfg = params.config
    schedule = (schedule or NoiseSchedule.linear(cfg.num_timesteps)).respace(steps)
    rng = np.random.default_rng(seed)
    h, wd = size or cfg.input_size
    dtype = params.in_w.dtype
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,)).copy()
    x = rng.standard_normal((n, cfg.in_channels, h, wd)).astype(dtype)
    for i in reversed(range(schedule.T)):
        x = p_sample_step(params, x, i, y, w, rng, schedule)
    return x

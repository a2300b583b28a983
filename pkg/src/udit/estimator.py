"""scikit-learn style wrapper: ``fit`` on labelled latents, then ``sample``."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as T
from .diffusion import AdamW, NoiseSchedule, diffusion_loss, init_train_state, sample
from .model import UDiTConfig, build, forward, preset
from .run import fit_arrays

__all__ = ["UDiTGenerator"]


class UDiTGenerator(BaseEstimator):
    """Class-conditional latent generator backed by a U-DiT denoiser.

    Parameters
    ----------
    arch : str
        Model preset name, e.g. ``"udit-t"`` or ``"udit-s"``.
    model_params : dict or None
        Overrides applied on top of the preset (any ``UDiTConfig`` field).
    max_steps : int
        Optimiser updates performed by ``fit``.
    batch_size, learning_rate, weight_decay, ema_decay
        Training hyperparameters; ``ema_decay=None`` disables the shadow weights.
    sample_steps : int
        Timesteps used by ``sample`` (evenly spaced subset of the schedule).
    guidance : float or None
        Default guidance scale for ``sample``; None samples conditionally only.
    precision : {"float32", "float64"}
    random_state : int
        Seeds initialisation, minibatch order, noise and sampling.
    """

    def __init__(
        self,
        arch="udit-t",
        model_params=None,
        max_steps=2000,
        batch_size=64,
        learning_rate=1e-3,
        weight_decay=0.0,
        ema_decay=None,
        sample_steps=50,
        guidance=None,
        precision="float32",
        random_state=0,
    ):
        self.arch = arch
        self.model_params = model_params
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.sample_steps = sample_steps
        self.guidance = guidance
        self.precision = precision
        self.random_state = random_state

    def _config(self) -> UDiTConfig:
        return preset(self.arch, **(self.model_params or {}))

    def _validate_params(self) -> None:
        if self.max_steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("need max_steps >= 0, batch_size >= 1 and learning_rate > 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    def _latents(self, X, cfg: UDiTConfig) -> np.ndarray:
        shape = (cfg.in_channels,) + tuple(cfg.input_size)
        X = np.asarray(X)
        if X.ndim == 2 and X.shape[1] == int(np.prod(shape)):
            X = X.reshape((-1,) + shape)
        if X.shape[1:] != shape:
            raise ValueError(f"expected latents of shape (n, {', '.join(map(str, shape))}) or flattened, got {X.shape}")
        return X.astype(T.get_dtype(), copy=False)

    def fit(self, X, y):
        """Train on latents ``X`` (n, C, H, W) or (n, C*H*W) with integer labels ``y``."""
        self._validate_params()
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, y_numeric=True)
        cfg = self._config()
        y = np.asarray(y)
        if not np.all(y == np.round(y)) or y.min() < 0 or y.max() >= cfg.num_classes:
            raise ValueError(f"labels must be integers in [0, {cfg.num_classes})")
        with T.precision(self.precision):
            X = self._latents(X, cfg)
            params = build(cfg, seed=self.random_state)
            opt = AdamW(lr=self.learning_rate, weight_decay=self.weight_decay)
            state = init_train_state(params, opt, ema_decay=self.ema_decay, seed=self.random_state)
            self.schedule_ = NoiseSchedule.linear(cfg.num_timesteps)
            state = fit_arrays(state, X, y.astype(np.int64), self.max_steps, self.batch_size, self.schedule_)
        self.config_ = cfg
        self.params_ = params
        self.state_ = state
        self.loss_curve_ = list(state.losses)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.classes_ = np.arange(cfg.num_classes)
        return self

    def sample(self, n, y=0, guidance="default", steps=None, random_state=None):
        """Draw ``n`` latents with labels ``y`` (scalar or length-n)."""
        check_is_fitted(self, "params_")
        w = self.guidance if guidance == "default" else guidance
        with T.precision(self.precision):
            return sample(
                self.params_,
                n,
                y,
                w=w,
                steps=steps or self.sample_steps,
                seed=self.random_state if random_state is None else random_state,
                schedule=self.schedule_,
            )

    def predict_noise(self, X_t, t, y):
        """Noise prediction for noisy latents ``X_t`` at integer timesteps ``t``."""
        check_is_fitted(self, "params_")
        X_t = check_array(X_t, allow_nd=True, dtype=np.float64)
        with T.precision(self.precision), T.no_grad():
            X_t = self._latents(X_t, self.config_)
            n = X_t.shape[0]
            t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
            y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
            out = forward(self.params_, X_t, t, y)
        return out.data[:, : self.config_.in_channels]

    def score(self, X, y):
        """Negative denoising loss on ``(X, y)`` with a fixed noise draw; higher is better."""
        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64, y_numeric=True)
        cfg = self.config_
        with T.precision(self.precision), T.no_grad():
            X = self._latents(X, cfg)
            rng = np.random.default_rng(self.random_state)
            loss, _ = diffusion_loss(self.params_, X, np.asarray(y, dtype=np.int64), rng, self.schedule_, dropout=0.0)
        return -loss.item()

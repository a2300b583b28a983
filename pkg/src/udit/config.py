"""JSON run configuration with strict key checking.

A run file has five optional sections::

    {
      "model":     {"preset": "udit-t", ...UDiTConfig overrides},
      "diffusion": {"schedule": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "objective": "eps"},
      "train":     {"steps": 2000, "batch": 256, "lr": 1e-4, "weight_decay": 0.0, "betas": [0.9, 0.999],
                    "adam_eps": 1e-8, "seed": 0, "ema": null, "checkpoint_every": 500, "log_every": 100,
                    "precision": "float32"},
      "data":      {"kind": "synthetic", "path": null, "n": 4096, "mixture": "2:2.0", "seed": 1},
      "sample":    {"n": 16, "steps": 50, "cfg": null, "class": 0, "seed": 0}
    }

Unknown keys anywhere raise :class:`ConfigError` before any compute happens.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import PRESETS, UDiTConfig, preset
from .synth import MixtureSpec

__all__ = ["ConfigError", "DiffusionSection", "TrainSection", "DataSection", "SampleSection", "RunConfig", "load_run_config"]


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _from_section(cls, section: str, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


@dataclass(frozen=True)
class DiffusionSection:
    schedule: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    objective: str = "eps"

    def __post_init__(self):
        if self.schedule != "linear":
            raise ValueError(f"only the linear schedule is supported, got {self.schedule!r}")
        if self.objective != "eps":
            raise ValueError(f"only the eps objective is supported, got {self.objective!r}")
        if self.T < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need T >= 1 and 0 < beta_start <= beta_end < 1")


@dataclass(frozen=True)
class TrainSection:
    steps: int = 2000
    batch: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    ema: float | None = None
    checkpoint_every: int = 500
    log_every: int = 100
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.steps < 0 or self.batch < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("need steps >= 0, batch >= 1, lr > 0, weight_decay >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        if self.ema is not None and not 0 < self.ema < 1:
            raise ValueError("ema decay must lie in (0, 1)")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic"
    path: str | None = None
    n: int = 4096
    mixture: str = "2:2.0"
    seed: int = 1

    def __post_init__(self):
        if self.kind not in ("synthetic", "latent-file"):
            raise ValueError(f"data kind must be 'synthetic' or 'latent-file', got {self.kind!r}")
        if self.kind == "latent-file" and not self.path:
            raise ValueError("latent-file data needs a path")
        if self.n < 1:
            raise ValueError("n must be positive")
        MixtureSpec.parse(self.mixture)

    @property
    def mixture_spec(self) -> MixtureSpec:
        return MixtureSpec.parse(self.mixture)


@dataclass(frozen=True)
class SampleSection:
    n: int = 16
    steps: int = 50
    cfg: float | None = None
    class_: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.steps < 1 or self.class_ < 0:
            raise ValueError("need n >= 1, steps >= 1, class >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: UDiTConfig = field(default_factory=lambda: preset("udit-t"))
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    sample: SampleSection = field(default_factory=SampleSection)

    def __post_init__(self):
        if self.model.num_timesteps != self.diffusion.T:
            raise ConfigError(
                f"model.num_timesteps ({self.model.num_timesteps}) must equal diffusion.T ({self.diffusion.T})"
            )
        if self.sample.steps > self.diffusion.T:
            raise ConfigError(f"sample.steps ({self.sample.steps}) exceeds diffusion.T ({self.diffusion.T})")
        if self.sample.class_ >= self.model.num_classes:
            raise ConfigError(f"sample.class {self.sample.class_} out of range for {self.model.num_classes} classes")
        if self.sample.cfg is not None and not self.model.cfg_enabled:
            raise ConfigError("sample.cfg requires a model trained with label dropout")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - {"model", "diffusion", "train", "data", "sample"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        model = dict(d.get("model", {}))
        name = model.pop("preset", "udit-t")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        known = {f.name for f in fields(UDiTConfig)}
        bad = set(model) - known
        if bad:
            raise ConfigError(f"unknown keys in 'model': {sorted(bad)}")
        diffusion = _from_section(DiffusionSection, "diffusion", d.get("diffusion", {}))
        model.setdefault("num_timesteps", diffusion.T)
        try:
            mcfg = preset(name, **model)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from None
        sample = dict(d.get("sample", {}))
        if "class" in sample:
            sample["class_"] = sample.pop("class")
        return cls(
            model=mcfg,
            diffusion=diffusion,
            train=_from_section(TrainSection, "train", d.get("train", {})),
            data=_from_section(DataSection, "data", d.get("data", {})),
            sample=_from_section(SampleSection, "sample", sample),
        )

    def to_dict(self) -> dict:
        sample = dataclasses.asdict(self.sample)
        sample["class"] = sample.pop("class_")
        train = dataclasses.asdict(self.train)
        train["betas"] = list(self.train.betas)
        return {
            "model": self.model.to_dict(),
            "diffusion": dataclasses.asdict(self.diffusion),
            "train": train,
            "data": dataclasses.asdict(self.data),
            "sample": sample,
        }


def load_run_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return RunConfig.from_dict(raw)

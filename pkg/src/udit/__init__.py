"""U-DiT: U-Net shaped diffusion transformers with token-downsampled self-attention.

Pure NumPy implementation with its own reverse-mode autodiff, a DDPM training
and sampling harness, and an analytical cost accountant.
"""

from .analysis import ISO_PRESETS, CostReport, IsoDiTConfig, attention_cost, compare, count, verify_against_runtime
from .diffusion import AdamW, NoiseSchedule, NumericalError, TrainState, q_sample, sample, training_step
from .estimator import UDiTGenerator
from .model import PRESETS, ModelParams, UDiTConfig, build, forward, forward_cfg, preset

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CostReport",
    "ISO_PRESETS",
    "IsoDiTConfig",
    "ModelParams",
    "NoiseSchedule",
    "NumericalError",
    "PRESETS",
    "TrainState",
    "UDiTConfig",
    "UDiTGenerator",
    "attention_cost",
    "build",
    "compare",
    "count",
    "forward",
    "forward_cfg",
    "preset",
    "q_sample",
    "sample",
    "training_step",
    "verify_against_runtime",
]

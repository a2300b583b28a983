"""Synthetic Gaussian-mixture latents for desk-scale training runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MixtureSpec", "class_means", "make_mixture"]


@dataclass(frozen=True)
class MixtureSpec:
    """``classes`` components with unit variance.

    Class ``k`` has mean ``level_k * pattern`` where the levels are evenly
    spaced on ``[-amplitude, amplitude]`` and ``pattern`` is a fixed +-1
    checkerboard over (channel, row, column).
    """

    classes: int = 2
    amplitude: float = 2.0
    sigma: float = 1.0

    @classmethod
    def parse(cls, text: str) -> MixtureSpec:
        """Parse ``"classes[:amplitude[:sigma]]"``, e.g. ``"2:2.0"``."""
        parts = text.split(":")
        if not 1 <= len(parts) <= 3:
            raise ValueError(f"bad mixture spec {text!r}; expected classes[:amplitude[:sigma]]")
        try:
            classes = int(parts[0])
            amplitude = float(parts[1]) if len(parts) > 1 else cls.amplitude
            sigma = float(parts[2]) if len(parts) > 2 else cls.sigma
        except ValueError:
            raise ValueError(f"bad mixture spec {text!r}") from None
        if classes < 1 or sigma <= 0:
            raise ValueError(f"bad mixture spec {text!r}: need classes >= 1 and sigma > 0")
        return cls(classes, amplitude, sigma)


def class_means(spec: MixtureSpec, shape: tuple[int, int, int]) -> np.ndarray:
    """Per-class means of shape (classes, C, H, W)."""
    c, h, w = shape
    cc, hh, ww = np.meshgrid(np.arange(c), np.arange(h), np.arange(w), indexing="ij")
    pattern = np.where((cc + hh + ww) % 2 == 0, 1.0, -1.0)
    if spec.classes == 1:
        levels = np.array([spec.amplitude])
    else:
        levels = np.linspace(-spec.amplitude, spec.amplitude, spec.classes)
    return levels[:, None, None, None] * pattern[None]


def make_mixture(
    n: int, spec: MixtureSpec, shape: tuple[int, int, int] = (4, 8, 8), seed: int = 0, dtype=np.float32
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` labelled latents; returns (x of shape (n, C, H, W), labels)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, spec.classes, size=n)
    means = class_means(spec, shape)
    x = means[labels] + spec.sigma * rng.standard_normal((n,) + tuple(shape))
    return x.astype(dtype), labels.astype(np.int64)

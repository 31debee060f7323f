"""Sine/cosine features for the noise level and the lead time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EmbeddingConfig:
    frequency_count: int = 32
    period: float = 16.0
    output_dim: int = 128

    def __post_init__(self):
        if self.frequency_count < 1 or self.output_dim < 1:
            raise ValueError("frequency_count and output_dim must be >= 1")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def feature_dim(self) -> int:
        return 2 * self.frequency_count

    @property
    def frequencies(self) -> np.ndarray:
        k = np.arange(1, self.frequency_count + 1)
        return 2.0 * np.pi * k / self.period


def fourier_features(x, config: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    """[sin(w_k x), cos(w_k x)] for w_k = 2 pi k / period, k = 1..K.

    Scalar input gives a (2K,) vector, a (B,) array gives (B, 2K).
    """
    x = np.asarray(x, dtype=np.float64)
    arg = x[..., None] * config.frequencies
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def fourier_features_grad(x, config: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    """Elementwise derivative of :func:`fourier_features` with respect to x."""
    x = np.asarray(x, dtype=np.float64)
    w = config.frequencies
    arg = x[..., None] * w
    return np.concatenate([w * np.cos(arg), -w * np.sin(arg)], axis=-1)

"""Additive Gaussian noise at a target SNR and multiplicative column-stripe noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .tensor import Rng

GAUSSIAN_SWEEP = (5.0, 2.0, 0.0, -2.0, -5.0)
STRIPE_SWEEP = (0.05, 0.08, 0.10, 0.12, 0.15)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str  # "gaussian" (level = SNR in dB) or "stripe" (level = variance)
    level: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "stripe"):
            raise ParameterError(f"unknown noise kind {self.kind!r}")
        if self.kind == "stripe" and not self.level > 0:
            raise ParameterError("stripe variance must be positive")

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian":
            return add_gaussian_noise(image, self.level, self.seed)
        return add_stripe_noise(image, self.level, self.seed)


def gaussian_variance(image: np.ndarray, snr_db: float) -> float:
    """Noise power for ``SNR = 20 log10(E(I) / sigma^2)`` with E(I) the mean squared pixel."""
    power = float(np.mean(np.square(image)))
    return power / 10.0 ** (snr_db / 20.0)


def add_gaussian_noise(image: np.ndarray, snr_db: float | None, seed: int) -> np.ndarray:
    """``snr_db`` of ``None`` or +inf means clean: the image is returned unchanged."""
    image = np.asarray(image, dtype=np.float64)
    if snr_db is None or snr_db == math.inf:
        return image.copy()
    sigma = math.sqrt(gaussian_variance(image, snr_db))
    n = Rng(seed, "noise/gaussian").normal(image.size).reshape(image.shape)
    return np.clip(image + sigma * n, 0.0, 1.0)


def stripe_multipliers(width: int, variance: float, seed: int) -> np.ndarray:
    """One zero-mean uniform draw per column with the requested variance."""
    half = math.sqrt(3.0 * variance)
    return Rng(seed, "noise/stripe").uniform(width, -half, half)


def add_stripe_noise(image: np.ndarray, variance: float | None, seed: int) -> np.ndarray:
    """``J = I + n * I`` with n constant down each column. ``None`` or 0 means clean."""
    image = np.asarray(image, dtype=np.float64)
    if variance is None or variance == 0:
        return image.copy()
    if variance < 0:
        raise ParameterError("stripe variance must be positive")
    n = stripe_multipliers(image.shape[1], variance, seed)
    return np.clip(image + n[None, :] * image, 0.0, 1.0)

"""Calibrated Gaussian and Laplace noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, sample_laplace


@dataclass(frozen=True)
class SensitivityBound:
    l2: float
    l1: float | None = None

    def __post_init__(self):
        if self.l2 < 0 or (self.l1 is not None and self.l1 < 0):
            raise ValueError("sensitivity must be nonnegative")


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")

    @property
    def pure(self) -> bool:
        return self.delta == 0

    @property
    def gaussian_calibration_valid(self) -> bool:
        # the sqrt(2 ln(1.25/delta)) calibration is only a proof for epsilon <= 1
        return self.epsilon <= 1


def gaussian_sigma(delta_sens: float, epsilon: float, delta: float) -> float:
    """Noise std of the classic Gaussian mechanism, (Δ/ε)·sqrt(2 ln(1.25/δ)).

    Evaluated for any ε > 0; callers that need a certified guarantee should
    check ``PrivacyBudget.gaussian_calibration_valid``.
    """
    if not delta_sens > 0:
        raise ValueError(f"sensitivity must be > 0, got {delta_sens}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return delta_sens / epsilon * math.sqrt(2.0 * math.log(1.25 / delta))


def gaussian_perturb(theta, sigma: float, rng: RngStream) -> np.ndarray:
    """Return ``theta + z`` with z ~ N(0, sigma^2 I)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    theta = np.asarray(theta, dtype=np.float64)
    if sigma == 0:
        return theta.copy()
    return theta + rng.normal(0.0, sigma, size=theta.shape)


def laplace_perturb(value: float, sensitivity: float, epsilon: float, rng: RngStream) -> float:
    """Laplace mechanism for a scalar: value + Lap(sensitivity / epsilon)."""
    if not sensitivity > 0:
        raise ValueError(f"sensitivity must be > 0, got {sensitivity}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if math.isinf(epsilon):
        return float(value)
    return float(value) + sample_laplace(rng, sensitivity / epsilon)

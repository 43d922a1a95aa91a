"""Stationary correlation functions parameterized by a decay."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial.distance import cdist

# correlation level that defines the effective range
RANGE_LEVEL = 0.05


class KernelFamily(str, Enum):
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class Kernel:
    decay: float
    family: KernelFamily = KernelFamily.EXPONENTIAL

    def __post_init__(self):
        if not (self.decay > 0 and math.isfinite(self.decay)):
            raise ValueError(f"decay must be positive and finite, got {self.decay}")


def correlation(k: Kernel, dist):
    """exp(-decay * dist), elementwise for arrays."""
    d = np.asarray(dist, dtype=float)
    if np.any(np.isnan(d)) or np.any(d < 0):
        raise ValueError("distances must be nonnegative and not NaN")
    out = np.exp(-k.decay * d)
    return float(out) if out.ndim == 0 else out


def correlation_matrix(k: Kernel, a, b=None) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"coordinate dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.exp(-k.decay * cdist(a, b))


def effective_range(k: Kernel) -> float:
    """Distance at which the correlation falls to 0.05."""
    return -math.log(RANGE_LEVEL) / k.decay

"""Covariance kernels and covariance matrices built from distance matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CovarianceParams:
    """Spatial covariance parameters: process variance and decay rate."""

    sigma2: float
    phi: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (np.isfinite(self.phi) and self.phi > 0):
            raise ValueError(f"phi must be positive, got {self.phi}")


@dataclass(frozen=True)
class NoiseParams:
    """Measurement-error variance."""

    tau2: float

    def __post_init__(self):
        if not (np.isfinite(self.tau2) and self.tau2 > 0):
            raise ValueError(f"tau2 must be positive, got {self.tau2}")


def exponential_cov(d, params: CovarianceParams):
    """Exponential kernel sigma2 * exp(-phi * d) for scalar or array d >= 0."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    out = params.sigma2 * np.exp(-params.phi * d)
    return float(out) if out.ndim == 0 else out


# Single-entry registry; every experiment here uses the exponential kernel,
# but the theta -> (B, F) pipeline stays kernel-agnostic.
KERNELS = {"exponential": exponential_cov}


def validate_distance_matrix(D: np.ndarray) -> np.ndarray:
    """Check symmetry, zero diagonal, non-negativity; returns the array."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"distance matrix must be square, got {D.shape}")
    if np.any(D < 0) or not np.all(np.isfinite(D)):
        raise ValueError("distance matrix entries must be finite and non-negative")
    if np.any(np.diag(D) != 0):
        raise ValueError("distance matrix diagonal must be zero")
    if not np.array_equal(D, D.T):
        raise ValueError("distance matrix must be symmetric")
    return D


def cov_from_distances(D, params: CovarianceParams, kernel: str = "exponential") -> np.ndarray:
    """Covariance matrix with entry (i, j) = kernel(D[i, j]); diagonal = sigma2."""
    D = validate_distance_matrix(D)
    return KERNELS[kernel](D, params)


def effective_range(phi: float, threshold: float = 0.1) -> float:
    """Distance at which correlation decays to `threshold` (ln(1/t) / phi)."""
    if phi <= 0 or not 0 < threshold < 1:
        raise ValueError("phi must be positive and threshold in (0, 1)")
    return float(np.log(1.0 / threshold) / phi)

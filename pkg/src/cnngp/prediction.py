"""Posterior-predictive inference at unobserved locations.

For each retained draw, every prediction location conditions on its m nearest
observed locations (searched over the whole observed set): the spatial effect
is drawn from its kriging conditional and the response adds the regression
mean and measurement noise. Prediction-location factors are exact, never
clustered; this is a one-shot pass, not a per-iteration cost.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import dataio
from .covariance import CovarianceParams
from .factors import batch_factors
from .geometry import SpatialDataset, as_coord_array, knn_batch
from .inference import PosteriorChain


@dataclass(frozen=True)
class PredictionResult:
    """Per-location posterior-predictive summaries (and optionally draws)."""

    coords: np.ndarray      # (T, 2)
    mean: np.ndarray        # (T,)
    sd: np.ndarray          # (T,)
    lower: np.ndarray       # (T,) equal-tailed quantile at alpha/2
    upper: np.ndarray       # (T,)
    alpha: float
    draws: np.ndarray | None  # (K, T) when requested
    draw_iters: np.ndarray     # chain iterations behind each retained draw

    @property
    def n_locations(self) -> int:
        return len(self.mean)

    def save(self, path: str) -> None:
        ids = np.arange(self.n_locations)
        dataio.write_table(
            path,
            ["id", "x", "y", "mean", "sd", "q025", "q975"],
            [ids, self.coords[:, 0], self.coords[:, 1],
             self.mean, self.sd, self.lower, self.upper],
        )
        if self.draws is not None:
            root, _ = os.path.splitext(path)
            np.savez_compressed(root + "_draws.npz", draws=self.draws,
                                iters=self.draw_iters)


def predict(dataset: SpatialDataset, chain: PosteriorChain, coords_new,
            design_new, m: int, thin: int = 10, seed: int = 0,
            alpha: float = 0.05, include_draws: bool = False) -> PredictionResult:
    """Posterior-predictive draws and summaries at new locations.

    Uses every `thin`-th retained draw that has a stored w vector. New
    locations must be distinct from all observed ones; coincident points are
    rejected rather than smoothed over.
    """
    coords_new = as_coord_array(coords_new)
    design_new = np.atleast_2d(np.asarray(design_new, dtype=np.float64))
    T = len(coords_new)
    if design_new.shape != (T, chain.p):
        raise ValueError(
            f"new design must have shape ({T}, {chain.p}), got {design_new.shape}"
        )
    if chain.n_draws == 0:
        raise ValueError("chain holds no draws")
    if chain.w is None or len(chain.w) == 0:
        raise ValueError("prediction requires stored w draws")
    if not 1 <= m <= dataset.n:
        raise ValueError(f"m={m} must be in [1, {dataset.n}]")
    if thin < 1:
        raise ValueError("thin must be >= 1")

    nbr, dist = knn_batch(dataset.coords, coords_new, m)
    if np.any(dist[:, 0] == 0.0):
        bad = int(np.argmax(dist[:, 0] == 0.0))
        raise ValueError(
            f"prediction location {bad} coincides with an observed location"
        )

    # Distance geometry is draw-independent: build the (T, m+1, m+1) stack once.
    pts = np.concatenate([coords_new[:, None, :], dataset.coords[nbr]], axis=1)
    diff = pts[:, :, None, :] - pts[:, None, :, :]
    D = np.sqrt(np.sum(diff * diff, axis=-1))

    idx_w = np.arange(0, len(chain.w_rows), thin)  # rows into chain.w
    rows = chain.w_rows[idx_w]                     # matching rows into parameter draws
    K = len(rows)
    rng = np.random.default_rng(seed)
    draws = np.empty((K, T))
    for k in range(K):
        ri = rows[k]
        params = CovarianceParams(float(chain.sigma2[ri]), float(chain.phi[ri]))
        B, F = batch_factors(D, params)
        w_nb = chain.w[idx_w[k]][nbr]  # (T, m)
        w_star = (np.einsum("tj,tj->t", B, w_nb)
                  + np.sqrt(F) * rng.standard_normal(T))
        mean = design_new @ chain.beta[ri] + w_star
        draws[k] = mean + np.sqrt(chain.tau2[ri]) * rng.standard_normal(T)

    qs = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
    return PredictionResult(
        coords=coords_new,
        mean=draws.mean(axis=0),
        sd=draws.std(axis=0, ddof=1) if K > 1 else np.zeros(T),
        lower=qs[0],
        upper=qs[1],
        alpha=alpha,
        draws=draws if include_draws else None,
        draw_iters=chain.iters[rows],
    )

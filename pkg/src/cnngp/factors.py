"""Kriging weights and conditional variances for the sparse factorization.

For a location with neighbor-set distance matrix D (target first), the weight
vector and conditional variance are

    B = C[0, 1:] @ inv(C[1:, 1:])
    F = C[0, 0] - B @ C[1:, 0]

with C the covariance matrix of D under the current parameters. Factors are
computed once per location, or once per cluster when a cluster model maps
many locations onto shared representative matrices. All solves go through
Cholesky factorizations of the (<= m x m) neighbor block; nothing is ever
inverted explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterModel
from .covariance import CovarianceParams, validate_distance_matrix
from .geometry import (
    NeighborGraph,
    as_coord_array,
    neighbor_distance_matrices,
    neighbor_distance_matrix,
)

# One-shot diagonal bump, relative to the process variance, for neighbor
# blocks that fail to factorize; a second failure is a hard error.
_JITTER = 1e-10


@dataclass(frozen=True)
class FactorSet:
    """Weights/variances per factor unit plus the location -> unit map.

    B : (units, m) weight rows, zero-padded past each unit's neighbor count
    F : (units,) conditional variances, 0 < F <= sigma2
    blen : (units,) valid weight count per unit
    unit_of : (n,) factor unit of each ordered location
    chol_ops : number of unit factorizations performed (the m^3 cost currency)
    """

    mode: str
    B: np.ndarray
    F: np.ndarray
    blen: np.ndarray
    unit_of: np.ndarray
    params: CovarianceParams
    chol_ops: int

    @property
    def units(self) -> int:
        return len(self.F)


def _chol_lower_stack(C: np.ndarray, sigma2: float, what: str) -> np.ndarray:
    """Batched lower Cholesky with a per-item single jitter retry."""
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(C)
    eye = np.eye(C.shape[1])
    for i in range(len(C)):
        try:
            out[i] = np.linalg.cholesky(C[i])
        except np.linalg.LinAlgError:
            try:
                out[i] = np.linalg.cholesky(C[i] + _JITTER * sigma2 * eye)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    f"{what} {i}: neighbor covariance not positive definite "
                    f"after one jitter retry"
                ) from exc
    return out


def _solve_lower_stack(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise forward substitution: solve L x = b for stacks."""
    k = b.shape[1]
    x = np.empty_like(b)
    for c in range(k):
        acc = np.einsum("nj,nj->n", L[:, c, :c], x[:, :c]) if c else 0.0
        x[:, c] = (b[:, c] - acc) / L[:, c, c]
    return x


def _solve_lower_t_stack(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise back substitution: solve L^T x = b for stacks."""
    k = b.shape[1]
    x = np.empty_like(b)
    for c in range(k - 1, -1, -1):
        if c < k - 1:
            acc = np.einsum("nj,nj->n", L[:, c + 1:, c], x[:, c + 1:])
        else:
            acc = 0.0
        x[:, c] = (b[:, c] - acc) / L[:, c, c]
    return x


def _factors_from_dstack(D: np.ndarray, params: CovarianceParams,
                         what: str) -> tuple[np.ndarray, np.ndarray]:
    """(B, F) for a stack of (k+1, k+1) distance matrices, target row first."""
    C = params.sigma2 * np.exp(-params.phi * D)
    L = _chol_lower_stack(C[:, 1:, 1:], params.sigma2, what)
    z = _solve_lower_stack(L, C[:, 1:, 0])
    F = C[:, 0, 0] - np.einsum("nj,nj->n", z, z)
    B = _solve_lower_t_stack(L, z)
    if np.any(F <= 0):
        bad = int(np.argmax(F <= 0))
        raise np.linalg.LinAlgError(
            f"{what} {bad}: conditional variance not positive ({F[bad]!r})"
        )
    return B, F


def batch_factors(D, params: CovarianceParams) -> tuple[np.ndarray, np.ndarray]:
    """(B, F) for a stack of (k+1, k+1) distance matrices, target row first.

    Returns B of shape (N, k) and F of shape (N,). Used wherever many
    same-sized conditioning sets share one parameter value, e.g. prediction
    locations under a single posterior draw.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 3 or D.shape[1] != D.shape[2]:
        raise ValueError(f"expected a stack of square matrices, got {D.shape}")
    return _factors_from_dstack(D, params, "unit")


def location_factors(D, params: CovarianceParams) -> tuple[np.ndarray, float]:
    """Kriging weights and conditional variance for one distance matrix.

    Row/column 0 of D is the target location, the rest its neighbors. With no
    neighbors (1x1 D) the weights are empty and F is the process variance.
    """
    D = validate_distance_matrix(D)
    k = D.shape[0] - 1
    if k == 0:
        return np.empty(0), float(params.sigma2)
    B, F = _factors_from_dstack(D[None], params, "unit")
    return B[0], float(F[0])


class FactorBuilder:
    """Caches the theta-independent distance geometry for repeated rebuilds.

    The distance matrices never change along a chain; only the covariance
    parameters do. Holding the stacked matrices makes the per-proposal
    rebuild a batched exp + Cholesky + two triangular solves.
    """

    def __init__(self, graph: NeighborGraph, coords,
                 clusters: ClusterModel | None = None):
        coords_ordered = as_coord_array(coords)[graph.ordering]
        n, m = graph.n, graph.m
        self.graph = graph
        self.mode = "per-location" if clusters is None else "per-cluster"
        self._first = min(m, n)
        self._singles = [
            neighbor_distance_matrix(coords_ordered, graph, i)
            for i in range(self._first)
        ]
        if clusters is None:
            if n > m:
                rows = np.arange(m, n)
                self._stack = neighbor_distance_matrices(coords_ordered, graph, rows)
            else:
                self._stack = np.empty((0, m + 1, m + 1))
            self.unit_of = np.arange(n, dtype=np.int64)
            self.blen = graph.nbr_len.astype(np.int64)
        else:
            if clusters.m != m or clusters.n != n:
                raise ValueError(
                    f"cluster model (n={clusters.n}, m={clusters.m}) does not "
                    f"match graph (n={n}, m={m})"
                )
            self._stack = clusters.representatives
            self.unit_of = np.concatenate(
                [np.arange(self._first), clusters.nu[m:] - 1]
            ).astype(np.int64)
            self.blen = np.concatenate(
                [graph.nbr_len[: self._first],
                 np.full(clusters.kappa, m, dtype=np.int64)]
            )

    @property
    def units(self) -> int:
        return self._first + len(self._stack)

    def build(self, params: CovarianceParams) -> FactorSet:
        m = max(self.graph.m, 1)
        units = self.units
        B = np.zeros((units, m), dtype=np.float64)
        F = np.empty(units, dtype=np.float64)
        ops = 0
        for i, D in enumerate(self._singles):
            k = D.shape[0] - 1
            if k == 0:
                F[i] = params.sigma2
            else:
                b, f = _factors_from_dstack(D[None], params, f"{self.mode} unit")
                B[i, :k] = b[0]
                F[i] = f[0]
            ops += 1
        if len(self._stack):
            Bb, Fb = _factors_from_dstack(self._stack, params, f"{self.mode} unit")
            B[self._first:, : Bb.shape[1]] = Bb
            F[self._first:] = Fb
            ops += len(self._stack)
        return FactorSet(mode=self.mode, B=B, F=F, blen=self.blen,
                         unit_of=self.unit_of, params=params, chol_ops=ops)


def build_factorset(graph: NeighborGraph, coords, params: CovarianceParams,
                    clusters: ClusterModel | None = None) -> FactorSet:
    """One-shot factor construction (see FactorBuilder for repeated use)."""
    return FactorBuilder(graph, coords, clusters).build(params)


def log_joint_w(factors: FactorSet, graph: NeighborGraph, w) -> float:
    """Joint log density of the spatial effects under the factorization.

    Sum over ordered locations of log N(w_i | B_u . w_{N(i)}, F_u) with u the
    location's factor unit.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (graph.n,):
        raise ValueError(f"w must have shape ({graph.n},), got {w.shape}")
    u = factors.unit_of
    Bn = factors.B[u]
    idx = np.where(graph.nbr_idx >= 0, graph.nbr_idx, 0)
    means = np.einsum("nc,nc->n", Bn, w[idx])
    resid = w - means
    Floc = factors.F[u]
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * Floc) + resid * resid / Floc))

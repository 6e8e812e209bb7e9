"""Distance-pattern clustering of neighbor sets.

Each location with a full neighbor set is summarized by the vector of all
pairwise distances among itself and its neighbors. Those vectors are reduced
with PCA and grouped by a single-pass leader algorithm; every cluster keeps
its leader's full distance matrix as the representative used downstream for
shared kriging factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NeighborGraph, as_coord_array, neighbor_distance_matrices

_LEADER_CHUNK = 512


def distance_vector(graph: NeighborGraph, coords, i: int) -> np.ndarray:
    """Pairwise-distance vector of the neighbor set of ordered location i.

    Row/column order is [s_i, n_1, ..., n_m] with n_1 the nearest neighbor;
    the vector is the row-major strict lower triangle of that matrix, so all
    locations share a consistent layout. Requires a full neighbor set.
    """
    if i < graph.m:
        raise ValueError(f"location {i} has fewer than m={graph.m} neighbors")
    coords_ordered = as_coord_array(coords)[graph.ordering]
    D = neighbor_distance_matrices(coords_ordered, graph, np.array([i]))[0]
    return D[np.tril_indices(graph.m + 1, k=-1)]


def distance_vectors(graph: NeighborGraph, coords) -> np.ndarray:
    """Stacked distance vectors for all ordered locations i = m, ..., n-1."""
    coords_ordered = as_coord_array(coords)[graph.ordering]
    rows = np.arange(graph.m, graph.n)
    tril = np.tril_indices(graph.m + 1, k=-1)
    out = np.empty((len(rows), len(tril[0])), dtype=np.float64)
    for start in range(0, len(rows), 4096):
        sel = rows[start:start + 4096]
        D = neighbor_distance_matrices(coords_ordered, graph, sel)
        out[start:start + len(sel)] = D[:, tril[0], tril[1]]
    return out


@dataclass(frozen=True)
class PcaReducer:
    """Centered PCA projection with a deterministic sign convention."""

    means: np.ndarray          # (C,)
    components: np.ndarray     # (C, k), orthonormal columns
    explained_fraction: float

    @property
    def k(self) -> int:
        return self.components.shape[1]

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return (X - self.means) @ self.components


def fit_pca(vectors, variance_threshold: float = 0.9) -> PcaReducer:
    """Smallest-k PCA reducer explaining >= variance_threshold of the variance.

    Rank-deficient input is fine; the component count is capped at the
    numerical rank. Each component's largest-magnitude loading is made
    positive so the projection is reproducible.
    """
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit a PCA")
    if not 0 < variance_threshold <= 1:
        raise ValueError("variance_threshold must be in (0, 1]")

    means = X.mean(axis=0)
    Xc = X - means
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    tol = s[0] * max(X.shape) * np.finfo(np.float64).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if rank == 0:
        return PcaReducer(means=means, components=np.zeros((X.shape[1], 0)),
                          explained_fraction=1.0)

    var = s ** 2
    cum = np.cumsum(var[:rank]) / var.sum()
    k = min(int(np.searchsorted(cum, variance_threshold * (1 - 1e-12)) + 1), rank)
    comps = Vt[:k].T.copy()
    for j in range(k):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaReducer(means=means, components=comps,
                      explained_fraction=float(cum[k - 1]))


def leader_cluster(reduced, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Single-pass leader clustering.

    Walks the rows in input order; a row joins the first existing cluster
    whose leader lies within `radius` (Euclidean), otherwise it becomes the
    leader of a new cluster. Returns (labels, leader_rows) with 0-based
    cluster labels in creation order and the row index of each leader.
    The result is order-dependent by construction.
    """
    X = np.atleast_2d(np.asarray(reduced, dtype=np.float64))
    if radius < 0 or not np.isfinite(radius):
        raise ValueError("radius must be a finite non-negative real")
    n, k = X.shape
    labels = np.empty(n, dtype=np.int64)
    leader_rows: list[int] = []
    leaders = np.empty((16, k), dtype=np.float64)
    r2 = radius * radius
    for i in range(n):
        nlead = len(leader_rows)
        if nlead:
            diff = leaders[:nlead] - X[i]
            hit = np.flatnonzero(np.einsum("ij,ij->i", diff, diff) <= r2)
            if hit.size:
                labels[i] = hit[0]
                continue
        if nlead == len(leaders):
            leaders = np.concatenate([leaders, np.empty_like(leaders)])
        leaders[nlead] = X[i]
        leader_rows.append(i)
        labels[i] = nlead
    return labels, np.asarray(leader_rows, dtype=np.int64)


@dataclass(frozen=True)
class RadiusSweep:
    """(radius, cluster-count) curve with a suggested elbow radius."""

    radii: np.ndarray
    kappas: np.ndarray
    suggested: float

    def rows(self):
        return list(zip(self.radii.tolist(), self.kappas.tolist()))


def radius_sweep(reduced, radii) -> RadiusSweep:
    """Run the leader pass over a grid of radii and suggest an elbow.

    The suggestion maximizes the discrete second difference of the cluster
    count after normalizing both axes to [0, 1]; with fewer than three radii
    the middle grid point is returned.
    """
    radii = np.asarray(radii, dtype=np.float64)
    if radii.size == 0:
        raise ValueError("radii must be non-empty")
    if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be positive and strictly increasing")
    kappas = np.array(
        [len(leader_cluster(reduced, r)[1]) for r in radii], dtype=np.int64
    )
    if radii.size < 3 or kappas.max() == kappas.min():
        suggested = float(radii[radii.size // 2])
        return RadiusSweep(radii=radii, kappas=kappas, suggested=suggested)

    r_n = (radii - radii[0]) / (radii[-1] - radii[0])
    k_n = (kappas - kappas.min()) / (kappas.max() - kappas.min())
    # Divided-difference second derivative; reduces to the plain second
    # difference on an even grid.
    slope = np.diff(k_n) / np.diff(r_n)
    d2 = 2.0 * (slope[1:] - slope[:-1]) / (r_n[2:] - r_n[:-2])
    suggested = float(radii[1 + int(np.argmax(d2))])
    return RadiusSweep(radii=radii, kappas=kappas, suggested=suggested)


@dataclass(frozen=True)
class ClusterModel:
    """Location -> cluster map plus per-cluster representative geometry.

    nu : (n,) 1-based labels; ordered locations below m keep singleton labels
        1..m, clustered locations get labels in {m+1, ..., m+kappa}
    leaders : (kappa, k) reduced-space leader vectors
    leader_locs : (kappa,) ordered index of each leader location
    representatives : (kappa, m+1, m+1) leader distance matrices
    """

    m: int
    nu: np.ndarray
    leaders: np.ndarray
    leader_locs: np.ndarray
    representatives: np.ndarray
    kappa: int
    radius: float
    reducer: PcaReducer

    @property
    def n(self) -> int:
        return len(self.nu)

    def cluster_of(self, i: int) -> int:
        """0-based cluster index of a clustered ordered location."""
        if i < self.m:
            raise ValueError(f"location {i} is a singleton, not clustered")
        return int(self.nu[i]) - self.m - 1

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "kappa": self.kappa,
            "radius": self.radius,
            "nu": self.nu.tolist(),
            "leader_locs": self.leader_locs.tolist(),
            "leaders": self.leaders.tolist(),
            "representatives": self.representatives.tolist(),
            "pca": {
                "means": self.reducer.means.tolist(),
                "components": self.reducer.components.tolist(),
                "explained_fraction": self.reducer.explained_fraction,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        pca = d["pca"]
        comps = np.asarray(pca["components"], dtype=np.float64)
        if comps.size == 0:
            comps = comps.reshape(len(pca["means"]), 0)
        reducer = PcaReducer(
            means=np.asarray(pca["means"], dtype=np.float64),
            components=comps,
            explained_fraction=float(pca["explained_fraction"]),
        )
        m = int(d["m"])
        reps = np.asarray(d["representatives"], dtype=np.float64)
        if reps.size == 0:
            reps = reps.reshape(0, m + 1, m + 1)
        return cls(
            m=m,
            nu=np.asarray(d["nu"], dtype=np.int64),
            leaders=np.asarray(d["leaders"], dtype=np.float64),
            leader_locs=np.asarray(d["leader_locs"], dtype=np.int64),
            representatives=reps,
            kappa=int(d["kappa"]),
            radius=float(d["radius"]),
            reducer=reducer,
        )


def assign_all(reducer: PcaReducer, leaders, leader_locs, radius: float,
               graph: NeighborGraph, coords,
               subsample_rows=None, subsample_labels=None) -> ClusterModel:
    """Extend a leader set (typically fit on a subsample) to every location.

    Locations already labeled by the leader pass keep their labels; every
    other clustered location joins the nearest current leader if within
    `radius`, else it becomes a new leader, growing kappa. Locations with
    fewer than m neighbors always keep their own singleton cluster.
    """
    coords_arr = as_coord_array(coords)
    leaders = np.atleast_2d(np.asarray(leaders, dtype=np.float64))
    leader_locs = list(np.asarray(leader_locs, dtype=np.int64))
    if len(leader_locs) == 0:
        raise ValueError("need at least one leader")
    m, n = graph.m, graph.n
    rows = np.arange(m, n)

    cl_labels = np.full(n - m, -1, dtype=np.int64)
    if subsample_rows is not None:
        sub = np.asarray(subsample_rows, dtype=np.int64)
        cl_labels[sub - m] = np.asarray(subsample_labels, dtype=np.int64)
    todo = rows[cl_labels < 0]

    if todo.size:
        vecs = np.empty((todo.size, reducer.k), dtype=np.float64)
        tril = np.tril_indices(m + 1, k=-1)
        coords_ordered = coords_arr[graph.ordering]
        for start in range(0, todo.size, 4096):
            sel = todo[start:start + 4096]
            D = neighbor_distance_matrices(coords_ordered, graph, sel)
            vecs[start:start + len(sel)] = reducer.transform(D[:, tril[0], tril[1]])

        base = leaders
        ext = np.empty((16, reducer.k), dtype=np.float64)
        n_ext = 0
        ext_locs: list[int] = []
        r2 = radius * radius
        for start in range(0, todo.size, _LEADER_CHUNK):
            chunk = vecs[start:start + _LEADER_CHUNK]
            d2 = np.sum((chunk[:, None, :] - base[None, :, :]) ** 2, axis=-1)
            best = np.argmin(d2, axis=1)
            best_d2 = d2[np.arange(len(chunk)), best]
            for r_in_chunk in range(len(chunk)):
                lab, dd = int(best[r_in_chunk]), best_d2[r_in_chunk]
                if n_ext:
                    diff = ext[:n_ext] - chunk[r_in_chunk]
                    de = np.einsum("ij,ij->i", diff, diff)
                    j = int(np.argmin(de))
                    if de[j] < dd:
                        lab, dd = len(base) + j, de[j]
                if dd <= r2:
                    cl_labels[todo[start + r_in_chunk] - m] = lab
                else:
                    if n_ext == len(ext):
                        ext = np.concatenate([ext, np.empty_like(ext)])
                    ext[n_ext] = chunk[r_in_chunk]
                    n_ext += 1
                    loc = int(todo[start + r_in_chunk])
                    ext_locs.append(loc)
                    cl_labels[loc - m] = len(base) + n_ext - 1
        if n_ext:
            leaders = np.concatenate([leaders, ext[:n_ext]], axis=0)
            leader_locs = leader_locs + ext_locs

    leader_locs = np.asarray(leader_locs, dtype=np.int64)
    kappa = len(leader_locs)
    nu = np.empty(n, dtype=np.int64)
    nu[:m] = np.arange(1, m + 1)
    nu[m:] = m + 1 + cl_labels
    reps = neighbor_distance_matrices(coords_arr[graph.ordering], graph, leader_locs)
    return ClusterModel(m=m, nu=nu, leaders=leaders, leader_locs=leader_locs,
                        representatives=reps, kappa=kappa, radius=float(radius),
                        reducer=reducer)


def default_radius_grid(reduced, size: int = 12, seed: int = 0) -> np.ndarray:
    """Candidate radii from pairwise-distance quantiles of (a subsample of) rows."""
    X = np.atleast_2d(np.asarray(reduced, dtype=np.float64))
    rng = np.random.default_rng(seed)
    if len(X) > 1500:
        X = X[np.sort(rng.choice(len(X), 1500, replace=False))]
    diff = X[:, None, :] - X[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))[np.triu_indices(len(X), k=1)]
    d = d[d > 0]
    if d.size == 0:
        return np.array([1.0])
    grid = np.quantile(d, np.linspace(0.02, 0.65, size))
    grid = np.unique(grid)
    return grid[grid > 0]


def build_cluster_model(graph: NeighborGraph, coords, *,
                        variance_threshold: float = 0.9,
                        radius: float | None = None,
                        radii=None,
                        subsample: int = 10_000,
                        seed: int = 0) -> tuple[ClusterModel, RadiusSweep | None]:
    """PCA -> subsample -> leader pass -> full assignment, end to end.

    When `radius` is None the leader pass is swept over `radii` (default: a
    quantile grid) on the seeded subsample and the elbow suggestion is used.
    Returns the cluster model and the sweep (None if a radius was given).
    """
    vecs = distance_vectors(graph, coords)
    reducer = fit_pca(vecs, variance_threshold)
    reduced = reducer.transform(vecs)

    rng = np.random.default_rng(seed)
    if len(reduced) > subsample:
        pick = np.sort(rng.choice(len(reduced), subsample, replace=False))
    else:
        pick = np.arange(len(reduced))
    sub = reduced[pick]

    sweep = None
    if radius is None:
        if radii is None:
            radii = default_radius_grid(sub, seed=seed)
        sweep = radius_sweep(sub, radii)
        radius = sweep.suggested

    labels, leader_rows = leader_cluster(sub, radius)
    model = assign_all(
        reducer, sub[leader_rows], pick[leader_rows] + graph.m, radius,
        graph, coords, subsample_rows=pick + graph.m, subsample_labels=labels,
    )
    return model, sweep

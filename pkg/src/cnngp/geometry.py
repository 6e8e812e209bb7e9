"""Spatial point handling: distances, maxmin ordering, exact kNN, neighbor graphs.

Coordinates are plain 2-D Euclidean points stored as ``(n, 2)`` float arrays.
The caller is responsible for scaling units (e.g. degrees -> km) before any
distances are computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

# Below this size a vectorized linear scan beats building a kd-tree.
_BRUTE_FORCE_N = 64


def as_coord_array(coords) -> np.ndarray:
    """Coerce point input to an (n, 2) float64 array and validate finiteness."""
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"coordinates must have shape (n, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("coordinates must be finite (no NaN/inf)")
    return pts


def _check_no_duplicates(pts: np.ndarray) -> None:
    if len(np.unique(pts, axis=0)) != len(pts):
        raise ValueError("duplicate coordinates are not allowed")


@dataclass(frozen=True)
class SpatialDataset:
    """Raw modeling input: locations, design matrix, response.

    coords : (n, 2) locations, no duplicates
    design : (n, p) fixed-effect design matrix
    response : (n,) observed values
    """

    coords: np.ndarray
    design: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        coords = as_coord_array(self.coords)
        design = np.atleast_2d(np.asarray(self.design, dtype=np.float64))
        response = np.asarray(self.response, dtype=np.float64).ravel()
        n = len(coords)
        if n < 1:
            raise ValueError("dataset must contain at least one location")
        if design.shape[0] != n or response.shape[0] != n:
            raise ValueError(
                f"length mismatch: coords {n}, design {design.shape[0]}, "
                f"response {response.shape[0]}"
            )
        if not np.all(np.isfinite(design)) or not np.all(np.isfinite(response)):
            raise ValueError("design and response must be finite")
        _check_no_duplicates(coords)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "response", response)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def subset(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx)
        return SpatialDataset(self.coords[idx], self.design[idx], self.response[idx])


@dataclass(frozen=True)
class NeighborGraph:
    """Directed nearest-neighbor graph over maxmin-ordered locations.

    ordering : (n,) permutation; ordering[k] = original index of the k-th
        ordered location
    nbr_idx : (n, m) ordered-index references padded with -1; row i holds the
        min(i, m) nearest predecessors of i, ascending distance
    nbr_len : (n,) number of valid entries per row (= min(i, m))
    m : neighbor count
    """

    ordering: np.ndarray
    nbr_idx: np.ndarray
    nbr_len: np.ndarray
    m: int

    @property
    def n(self) -> int:
        return len(self.ordering)

    def neighbors(self, i: int) -> np.ndarray:
        """Ordered-index neighbor list of ordered location i."""
        return self.nbr_idx[i, : self.nbr_len[i]]

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "ordering": self.ordering.tolist(),
            "neighbors": [self.neighbors(i).tolist() for i in range(self.n)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeighborGraph":
        m, n = int(d["m"]), int(d["n"])
        nbr_idx = np.full((n, m), -1, dtype=np.int64)
        nbr_len = np.empty(n, dtype=np.int64)
        for i, row in enumerate(d["neighbors"]):
            nbr_len[i] = len(row)
            nbr_idx[i, : len(row)] = row
        return cls(ordering=np.asarray(d["ordering"], dtype=np.int64),
                   nbr_idx=nbr_idx, nbr_len=nbr_len, m=m)


def euclidean_distance(a, b) -> float:
    """Plain Euclidean distance between two points.

    Computed as sqrt(dx^2 + dy^2), the same arithmetic as every vectorized
    path in this module, so scalar and batch results agree bitwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != (2,) or b.shape != (2,):
        raise ValueError("points must be 2-D")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("points must be finite")
    dx, dy = a[0] - b[0], a[1] - b[1]
    return float(np.sqrt(dx * dx + dy * dy))


def pairwise_distances(pts) -> np.ndarray:
    """Full symmetric distance matrix of a point set."""
    pts = as_coord_array(pts)
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def maxmin_order(coords) -> np.ndarray:
    """Maxmin ordering of a point set.

    The first point is the one nearest the coordinate centroid; every
    subsequent point maximizes its minimum distance to the points already
    selected. All ties break to the lowest original index, which makes the
    ordering deterministic.
    """
    pts = as_coord_array(coords)
    n = len(pts)
    if n < 1:
        raise ValueError("need at least one point")
    _check_no_duplicates(pts)

    centroid = pts.mean(axis=0)
    d0 = np.sqrt(np.sum((pts - centroid) ** 2, axis=1))
    order = np.empty(n, dtype=np.int64)
    order[0] = int(np.argmin(d0))  # argmin takes the lowest index on ties

    # mind[j] = min distance from j to the selected set; updated incrementally.
    mind = np.sqrt(np.sum((pts - pts[order[0]]) ** 2, axis=1))
    mind[order[0]] = -np.inf
    for k in range(1, n):
        nxt = int(np.argmax(mind))
        order[k] = nxt
        d_new = np.sqrt(np.sum((pts - pts[nxt]) ** 2, axis=1))
        np.minimum(mind, d_new, out=mind)
        mind[nxt] = -np.inf
    return order


def _smallest_by_distance(d: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest candidates, ascending distance, ties by index."""
    if len(d) > 2 * k:
        # Partition first, then resolve possible ties at the cut exactly.
        part = np.argpartition(d, k - 1)
        cut = d[part[k - 1]]
        keep = d <= cut
        d, idx = d[keep], idx[keep]
    sel = np.lexsort((idx, d))[:k]
    return idx[sel]


def build_neighbor_graph(coords, ordering, m: int) -> NeighborGraph:
    """Exact nearest-predecessor graph for a given ordering.

    For each ordered index i, finds the min(i, m) nearest points among the
    predecessors {0, ..., i-1}, sorted by ascending distance (ties by lowest
    ordered index). Uses a kd-tree with an expanding-k search for larger
    inputs and a linear scan below that.
    """
    pts = as_coord_array(coords)
    n = len(pts)
    ordering = np.asarray(ordering, dtype=np.int64)
    if sorted(ordering.tolist()) != list(range(n)):
        raise ValueError("ordering is not a permutation of 0..n-1")
    if m < 1:
        raise ValueError("m must be >= 1")
    if m >= n:
        raise ValueError(f"m must be < n (got m={m}, n={n})")

    opts = pts[ordering]
    nbr_idx = np.full((n, m), -1, dtype=np.int64)
    nbr_len = np.minimum(np.arange(n), m).astype(np.int64)

    tree = cKDTree(opts) if n >= _BRUTE_FORCE_N else None
    for i in range(1, n):
        need = min(i, m)
        if tree is None or i <= 4 * (m + 1):
            cand = np.arange(i)
            d = np.sqrt(np.sum((opts[:i] - opts[i]) ** 2, axis=1))
            nbr_idx[i, :need] = _smallest_by_distance(d, cand, need)
            continue
        k = min(n, 4 * (m + 1))
        while True:
            d_all, idx_all = tree.query(opts[i], k=k)
            pred = idx_all < i
            pred_idx = idx_all[pred]
            if len(pred_idx) >= need:
                cut = d_all[pred][need - 1]
                if k >= n or d_all[-1] > cut:
                    # complete within a safety margin around the cut distance
                    cand = pred_idx[d_all[pred] <= cut * (1.0 + 1e-9) + 1e-300]
                    break
            if k >= n:  # every point inspected; predecessor set is complete
                cand = pred_idx
                break
            k = min(n, 2 * k)
        # Re-rank candidates with exactly the same arithmetic as the scan path
        # so tie-breaking is consistent everywhere.
        d = np.sqrt(np.sum((opts[cand] - opts[i]) ** 2, axis=1))
        nbr_idx[i, :need] = _smallest_by_distance(d, cand, need)

    return NeighborGraph(ordering=ordering, nbr_idx=nbr_idx, nbr_len=nbr_len, m=m)


def knn_query(coords, query, k: int, exclude=None):
    """Exact k nearest points to `query`, ascending distance, ties by index.

    Returns a list of (index, distance) pairs. Raises if k exceeds the number
    of eligible (non-excluded) points.
    """
    pts = as_coord_array(coords)
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape != (2,) or not np.all(np.isfinite(q)):
        raise ValueError("query must be a finite 2-D point")
    excluded = np.zeros(len(pts), dtype=bool)
    if exclude is not None:
        excluded[np.asarray(list(exclude), dtype=np.int64)] = True
    eligible = np.flatnonzero(~excluded)
    if k < 1 or k > len(eligible):
        raise ValueError(f"k={k} exceeds eligible point count {len(eligible)}")

    d = np.sqrt(np.sum((pts[eligible] - q) ** 2, axis=1))
    sel = _smallest_by_distance(d, eligible, k)
    dist = np.sqrt(np.sum((pts[sel] - q) ** 2, axis=1))
    return [(int(i), float(di)) for i, di in zip(sel, dist)]


def knn_batch(coords, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest observed points for each query row.

    Returns (idx, dist), each (len(queries), k). A kd-tree narrows candidates
    for large point sets; final ranking recomputes distances so results match
    knn_query exactly.
    """
    pts = as_coord_array(coords)
    qs = as_coord_array(queries)
    n = len(pts)
    if k < 1 or k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    idx = np.empty((len(qs), k), dtype=np.int64)
    dist = np.empty((len(qs), k), dtype=np.float64)
    if n < _BRUTE_FORCE_N:
        for r, q in enumerate(qs):
            d = np.sqrt(np.sum((pts - q) ** 2, axis=1))
            sel = _smallest_by_distance(d, np.arange(n), k)
            idx[r] = sel
            dist[r] = np.sqrt(np.sum((pts[sel] - q) ** 2, axis=1))
        return idx, dist

    tree = cKDTree(pts)
    kq = min(n, k + 8)
    d_all, i_all = tree.query(qs, k=kq)
    for r, q in enumerate(qs):
        d_r, i_r = d_all[r], i_all[r]
        cut = d_r[k - 1]
        if kq < n and not d_r[-1] > cut:
            # Rare tie overflow past the buffered k: fall back to a full scan.
            d_r = np.sqrt(np.sum((pts - q) ** 2, axis=1))
            i_r = np.arange(n)
        else:
            keep = d_r <= cut * (1.0 + 1e-9) + 1e-300
            d_r, i_r = d_r[keep], i_r[keep]
            d_r = np.sqrt(np.sum((pts[i_r] - q) ** 2, axis=1))
        sel = _smallest_by_distance(d_r, i_r, k)
        idx[r] = sel
        dist[r] = np.sqrt(np.sum((pts[sel] - q) ** 2, axis=1))
    return idx, dist


def neighbor_distance_matrices(coords_ordered: np.ndarray, graph: NeighborGraph,
                               rows: np.ndarray) -> np.ndarray:
    """Stack of (m+1, m+1) distance matrices over [s_i, n_1(s_i), ..., n_m(s_i)].

    Only valid for rows with a full neighbor set (i >= m). This single routine
    feeds both factor construction and cluster representatives so the two
    paths see bit-identical matrices.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if np.any(rows < graph.m):
        raise ValueError("rows must have full neighbor sets (index >= m)")
    sets = np.concatenate([rows[:, None], graph.nbr_idx[rows]], axis=1)
    p = coords_ordered[sets]  # (N, m+1, 2)
    diff = p[:, :, None, :] - p[:, None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def neighbor_distance_matrix(coords_ordered: np.ndarray, graph: NeighborGraph,
                             i: int) -> np.ndarray:
    """Single (k+1, k+1) distance matrix over [s_i, neighbors(i)], any i."""
    sets = np.concatenate(([i], graph.neighbors(i)))
    p = coords_ordered[sets]
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))

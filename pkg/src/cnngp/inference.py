"""MCMC fitting of y(s) = x(s)'beta + w(s) + eps(s).

Per iteration the sampler performs, in order: a Gibbs draw of beta (flat
prior), a Gibbs draw of tau2 (inverse gamma), a joint random-walk Metropolis
update of (sigma2, phi) on transformed scales, and one sequential Gibbs sweep
over the spatial effects. Rebuilding the kriging factors for each Metropolis
proposal is the dominant per-iteration cost; a cluster model shrinks that
rebuild from n units to m + kappa.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, asdict

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr, solve_triangular
from scipy.special import gammaln

from . import dataio
from .clustering import ClusterModel
from .covariance import CovarianceParams
from .factors import FactorBuilder, FactorSet, log_joint_w
from .geometry import NeighborGraph, SpatialDataset

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


@dataclass(frozen=True)
class PriorSpec:
    """Uniform phi, inverse-gamma variances, flat regression coefficients."""

    phi_lower: float = 1.0
    phi_upper: float = 30.0
    sigma2_shape: float = 2.0
    sigma2_scale: float = 1.0
    tau2_shape: float = 2.0
    tau2_scale: float = 0.1

    def __post_init__(self):
        if not 0 < self.phi_lower < self.phi_upper:
            raise ValueError("phi prior requires 0 < lower < upper")
        for name in ("sigma2_shape", "sigma2_scale", "tau2_shape", "tau2_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def log_invgamma(self, x: float, shape: float, scale: float) -> float:
        return (shape * math.log(scale) - gammaln(shape)
                - (shape + 1.0) * math.log(x) - scale / x)

    def log_sigma2(self, x: float) -> float:
        return self.log_invgamma(x, self.sigma2_shape, self.sigma2_scale)

    def log_tau2(self, x: float) -> float:
        return self.log_invgamma(x, self.tau2_shape, self.tau2_scale)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int
    burn_in: int
    thin: int = 1
    seed: int = 0
    step_sigma2: float = 0.5
    step_phi: float = 0.5
    adapt: bool = True
    target_accept: float = 0.35
    w_thin: int = 1
    store_w: bool = True
    recenter_beta: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1 or self.w_thin < 1:
            raise ValueError("thin and w_thin must be positive")
        if self.step_sigma2 <= 0 or self.step_phi <= 0:
            raise ValueError("proposal step scales must be positive")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainState:
    """Current sampler position; factors always match theta."""

    beta: np.ndarray
    w: np.ndarray
    theta: CovarianceParams
    tau2: float
    factors: FactorSet


@dataclass
class PosteriorChain:
    """Stored post-burn-in draws plus run diagnostics.

    Parameter draws are (K, .) arrays; w draws (possibly thinned further) are
    stored in original location order with `w_rows` giving the retained-draw
    index of each stored w row.
    """

    iters: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    phi: np.ndarray
    tau2: np.ndarray
    w: np.ndarray | None
    w_rows: np.ndarray | None
    accept_rate: float
    accept_rate_burnin: float
    timings: dict
    chol_ops_total: int
    ops_per_proposal: int
    n: int
    p: int
    m: int
    kappa: int | None
    config: SamplerConfig
    priors: PriorSpec

    @property
    def n_draws(self) -> int:
        return len(self.iters)

    def manifest(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "m": self.m,
            "kappa": self.kappa,
            "mode": "per-cluster" if self.kappa is not None else "per-location",
            "n_draws": self.n_draws,
            "accept_rate": self.accept_rate,
            "accept_rate_burnin": self.accept_rate_burnin,
            "timings": self.timings,
            "chol_ops_total": self.chol_ops_total,
            "ops_per_proposal": self.ops_per_proposal,
            "config": self.config.to_dict(),
            "priors": self.priors.to_dict(),
        }

    def save(self, out_dir: str) -> None:
        dataio.ensure_dir(out_dir)
        header = (["iter"] + [f"beta{j}" for j in range(self.p)]
                  + ["sigma2", "phi", "tau2"])
        cols = [self.iters] + [self.beta[:, j] for j in range(self.p)]
        cols += [self.sigma2, self.phi, self.tau2]
        dataio.write_table(os.path.join(out_dir, "chain.csv"), header, cols)
        if self.w is not None:
            np.savez_compressed(os.path.join(out_dir, "w_draws.npz"),
                                w=self.w, rows=self.w_rows,
                                iters=self.iters[self.w_rows])
        dataio.write_json(os.path.join(out_dir, "manifest.json"), self.manifest())

    @classmethod
    def load(cls, out_dir: str) -> "PosteriorChain":
        man = dataio.read_json(os.path.join(out_dir, "manifest.json"))
        p = int(man["p"])
        header = (["iter"] + [f"beta{j}" for j in range(p)]
                  + ["sigma2", "phi", "tau2"])
        _, data = dataio.read_table(os.path.join(out_dir, "chain.csv"),
                                    expected_header=header)
        w = w_rows = None
        wpath = os.path.join(out_dir, "w_draws.npz")
        if os.path.exists(wpath):
            with np.load(wpath) as z:
                w = z["w"]
                w_rows = z["rows"]
        return cls(
            iters=data[:, 0].astype(np.int64),
            beta=data[:, 1:1 + p],
            sigma2=data[:, 1 + p],
            phi=data[:, 2 + p],
            tau2=data[:, 3 + p],
            w=w,
            w_rows=w_rows,
            accept_rate=float(man["accept_rate"]),
            accept_rate_burnin=float(man["accept_rate_burnin"]),
            timings=man["timings"],
            chol_ops_total=int(man["chol_ops_total"]),
            ops_per_proposal=int(man["ops_per_proposal"]),
            n=int(man["n"]),
            p=p,
            m=int(man["m"]),
            kappa=man["kappa"],
            config=SamplerConfig(**man["config"]),
            priors=PriorSpec(**man["priors"]),
        )


def phi_prior_from_distances(coords, subsample: int = 10_000,
                             seed: int = 0) -> dict:
    """Uniform-prior bounds for phi from pairwise-distance extremes.

    Subsamples up to `subsample` locations, finds the minimum and maximum
    pairwise distance, and returns bounds (3/d_max, 3/d_min) so the prior
    spans effective ranges from the smallest to the largest observed scale.
    Degenerate inputs (all pairs at one distance) collapse the interval.
    """
    pts = np.asarray(coords, dtype=np.float64)
    if len(pts) < 2:
        raise ValueError("need at least 2 locations")
    rng = np.random.default_rng(seed)
    if len(pts) > subsample:
        pts = pts[np.sort(rng.choice(len(pts), subsample, replace=False))]
    d_min, d_max = np.inf, 0.0
    for start in range(0, len(pts), 256):
        block = pts[start:start + 256]
        diff = block[:, None, :] - pts[None, start:, :]
        d = np.sqrt(np.sum(diff * diff, axis=-1))
        iu = np.triu_indices(len(block), k=1, m=d.shape[1])
        upper = np.concatenate([d[iu], d[:, len(block):].ravel()])
        if upper.size:
            d_min = min(d_min, float(upper.min()))
            d_max = max(d_max, float(upper.max()))
    return {"lower": 3.0 / d_max, "upper": 3.0 / d_min,
            "d_min": d_min, "d_max": d_max}


def reverse_neighbors(graph: NeighborGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """CSR lists of (j, pos) with i in N(j), grouped by i.

    Location i appears in position `pos` of j's neighbor list; those reverse
    edges contribute likelihood terms to i's full conditional.
    """
    n, m = graph.n, graph.m
    valid = graph.nbr_idx >= 0
    i_vals = graph.nbr_idx[valid]
    j_vals = np.repeat(np.arange(n, dtype=np.int64), m)[valid.ravel()]
    pos_vals = np.tile(np.arange(m, dtype=np.int64), n)[valid.ravel()]
    order = np.lexsort((pos_vals, j_vals, i_vals))
    i_vals, j_vals, pos_vals = i_vals[order], j_vals[order], pos_vals[order]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(i_vals, minlength=n), out=ptr[1:])
    return ptr, j_vals, pos_vals


@njit(cache=True)
def _sweep_w_kernel(w, ymxb, tau2, B, F, unit_of, nbr_idx, nbr_len,
                    rev_ptr, rev_j, rev_pos, z):
    n = w.shape[0]
    inv_tau2 = 1.0 / tau2
    for i in range(n):
        u = unit_of[i]
        Fi = F[u]
        mu = 0.0
        for c in range(nbr_len[i]):
            mu += B[u, c] * w[nbr_idx[i, c]]
        prec = inv_tau2 + 1.0 / Fi
        lin = ymxb[i] * inv_tau2 + mu / Fi
        for e in range(rev_ptr[i], rev_ptr[i + 1]):
            j = rev_j[e]
            pos = rev_pos[e]
            uj = unit_of[j]
            Fj = F[uj]
            b = B[uj, pos]
            mj = 0.0
            for c in range(nbr_len[j]):
                if c != pos:
                    mj += B[uj, c] * w[nbr_idx[j, c]]
            prec += b * b / Fj
            lin += b * (w[j] - mj) / Fj
        w[i] = lin / prec + z[i] / np.sqrt(prec)


def w_full_conditional(i: int, w, ymxb, tau2: float, factors: FactorSet,
                       graph: NeighborGraph, rev) -> tuple[float, float]:
    """Mean and variance of w_i given everything else.

    Combines the data term, the location's own prior conditional, and one
    likelihood term per reverse neighbor. This is the reference form of the
    update applied sequentially by the sweep kernel.
    """
    rev_ptr, rev_j, rev_pos = rev
    u = factors.unit_of[i]
    Fi = factors.F[u]
    nb = graph.neighbors(i)
    mu = float(factors.B[u, : len(nb)] @ w[nb])
    prec = 1.0 / tau2 + 1.0 / Fi
    lin = ymxb[i] / tau2 + mu / Fi
    for e in range(rev_ptr[i], rev_ptr[i + 1]):
        j, pos = rev_j[e], rev_pos[e]
        uj = factors.unit_of[j]
        Fj = factors.F[uj]
        b = factors.B[uj, pos]
        nbj = graph.neighbors(j)
        mj = float(factors.B[uj, : len(nbj)] @ w[nbj]) - b * w[i]
        prec += b * b / Fj
        lin += b * (w[j] - mj) / Fj
    return lin / prec, 1.0 / prec


def gibbs_w(rng, w, ymxb, tau2: float, factors: FactorSet,
            graph: NeighborGraph, rev) -> None:
    """One full sequential sweep updating w in place, i = 0..n-1."""
    z = rng.standard_normal(graph.n)
    rev_ptr, rev_j, rev_pos = rev
    _sweep_w_kernel(w, ymxb, float(tau2), factors.B, factors.F,
                    factors.unit_of, graph.nbr_idx, graph.nbr_len,
                    rev_ptr, rev_j, rev_pos, z)


def apply_sparse_precision(factors: FactorSet, graph: NeighborGraph, rev,
                           z: np.ndarray) -> np.ndarray:
    """Multiply by the factorized precision (I-B)' F^-1 (I-B) implicitly.

    Costs O(n m); the precision matrix itself is never assembled.
    """
    u = factors.unit_of
    Bn = factors.B[u]
    idx = np.where(graph.nbr_idx >= 0, graph.nbr_idx, 0)
    t = (z - np.einsum("nc,nc->n", Bn, z[idx])) / factors.F[u]
    out = t.copy()
    rev_ptr, rev_j, rev_pos = rev
    i_idx = np.repeat(np.arange(graph.n), np.diff(rev_ptr))
    np.subtract.at(out, i_idx, factors.B[u[rev_j], rev_pos] * t[rev_j])
    return out


def recenter_beta(rng, beta, w, X, factors: FactorSet, graph: NeighborGraph,
                  rev) -> tuple[np.ndarray, np.ndarray]:
    """Interweaved redraw of beta in the centered parameterization.

    v = w + X beta is held fixed while beta is drawn from its generalized
    least-squares conditional N((X'QX)^-1 X'Qv, (X'QX)^-1) under the spatial
    prior precision Q, then w = v - X beta. Plain alternation of the beta and
    w blocks random-walks the intercept against the field's level (the
    slowest posterior mode under long-range dependence); this extra move cuts
    that autocorrelation by orders of magnitude while leaving the target
    distribution unchanged.
    """
    v = w + X @ beta
    QX = np.column_stack([
        apply_sparse_precision(factors, graph, rev, X[:, j])
        for j in range(X.shape[1])
    ])
    Qv = apply_sparse_precision(factors, graph, rev, v)
    cho = cho_factor(X.T @ QX)
    mean = cho_solve(cho, X.T @ Qv)
    upper = cho[0] if not cho[1] else cho[0].T
    beta_new = mean + solve_triangular(upper, rng.standard_normal(len(mean)),
                                       lower=False)
    return beta_new, v - X @ beta_new


def gibbs_beta(rng, y, X, w, tau2: float, xtx_cho=None) -> np.ndarray:
    """Draw beta from N((X'X)^-1 X'(y - w), tau2 (X'X)^-1)."""
    if xtx_cho is None:
        xtx_cho = cho_factor(X.T @ X)
    mean = cho_solve(xtx_cho, X.T @ (y - w))
    z = rng.standard_normal(len(mean))
    upper = xtx_cho[0] if not xtx_cho[1] else xtx_cho[0].T
    return mean + math.sqrt(tau2) * solve_triangular(upper, z, lower=False)


def gibbs_tau2(rng, y, X, beta, w, priors: PriorSpec) -> float:
    """Draw tau2 from its inverse-gamma full conditional."""
    resid = y - X @ beta - w
    shape = priors.tau2_shape + 0.5 * len(y)
    scale = priors.tau2_scale + 0.5 * float(resid @ resid)
    return scale / rng.gamma(shape)


def _theta_to_u(theta: CovarianceParams, priors: PriorSpec) -> tuple[float, float]:
    p = (theta.phi - priors.phi_lower) / (priors.phi_upper - priors.phi_lower)
    return math.log(theta.sigma2), math.log(p / (1.0 - p))


def _u_to_theta(u1: float, u2: float, priors: PriorSpec) -> CovarianceParams:
    p = 1.0 / (1.0 + math.exp(-u2))
    phi = priors.phi_lower + (priors.phi_upper - priors.phi_lower) * p
    return CovarianceParams(sigma2=math.exp(u1), phi=phi)


def _log_target_u(theta: CovarianceParams, log_w: float, priors: PriorSpec) -> float:
    """Log posterior density of theta in transformed coordinates.

    Adds the Jacobians of sigma2 = exp(u1) and the logistic phi map so the
    random walk on (u1, u2) targets the right distribution.
    """
    span = priors.phi_upper - priors.phi_lower
    jac = (math.log(theta.sigma2)
           + math.log((theta.phi - priors.phi_lower)
                      * (priors.phi_upper - theta.phi) / span))
    return log_w + priors.log_sigma2(theta.sigma2) - math.log(span) + jac


def metropolis_theta(rng, w, theta: CovarianceParams, log_w_cur: float,
                     builder: FactorBuilder, graph: NeighborGraph,
                     priors: PriorSpec, steps: tuple[float, float]):
    """Joint random-walk update of (sigma2, phi).

    Returns (theta, factors or None, log_w, accepted, alpha). Factors are
    rebuilt only for the proposal; on rejection the caller keeps the current
    ones. The proposal cannot leave the phi prior's support by construction.
    """
    z = rng.standard_normal(2)
    log_u = math.log(rng.random())
    u1, u2 = _theta_to_u(theta, priors)
    prop = _u_to_theta(u1 + steps[0] * z[0], u2 + steps[1] * z[1], priors)

    factors_prop = builder.build(prop)
    log_w_prop = log_joint_w(factors_prop, graph, w)
    log_alpha = (_log_target_u(prop, log_w_prop, priors)
                 - _log_target_u(theta, log_w_cur, priors))
    alpha = math.exp(min(0.0, log_alpha))
    if log_u < log_alpha:
        return prop, factors_prop, log_w_prop, True, alpha
    return theta, None, log_w_cur, False, alpha


def initialize(dataset: SpatialDataset, graph: NeighborGraph, priors: PriorSpec,
               config: SamplerConfig,
               clusters: ClusterModel | None = None) -> tuple[ChainState, FactorBuilder]:
    """Starting state: OLS beta, prior-mean phi, half residual variance for
    sigma2 and tau2 (floored at 1e-6 Var(y) to survive noiseless inputs),
    and w = 0."""
    X, y = dataset.design, dataset.response
    n, p = X.shape
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        _, _, piv = qr(X, mode="economic", pivoting=True)
        bad = sorted(int(c) for c in piv[rank:])
        raise ValueError(
            f"design matrix is rank deficient (rank {rank} < {p} columns); "
            f"dependent column(s): {bad}"
        )
    beta0, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta0
    floor = max(1e-6 * float(np.var(y)), 1e-12)
    v0 = max(0.5 * float(np.var(resid)), floor)
    theta0 = CovarianceParams(sigma2=v0,
                              phi=0.5 * (priors.phi_lower + priors.phi_upper))
    builder = FactorBuilder(graph, dataset.coords, clusters)
    factors = builder.build(theta0)
    state = ChainState(beta=beta0, w=np.zeros(n), theta=theta0, tau2=v0,
                       factors=factors)
    return state, builder


def run_chain(dataset: SpatialDataset, graph: NeighborGraph, priors: PriorSpec,
              config: SamplerConfig,
              clusters: ClusterModel | None = None) -> PosteriorChain:
    """Run the full sampler and collect post-burn-in draws.

    Per iteration: Gibbs beta, Gibbs tau2, Metropolis theta, the sequential
    w sweep, then (by default) the interweaved beta recentering that fixes
    the intercept/field-level random walk. Fully reproducible from
    config.seed: the draw order is beta (p normals), tau2 (one gamma), theta
    (two normals + one uniform), the sweep (n normals), recentering
    (p normals), regardless of accept/reject outcomes.
    """
    if dataset.n != graph.n:
        raise ValueError("dataset and graph sizes differ")
    rng = np.random.default_rng(config.seed)
    ordering = graph.ordering
    X = dataset.design[ordering]
    y = dataset.response[ordering]
    xtx_cho = cho_factor(X.T @ X)
    rev = reverse_neighbors(graph)

    state, builder = initialize(
        SpatialDataset(dataset.coords[ordering], X, y),
        NeighborGraph(np.arange(graph.n), graph.nbr_idx, graph.nbr_len, graph.m),
        priors, config, clusters,
    )
    # The builder above already saw ordered coords; rebuild counts start here.
    chol_total = state.factors.chol_ops

    n_keep = (config.iterations - config.burn_in) // config.thin
    p = dataset.p
    iters = np.empty(n_keep, dtype=np.int64)
    beta_d = np.empty((n_keep, p))
    sigma2_d = np.empty(n_keep)
    phi_d = np.empty(n_keep)
    tau2_d = np.empty(n_keep)
    w_rows = (np.arange(0, n_keep, config.w_thin, dtype=np.int64)
              if config.store_w else np.empty(0, dtype=np.int64))
    w_d = np.empty((len(w_rows), dataset.n)) if config.store_w else None

    base_steps = np.array([config.step_sigma2, config.step_phi])
    log_scale = 0.0
    acc_burn = acc_samp = 0
    timings = {"beta": 0.0, "tau2": 0.0, "theta": 0.0, "w": 0.0}
    t_start = time.perf_counter()

    kept = 0
    w_kept = 0
    for it in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        state.beta = gibbs_beta(rng, y, X, state.w, state.tau2, xtx_cho)
        t1 = time.perf_counter()
        state.tau2 = gibbs_tau2(rng, y, X, state.beta, state.w, priors)
        t2 = time.perf_counter()

        steps = base_steps * math.exp(log_scale)
        log_w_cur = log_joint_w(state.factors, graph, state.w)
        theta, factors, _, accepted, alpha = metropolis_theta(
            rng, state.w, state.theta, log_w_cur, builder, graph, priors,
            (steps[0], steps[1]),
        )
        chol_total += builder.units
        if accepted:
            state.theta = theta
            state.factors = factors
        if it <= config.burn_in:
            acc_burn += accepted
            if config.adapt:
                log_scale += (alpha - config.target_accept) / it ** 0.6
        else:
            acc_samp += accepted
        t3 = time.perf_counter()

        ymxb = y - X @ state.beta
        gibbs_w(rng, state.w, ymxb, state.tau2, state.factors, graph, rev)
        if config.recenter_beta:
            state.beta, state.w = recenter_beta(rng, state.beta, state.w, X,
                                                state.factors, graph, rev)
        t4 = time.perf_counter()

        timings["beta"] += t1 - t0
        timings["tau2"] += t2 - t1
        timings["theta"] += t3 - t2
        timings["w"] += t4 - t3

        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            iters[kept] = it
            beta_d[kept] = state.beta
            sigma2_d[kept] = state.theta.sigma2
            phi_d[kept] = state.theta.phi
            tau2_d[kept] = state.tau2
            if config.store_w and w_kept < len(w_rows) and w_rows[w_kept] == kept:
                w_d[w_kept, ordering] = state.w  # back to original location order
                w_kept += 1
            kept += 1

    timings["total"] = time.perf_counter() - t_start
    denom_b = max(config.burn_in, 1)
    denom_s = max(config.iterations - config.burn_in, 1)
    return PosteriorChain(
        iters=iters, beta=beta_d, sigma2=sigma2_d, phi=phi_d, tau2=tau2_d,
        w=w_d, w_rows=w_rows if config.store_w else None,
        accept_rate=acc_samp / denom_s,
        accept_rate_burnin=acc_burn / denom_b,
        timings=timings,
        chol_ops_total=int(chol_total),
        ops_per_proposal=int(builder.units),
        n=dataset.n, p=p, m=graph.m,
        kappa=None if clusters is None else clusters.kappa,
        config=config, priors=priors,
    )

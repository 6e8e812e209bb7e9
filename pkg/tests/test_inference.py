"""Sampler tests: analytic conditionals, dense-GP oracles, reproducibility."""

import math

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from cnngp.clustering import build_cluster_model
from cnngp.covariance import CovarianceParams
from cnngp.factors import build_factorset, log_joint_w
from cnngp.geometry import (
    NeighborGraph,
    SpatialDataset,
    build_neighbor_graph,
    maxmin_order,
    pairwise_distances,
)
from cnngp.inference import (
    PosteriorChain,
    PriorSpec,
    SamplerConfig,
    _log_target_u,
    apply_sparse_precision,
    gibbs_beta,
    gibbs_tau2,
    gibbs_w,
    initialize,
    metropolis_theta,
    phi_prior_from_distances,
    recenter_beta,
    reverse_neighbors,
    run_chain,
    w_full_conditional,
)
from cnngp.simulate import ScenarioSpec, generate_dataset


def small_setup(n=30, m=4, seed=0, sigma2=1.0, phi=4.0):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    order = maxmin_order(pts)
    graph = build_neighbor_graph(pts, order, m)
    params = CovarianceParams(sigma2, phi)
    factors = build_factorset(graph, pts, params)
    return rng, pts, graph, params, factors


class TestInitialize:
    def _dataset(self, seed=0, n=40):
        rng = np.random.default_rng(seed)
        pts = rng.random((n, 2))
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = X @ np.array([1.0, 5.0]) + 0.3 * rng.standard_normal(n)
        return SpatialDataset(pts, X, y)

    def _graph(self, ds, m=4):
        return build_neighbor_graph(ds.coords, maxmin_order(ds.coords), m)

    def test_ols_and_phi_midpoint(self):
        ds = self._dataset()
        state, _ = initialize(ds, self._graph(ds), PriorSpec(),
                              SamplerConfig(iterations=10, burn_in=0))
        expect, *_ = np.linalg.lstsq(ds.design, ds.response, rcond=None)
        np.testing.assert_allclose(state.beta, expect, rtol=1e-10)
        assert state.theta.phi == 15.5  # mean of Uniform(1, 30)

    def test_variance_initialization_half_residual_var(self):
        ds = self._dataset(seed=1)
        state, _ = initialize(ds, self._graph(ds), PriorSpec(),
                              SamplerConfig(iterations=10, burn_in=0))
        beta_hat, *_ = np.linalg.lstsq(ds.design, ds.response, rcond=None)
        v = 0.5 * np.var(ds.response - ds.design @ beta_hat)
        assert state.tau2 == pytest.approx(v, rel=1e-12)
        assert state.theta.sigma2 == pytest.approx(v, rel=1e-12)

    def test_perfect_fit_clamps_to_floor(self):
        rng = np.random.default_rng(2)
        pts = rng.random((25, 2))
        X = np.column_stack([np.ones(25), rng.standard_normal(25)])
        y = X @ np.array([2.0, -1.0])  # no noise at all
        ds = SpatialDataset(pts, X, y)
        state, _ = initialize(ds, self._graph(ds), PriorSpec(),
                              SamplerConfig(iterations=10, burn_in=0))
        floor = 1e-6 * np.var(y)
        assert state.tau2 == pytest.approx(floor, rel=1e-12)
        assert state.theta.sigma2 == pytest.approx(floor, rel=1e-12)

    def test_intercept_only_mean(self):
        rng = np.random.default_rng(3)
        pts = rng.random((30, 2))
        y = rng.standard_normal(30) + 4.0
        ds = SpatialDataset(pts, np.ones((30, 1)), y)
        state, _ = initialize(ds, self._graph(ds), PriorSpec(),
                              SamplerConfig(iterations=10, burn_in=0))
        assert state.beta[0] == pytest.approx(y.mean(), rel=1e-12)

    def test_rank_deficient_rejected_with_columns(self):
        rng = np.random.default_rng(4)
        pts = rng.random((20, 2))
        x1 = rng.standard_normal(20)
        X = np.column_stack([np.ones(20), x1, 2 * x1])
        ds = SpatialDataset(pts, X, rng.standard_normal(20))
        with pytest.raises(ValueError, match="rank deficient.*column"):
            initialize(ds, self._graph(ds), PriorSpec(),
                       SamplerConfig(iterations=10, burn_in=0))


class TestGibbsBeta:
    def test_moments_match_analytic(self):
        rng = np.random.default_rng(5)
        n, p = 25, 2
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = rng.standard_normal(n) + 3
        w = 0.5 * rng.standard_normal(n)
        tau2 = 0.7
        mean = np.linalg.solve(X.T @ X, X.T @ (y - w))
        cov = tau2 * np.linalg.inv(X.T @ X)
        K = 40_000
        draws = np.array([gibbs_beta(rng, y, X, w, tau2) for _ in range(K)])
        se_mean = np.sqrt(np.diag(cov) / K)
        np.testing.assert_array_less(np.abs(draws.mean(0) - mean), 5 * se_mean)
        se_var = np.diag(cov) * np.sqrt(2.0 / (K - 1))
        np.testing.assert_array_less(np.abs(draws.var(0, ddof=1) - np.diag(cov)),
                                     5 * se_var)

    def test_degenerate_limit_concentrates(self):
        rng = np.random.default_rng(6)
        n = 30
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        beta_star = np.array([2.0, -1.5])
        y = X @ beta_star + rng.standard_normal(n)
        w = y - X @ beta_star  # residual absorbed exactly by w
        draws = np.array([gibbs_beta(rng, y, X, w, 1e-14) for _ in range(50)])
        assert np.abs(draws - beta_star).max() < 1e-5


class TestGibbsTau2:
    def test_zero_residuals_prior_shape_update(self):
        rng = np.random.default_rng(7)
        n = 40
        X = np.ones((n, 1))
        beta = np.array([1.0])
        y = X @ beta  # w = 0 and zero residuals
        priors = PriorSpec(tau2_shape=3.0, tau2_scale=0.5)
        K = 40_000
        draws = np.array([gibbs_tau2(rng, y, X, beta, np.zeros(n), priors)
                          for _ in range(K)])
        a, b = 3.0 + n / 2, 0.5
        mean = b / (a - 1)
        var = b ** 2 / ((a - 1) ** 2 * (a - 2))
        assert abs(draws.mean() - mean) < 5 * np.sqrt(var / K)

    def test_moments_match_analytic(self):
        rng = np.random.default_rng(8)
        n = 30
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        beta = np.array([1.0, 2.0])
        w = rng.standard_normal(n)
        y = X @ beta + w + 0.4 * rng.standard_normal(n)
        priors = PriorSpec()
        resid = y - X @ beta - w
        a = priors.tau2_shape + n / 2
        b = priors.tau2_scale + 0.5 * resid @ resid
        K = 40_000
        draws = np.array([gibbs_tau2(rng, y, X, beta, w, priors)
                          for _ in range(K)])
        mean, var = b / (a - 1), b ** 2 / ((a - 1) ** 2 * (a - 2))
        assert abs(draws.mean() - mean) < 5 * np.sqrt(var / K)
        mu4 = b ** 4 / ((a - 1) * (a - 2) * (a - 3) * (a - 4))
        mu4c = mu4 - 4 * mean * b ** 3 / ((a - 1) * (a - 2) * (a - 3)) \
            + 6 * mean ** 2 * b ** 2 / ((a - 1) * (a - 2)) - 3 * mean ** 4
        se_var = np.sqrt(max(mu4c - var ** 2 * (K - 3) / (K - 1), 0.0) / K)
        assert abs(draws.var(ddof=1) - var) < 5 * se_var

    def test_empty_data_returns_prior(self):
        rng = np.random.default_rng(9)
        priors = PriorSpec(tau2_shape=4.0, tau2_scale=2.0)
        K = 30_000
        draws = np.array([
            gibbs_tau2(rng, np.empty(0), np.empty((0, 1)), np.array([0.0]),
                       np.empty(0), priors)
            for _ in range(K)
        ])
        mean = 2.0 / 3.0
        var = 4.0 / (9.0 * 2.0)
        assert abs(draws.mean() - mean) < 5 * np.sqrt(var / K)


class TestGibbsW:
    def test_single_node_analytic(self):
        g = NeighborGraph(ordering=np.array([0]),
                          nbr_idx=np.full((1, 1), -1, dtype=np.int64),
                          nbr_len=np.zeros(1, dtype=np.int64), m=1)
        params = CovarianceParams(2.0, 1.0)
        fs = build_factorset(g, np.array([[0.0, 0.0]]), params)
        rev = reverse_neighbors(g)
        tau2, resid = 0.5, np.array([1.3])
        mean, var = w_full_conditional(0, np.zeros(1), resid, tau2, fs, g, rev)
        prec = 1 / tau2 + 1 / params.sigma2
        assert var == pytest.approx(1 / prec, rel=1e-14)
        assert mean == pytest.approx((resid[0] / tau2) / prec, rel=1e-14)

    def test_huge_tau2_reduces_to_prior_conditional(self):
        rng, pts, graph, params, fs = small_setup(seed=10)
        rev = reverse_neighbors(graph)
        w = rng.standard_normal(30)
        i = 29  # last ordered node has no reverse neighbors
        assert rev[0][29] == rev[0][30]
        mean, var = w_full_conditional(i, w, np.zeros(30), 1e14, fs, graph, rev)
        nb = graph.neighbors(i)
        prior_mean = fs.B[fs.unit_of[i], : len(nb)] @ w[nb]
        assert mean == pytest.approx(prior_mean, rel=1e-10)
        assert var == pytest.approx(fs.F[fs.unit_of[i]], rel=1e-10)

    def test_sweep_kernel_matches_reference_formula(self):
        rng, pts, graph, params, fs = small_setup(n=40, m=5, seed=11)
        rev = reverse_neighbors(graph)
        ymxb = rng.standard_normal(40)
        tau2 = 0.3
        w0 = rng.standard_normal(40)

        w_kernel = w0.copy()
        gibbs_w(np.random.default_rng(123), w_kernel, ymxb, tau2, fs, graph, rev)

        z = np.random.default_rng(123).standard_normal(40)
        w_ref = w0.copy()
        for i in range(40):
            mean, var = w_full_conditional(i, w_ref, ymxb, tau2, fs, graph, rev)
            w_ref[i] = mean + math.sqrt(var) * z[i]
        np.testing.assert_allclose(w_kernel, w_ref, rtol=1e-12, atol=1e-12)

    def test_long_run_matches_dense_posterior(self):
        # with full conditioning sets the sweep targets the dense-GP posterior
        rng = np.random.default_rng(12)
        n = 6
        pts = rng.random((n, 2))
        order = maxmin_order(pts)
        graph = build_neighbor_graph(pts, order, n - 1)
        params = CovarianceParams(1.0, 3.0)
        fs = build_factorset(graph, pts, params)
        rev = reverse_neighbors(graph)
        tau2 = 0.2
        y = rng.standard_normal(n) * 1.5  # already centered residuals
        y_ord = y[order]

        C = params.sigma2 * np.exp(-params.phi * pairwise_distances(pts[order]))
        Q = np.linalg.inv(C) + np.eye(n) / tau2
        mean_exact = np.linalg.solve(Q, y_ord / tau2)
        var_exact = np.diag(np.linalg.inv(Q))

        sweeps, burn = 20_000, 1_000
        w = np.zeros(n)
        acc = np.zeros(n)
        acc2 = np.zeros(n)
        for s in range(sweeps):
            gibbs_w(rng, w, y_ord, tau2, fs, graph, rev)
            if s >= burn:
                acc += w
                acc2 += w * w
        K = sweeps - burn
        emp_mean = acc / K
        emp_var = acc2 / K - emp_mean ** 2
        # Gibbs draws are autocorrelated; allow a generous effective-sample cut
        se = np.sqrt(var_exact / (K / 20))
        np.testing.assert_array_less(np.abs(emp_mean - mean_exact), 6 * se)
        np.testing.assert_allclose(emp_var, var_exact, rtol=0.25)


class TestRecenterBeta:
    def _exact_setup(self, seed=40):
        # m = n-1 so the sparse precision equals the dense inverse exactly
        rng = np.random.default_rng(seed)
        n = 7
        pts = rng.random((n, 2))
        graph = build_neighbor_graph(pts, maxmin_order(pts), n - 1)
        params = CovarianceParams(1.3, 4.0)
        fs = build_factorset(graph, pts, params)
        rev = reverse_neighbors(graph)
        C = params.sigma2 * np.exp(
            -params.phi * pairwise_distances(pts[graph.ordering]))
        return rng, graph, fs, rev, np.linalg.inv(C)

    def test_apply_precision_matches_dense_inverse(self):
        rng, graph, fs, rev, Q = self._exact_setup()
        for _ in range(5):
            z = rng.standard_normal(graph.n)
            np.testing.assert_allclose(
                apply_sparse_precision(fs, graph, rev, z), Q @ z, rtol=1e-9)

    def test_draw_matches_gls_conditional(self):
        rng, graph, fs, rev, Q = self._exact_setup(seed=41)
        n = graph.n
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        w = rng.standard_normal(n)
        beta = np.array([0.7, -0.2])
        v = w + X @ beta
        M = X.T @ Q @ X
        mean = np.linalg.solve(M, X.T @ Q @ v)
        cov = np.linalg.inv(M)
        K = 30_000
        draws = np.empty((K, 2))
        for k in range(K):
            b2, w2 = recenter_beta(rng, beta, w, X, fs, graph, rev)
            draws[k] = b2
            # the centered field v is exactly preserved
            np.testing.assert_allclose(w2 + X @ b2, v, rtol=1e-10)
        se = np.sqrt(np.diag(cov) / K)
        np.testing.assert_array_less(np.abs(draws.mean(0) - mean), 5 * se)
        se_var = np.diag(cov) * np.sqrt(2.0 / (K - 1))
        np.testing.assert_array_less(
            np.abs(draws.var(0, ddof=1) - np.diag(cov)), 5 * se_var)


class TestReverseNeighbors:
    def test_matches_brute_force(self):
        _, pts, graph, _, _ = small_setup(n=50, m=6, seed=13)
        ptr, jj, pp = reverse_neighbors(graph)
        for i in range(50):
            got = {(int(jj[e]), int(pp[e])) for e in range(ptr[i], ptr[i + 1])}
            want = set()
            for j in range(50):
                for pos, v in enumerate(graph.neighbors(j)):
                    if v == i:
                        want.add((j, pos))
            assert got == want


class TestMetropolisTheta:
    def test_never_touches_other_blocks(self):
        rng, pts, graph, params, fs = small_setup(seed=14)
        builder_state, builder = initialize(
            SpatialDataset(pts, np.ones((30, 1)), np.zeros(30)), graph,
            PriorSpec(), SamplerConfig(iterations=10, burn_in=0))
        w = rng.standard_normal(30)
        w_before = w.copy()
        log_w = log_joint_w(builder_state.factors, graph, w)
        metropolis_theta(rng, w, builder_state.theta, log_w, builder, graph,
                         PriorSpec(), (0.4, 0.4))
        np.testing.assert_array_equal(w, w_before)

    def test_identity_proposal_always_accepts(self):
        rng, pts, graph, params, fs = small_setup(seed=15)
        _, builder = initialize(
            SpatialDataset(pts, np.ones((30, 1)), np.zeros(30)), graph,
            PriorSpec(), SamplerConfig(iterations=10, burn_in=0))
        w = rng.standard_normal(30)
        theta = CovarianceParams(1.0, 4.0)
        factors = builder.build(theta)
        log_w = log_joint_w(factors, graph, w)
        for trial in range(10):
            # steps so small that u + step*z == u exactly in float64
            _, _, _, accepted, alpha = metropolis_theta(
                np.random.default_rng(trial), w, theta, log_w, builder, graph,
                PriorSpec(), (1e-300, 1e-300))
            assert accepted and alpha == 1.0

    def test_chain_matches_grid_oracle(self):
        # with w fixed at zero the theta posterior is cheap to grid-integrate;
        # the Metropolis phi marginal must match it
        rng = np.random.default_rng(16)
        n = 12
        pts = rng.random((n, 2))
        graph = build_neighbor_graph(pts, maxmin_order(pts), 4)
        priors = PriorSpec()
        _, builder = initialize(
            SpatialDataset(pts, np.ones((n, 1)), np.zeros(n)), graph, priors,
            SamplerConfig(iterations=10, burn_in=0))
        w = np.zeros(n)

        u1g = np.linspace(-3.0, 3.0, 70)
        u2g = np.linspace(-5.0, 5.0, 70)
        from cnngp.inference import _u_to_theta

        logpost = np.empty((70, 70))
        phis = np.empty((70, 70))
        for a, u1 in enumerate(u1g):
            for b, u2 in enumerate(u2g):
                th = _u_to_theta(u1, u2, priors)
                lw = log_joint_w(builder.build(th), graph, w)
                logpost[a, b] = _log_target_u(th, lw, priors)
                phis[a, b] = th.phi
        prob = np.exp(logpost - logpost.max())
        prob /= prob.sum()
        bins = np.linspace(priors.phi_lower, priors.phi_upper, 9)
        grid_mass = np.array([
            prob[(phis >= lo) & (phis < hi)].sum()
            for lo, hi in zip(bins[:-1], bins[1:])
        ])

        theta = CovarianceParams(1.0, 10.0)
        factors = builder.build(theta)
        log_w_cur = log_joint_w(factors, graph, w)
        draws = np.empty(25_000)
        for s in range(25_000):
            theta, new_factors, log_w_cur, accepted, _ = metropolis_theta(
                rng, w, theta, log_w_cur, builder, graph, priors, (0.8, 0.8))
            draws[s] = theta.phi
        chain_mass, _ = np.histogram(draws[2_000:], bins=bins)
        chain_mass = chain_mass / chain_mass.sum()
        np.testing.assert_allclose(chain_mass, grid_mass, atol=0.075)


class TestRunChain:
    def _pieces(self, n=120, seed=20, m=6):
        spec = ScenarioSpec(n=n, phi_true=2.88, sigma2_true=1.0, tau2_true=0.1)
        ds, _ = generate_dataset(spec, seed=seed)
        graph = build_neighbor_graph(ds.coords, maxmin_order(ds.coords), m)
        return ds, graph

    def test_bitwise_reproducible(self):
        ds, graph = self._pieces()
        cfg = SamplerConfig(iterations=200, burn_in=100, seed=42)
        c1 = run_chain(ds, graph, PriorSpec(), cfg)
        c2 = run_chain(ds, graph, PriorSpec(), cfg)
        for name in ("beta", "sigma2", "phi", "tau2", "w"):
            np.testing.assert_array_equal(getattr(c1, name), getattr(c2, name))

    def test_radius_zero_chain_equivalence(self):
        ds, graph = self._pieces(n=100, seed=21, m=5)
        model, _ = build_cluster_model(graph, ds.coords, radius=0.0)
        cfg = SamplerConfig(iterations=300, burn_in=100, seed=7)
        c_loc = run_chain(ds, graph, PriorSpec(), cfg)
        c_cl = run_chain(ds, graph, PriorSpec(), cfg, clusters=model)
        for name in ("beta", "sigma2", "phi", "tau2", "w"):
            np.testing.assert_array_equal(getattr(c_loc, name), getattr(c_cl, name))
        assert c_cl.kappa == 95 and c_cl.ops_per_proposal == 100

    def test_draw_bookkeeping(self):
        ds, graph = self._pieces(n=60, seed=22, m=4)
        cfg = SamplerConfig(iterations=10, burn_in=4, thin=2, w_thin=2, seed=1)
        chain = run_chain(ds, graph, PriorSpec(), cfg)
        assert chain.iters.tolist() == [6, 8, 10]
        assert chain.beta.shape == (3, 2)
        assert chain.w.shape == (2, 60)  # kept rows 0 and 2
        assert chain.w_rows.tolist() == [0, 2]

    def test_adaptive_acceptance_in_window(self):
        ds, graph = self._pieces(n=200, seed=23, m=6)
        cfg = SamplerConfig(iterations=3000, burn_in=1500, seed=3)
        chain = run_chain(ds, graph, PriorSpec(), cfg)
        assert 0.25 <= chain.accept_rate_burnin <= 0.45

    def test_save_load_round_trip(self, tmp_path):
        ds, graph = self._pieces(n=50, seed=24, m=4)
        cfg = SamplerConfig(iterations=40, burn_in=10, seed=9, w_thin=3)
        chain = run_chain(ds, graph, PriorSpec(), cfg)
        chain.save(tmp_path / "run")
        loaded = PosteriorChain.load(tmp_path / "run")
        for name in ("iters", "beta", "sigma2", "phi", "tau2", "w", "w_rows"):
            np.testing.assert_array_equal(getattr(chain, name),
                                          getattr(loaded, name))
        assert loaded.ops_per_proposal == chain.ops_per_proposal
        assert loaded.config == cfg

    def test_timings_and_manifest_fields(self):
        ds, graph = self._pieces(n=50, seed=25, m=4)
        chain = run_chain(ds, graph, PriorSpec(),
                          SamplerConfig(iterations=30, burn_in=10, seed=2))
        man = chain.manifest()
        for key in ("timings", "accept_rate", "chol_ops_total",
                    "ops_per_proposal", "kappa"):
            assert key in man
        assert man["timings"]["total"] > 0


class TestPhiPrior:
    def test_two_points_distance_one(self):
        out = phi_prior_from_distances(np.array([[0.0, 0.0], [1.0, 0.0]]))
        assert out["lower"] == 3.0 and out["upper"] == 3.0

    def test_full_subsample_exact(self):
        rng = np.random.default_rng(26)
        pts = rng.random((300, 2))
        out = phi_prior_from_distances(pts, subsample=300)
        d = pdist(pts)
        assert out["d_min"] == pytest.approx(d.min(), rel=1e-12)
        assert out["d_max"] == pytest.approx(d.max(), rel=1e-12)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            phi_prior_from_distances(np.zeros((1, 2)))

"""Covariance kernel and matrix-construction tests."""

import numpy as np
import pytest

from cnngp.covariance import (
    CovarianceParams,
    NoiseParams,
    cov_from_distances,
    effective_range,
    exponential_cov,
    validate_distance_matrix,
)
from cnngp.geometry import pairwise_distances


class TestParams:
    @pytest.mark.parametrize("sigma2,phi", [(0, 1), (-1, 1), (1, 0), (1, -2),
                                            (np.nan, 1), (1, np.inf)])
    def test_invalid_covariance_params(self, sigma2, phi):
        with pytest.raises(ValueError):
            CovarianceParams(sigma2, phi)

    def test_invalid_noise(self):
        with pytest.raises(ValueError):
            NoiseParams(0.0)
        assert NoiseParams(0.3).tau2 == 0.3


class TestExponentialCov:
    def test_zero_distance_is_sigma2(self):
        for phi in (0.1, 1.0, 50.0):
            assert exponential_cov(0.0, CovarianceParams(1.0, phi)) == 1.0
        assert exponential_cov(0.0, CovarianceParams(3.5, 2.0)) == 3.5

    def test_effective_range_short(self):
        # correlation threshold 0.1 at distance 0.2 for the short-range decay
        assert exponential_cov(0.2, CovarianceParams(1.0, 11.51)) == pytest.approx(
            0.100, abs=1e-3)

    def test_effective_range_long(self):
        assert exponential_cov(0.8, CovarianceParams(1.0, 2.88)) == pytest.approx(
            0.100, abs=1e-3)

    def test_rejects_negative_distance(self):
        with pytest.raises(ValueError):
            exponential_cov(-0.1, CovarianceParams(1.0, 1.0))

    def test_monotone_in_distance_and_phi(self):
        d = np.linspace(0, 3, 40)
        v = exponential_cov(d, CovarianceParams(2.0, 1.5))
        assert np.all(np.diff(v) < 0)
        phis = np.linspace(0.5, 10, 20)
        at_d1 = [exponential_cov(1.0, CovarianceParams(2.0, p)) for p in phis]
        assert np.all(np.diff(at_d1) < 0)

    def test_correlation_in_unit_interval(self):
        rng = np.random.default_rng(0)
        params = CovarianceParams(4.0, 3.0)
        d = rng.random(100) * 10
        corr = exponential_cov(d, params) / params.sigma2
        assert np.all((corr > 0) & (corr <= 1))


class TestCovFromDistances:
    def test_1x1(self):
        out = cov_from_distances(np.zeros((1, 1)), CovarianceParams(2.5, 1.0))
        assert out.shape == (1, 1) and out[0, 0] == 2.5

    def test_2x2_half_correlation(self):
        params = CovarianceParams(1.8, 2.0)
        d = np.log(2.0) / params.phi  # exp(-phi d) = 0.5
        D = np.array([[0.0, d], [d, 0.0]])
        out = cov_from_distances(D, params)
        np.testing.assert_allclose(
            out, params.sigma2 * np.array([[1.0, 0.5], [0.5, 1.0]]), rtol=1e-15)

    def test_equilateral_equal_offdiagonals(self):
        pts = np.array([(0, 0), (1, 0), (0.5, np.sqrt(3) / 2)])
        D = pairwise_distances(pts)
        out = cov_from_distances(D, CovarianceParams(1.0, 3.0))
        off = out[np.triu_indices(3, k=1)]
        np.testing.assert_allclose(off, off[0], rtol=1e-12)
        np.testing.assert_allclose(out, out.T, rtol=0)

    @pytest.mark.parametrize("n", [5, 50, 200, 500])
    def test_cholesky_succeeds_on_real_configurations(self, n):
        rng = np.random.default_rng(n)
        pts = rng.random((n, 2)) * 2.0
        D = pairwise_distances(pts)
        out = cov_from_distances(D, CovarianceParams(1.3, 4.0))
        np.linalg.cholesky(out)  # raises if not positive definite

    def test_validation_rejections(self):
        with pytest.raises(ValueError, match="symmetric"):
            validate_distance_matrix(np.array([[0.0, 1.0], [2.0, 0.0]]))
        with pytest.raises(ValueError, match="diagonal"):
            validate_distance_matrix(np.array([[1.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(ValueError, match="non-negative"):
            validate_distance_matrix(np.array([[0.0, -1.0], [-1.0, 0.0]]))
        with pytest.raises(ValueError, match="square"):
            validate_distance_matrix(np.zeros((2, 3)))


class TestEffectiveRange:
    def test_identity_against_kernel(self):
        # solve sigma2 exp(-phi d) = 0.1 sigma2 -> d = ln(10)/phi
        for phi, expect in [(11.51, 0.200), (2.88, 0.800)]:
            d = effective_range(phi)
            assert d == pytest.approx(expect, abs=1e-3)
            assert exponential_cov(d, CovarianceParams(1.0, phi)) == pytest.approx(
                0.1, rel=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            effective_range(0.0)

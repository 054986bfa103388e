"""Tests for the normal/Laplace primitives and the multivariate Laplace."""

import math

import mpmath
import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import kv as bessel_kv

from convlmm.distributions import (
    MultivariateLaplace,
    UnivariateLaplace,
    laplace_logpdf,
    laplace_pdf,
    log_mills,
    mills_ratio,
    mv_laplace_logpdf,
    mv_laplace_pdf,
    normal_pdf,
    psd_factor,
    sample_laplace_scale_mixture,
    sample_mv_laplace,
)
from convlmm.errors import DomainError

SQRT2 = math.sqrt(2.0)


class TestUnivariateDensities:
    def test_laplace_peak_values(self):
        assert laplace_pdf(0.0, 0.0, 1.0) == pytest.approx(1.0 / SQRT2, abs=1e-12)
        for mu, sigma in [(0.3, 0.7), (-2.0, 4.0), (5.0, 0.1)]:
            assert laplace_pdf(mu, mu, sigma) == pytest.approx(1.0 / (SQRT2 * sigma))

    def test_laplace_off_peak_value(self):
        # direct evaluation of the closed form at (1, 0, 1)
        expected = (1.0 / SQRT2) * math.exp(-SQRT2)
        assert laplace_pdf(1.0, 0.0, 1.0) == pytest.approx(expected, rel=1e-12)

    def test_normal_values(self):
        assert normal_pdf(0.0, 0.0, 1.0) == pytest.approx(1.0 / math.sqrt(2 * math.pi))
        assert normal_pdf(3.0, 3.0, 2.0) == pytest.approx(0.3989422804014327 / 2.0)
        assert normal_pdf(2.0, 0.0, 2.0) == pytest.approx(
            0.3989422804014327 / 2.0 * math.exp(-0.5), rel=1e-12)

    @pytest.mark.parametrize("sigma", [0.1, 1.0, 10.0])
    @pytest.mark.parametrize("pdf", [laplace_pdf, normal_pdf])
    def test_normalization(self, pdf, sigma):
        val, _ = integrate.quad(lambda t: pdf(t, 0.5, sigma), -np.inf, np.inf,
                                limit=200)
        assert val == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("pdf", [laplace_pdf, normal_pdf])
    def test_symmetry(self, pdf):
        # mu and the offsets are exact binary fractions so mu +/- d is exact
        mu = 0.375
        for d in np.arange(0, 384) / 32.0:
            assert pdf(mu + d, mu, 1.3) == pdf(mu - d, mu, 1.3)

    def test_log_concavity(self):
        grid = np.linspace(-8, 8, 400)
        for logpdf in (laplace_logpdf,):
            vals = logpdf(grid, 0.0, 1.0)
            second = np.diff(vals, 2)
            assert np.all(second <= 1e-12)
        vals = -0.5 * grid**2  # normal log density up to constants
        assert np.all(np.diff(vals, 2) <= 1e-12)

    def test_sigma_validation(self):
        with pytest.raises(DomainError):
            laplace_pdf(0.0, 0.0, 0.0)
        with pytest.raises(DomainError):
            normal_pdf(0.0, 0.0, -1.0)
        with pytest.raises(DomainError):
            UnivariateLaplace(0.0, -2.0)


class TestMillsRatio:
    def test_at_zero(self):
        assert mills_ratio(0.0) == pytest.approx(0.5 / stats.norm.pdf(0.0), rel=1e-12)

    def test_large_argument_asymptotic(self):
        # asymptotic series 1/t - 1/t^3 + 3/t^5 as the oracle
        t = 30.0
        series = 1 / t - 1 / t**3 + 3 / t**5
        assert mills_ratio(t) == pytest.approx(series, rel=1e-6)

    def test_far_right_tail_is_stable(self):
        # naive (1 - Phi)/phi degenerates to 0/0 out here
        for t in (10.0, 20.0, 30.0, 38.0):
            r = float(mills_ratio(t))
            assert 0.0 < r < 1.0 / t
            assert r == pytest.approx(1 / t - 1 / t**3 + 3 / t**5, rel=1e-4)

    def test_negative_tail_against_high_precision_oracle(self):
        mpmath.mp.dps = 60
        for t in (-2.0, -5.0, -10.0, -20.0):
            exact = float((1 - mpmath.ncdf(t)) / mpmath.npdf(t))
            assert mills_ratio(t) == pytest.approx(exact, rel=1e-10)

    def test_identity_with_cdf(self):
        for t in np.linspace(-8, 8, 81):
            value = mills_ratio(t) * stats.norm.pdf(t) + stats.norm.cdf(t)
            assert value == pytest.approx(1.0, abs=1e-10)

    def test_strictly_decreasing_and_positive(self):
        grid = np.linspace(-30, 38, 500)
        vals = mills_ratio(grid)
        assert np.all(vals > 0)
        assert np.all(np.diff(vals) < 0)

    def test_log_mills_matches_everywhere(self):
        for t in (-40.0, -10.0, -1.0, 0.0, 3.0, 38.0):
            if t >= -35:
                assert log_mills(t) == pytest.approx(
                    math.log(float(mills_ratio(t))), abs=1e-10)
            else:
                # ratio overflows a double but its log is fine
                assert np.isfinite(log_mills(t))
                assert log_mills(t) > 700


class TestScaleMixtureSampler:
    def test_moments(self):
        rng = np.random.default_rng(7)
        draws = sample_laplace_scale_mixture(0.0, 1.0, rng, size=1_000_000)
        assert abs(draws.mean()) < 0.005
        assert draws.var() == pytest.approx(1.0, abs=0.02)
        kurt = stats.kurtosis(draws)  # excess kurtosis; Laplace has 3
        assert kurt == pytest.approx(3.0, abs=0.3)

    def test_kurtosis_against_inverse_cdf_oracle(self):
        # independent oracle: inverse-CDF sampling of the same Laplace law
        rng = np.random.default_rng(21)
        u = rng.uniform(size=500_000)
        b = 1.0 / SQRT2  # classic scale parameter for unit variance
        oracle = np.where(u < 0.5, b * np.log(2 * u), -b * np.log(2 * (1 - u)))
        rng2 = np.random.default_rng(22)
        draws = sample_laplace_scale_mixture(0.0, 1.0, rng2, size=500_000)
        assert stats.kurtosis(draws) == pytest.approx(stats.kurtosis(oracle), abs=0.3)

    def test_location_scale(self):
        rng = np.random.default_rng(3)
        draws = sample_laplace_scale_mixture(5.0, 3.0, rng, size=200_000)
        assert draws.mean() == pytest.approx(5.0, abs=0.03)
        assert draws.var() == pytest.approx(9.0, abs=0.2)

    def test_ks_against_laplace_cdf(self):
        rng = np.random.default_rng(17)
        draws = sample_laplace_scale_mixture(0.0, 1.0, rng, size=100_000)
        res = stats.kstest(draws, stats.laplace(scale=1.0 / SQRT2).cdf)
        assert res.pvalue > 0.01


class TestMultivariateLaplace:
    def test_univariate_reduction(self):
        for t in (-3.0, -0.5, 0.0, 0.7, 2.2):
            for s2 in (0.25, 1.0, 4.0):
                got = mv_laplace_pdf(np.array([t]), np.array([[s2]]))
                want = laplace_pdf(t, 0.0, math.sqrt(s2))
                assert got == pytest.approx(want, rel=1e-10)

    def test_bivariate_normalization(self):
        # the density is singular (integrably) at the origin; splitting into
        # quadrants keeps the quadrature nodes off the singular point
        sigma = np.array([[1.0, 0.3], [0.3, 0.7]])
        total = 0.0
        for xr in ((-9, 0), (0, 9)):
            for yr in ((-9, 0), (0, 9)):
                val, _ = integrate.dblquad(
                    lambda y, x: mv_laplace_pdf(np.array([x, y]), sigma),
                    xr[0], xr[1], lambda x: yr[0], lambda x: yr[1], epsabs=1e-6)
                total += val
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_density_against_kde_of_mixture_draws(self):
        # oracle: kernel density estimate at (1, 0) from scale-mixture draws
        sigma = np.eye(2)
        rng = np.random.default_rng(9)
        draws = sample_mv_laplace(sigma, rng, size=10_000_000)
        h = draws.std(axis=0).mean() * draws.shape[0] ** (-1 / 6)
        point = np.array([1.0, 0.0])
        z = (draws - point) / h
        kde = float(np.mean(np.exp(-0.5 * np.sum(z * z, axis=1))
                            / (2 * math.pi * h * h)))
        assert mv_laplace_pdf(point, sigma) == pytest.approx(kde, rel=0.05)

    def test_singular_at_origin_for_q2(self):
        assert math.isinf(mv_laplace_pdf(np.zeros(2), np.eye(2)))
        assert math.isinf(mv_laplace_logpdf(np.zeros(3), np.eye(3)))

    def test_sample_covariance(self):
        sigma = np.array([[3.0, 1.0], [1.0, 2.0]])
        rng = np.random.default_rng(31)
        draws = sample_mv_laplace(sigma, rng, size=1_000_000)
        cov = np.cov(draws.T)
        assert np.allclose(cov, sigma, rtol=0.02, atol=0.02)

    def test_margins_are_leptokurtic(self):
        rng = np.random.default_rng(32)
        draws = sample_mv_laplace(np.diag([2.0, 0.5]), rng, size=1_000_000)
        for j in range(2):
            assert stats.kurtosis(draws[:, j]) == pytest.approx(3.0, abs=0.3)

    def test_uncorrelated_but_dependent_for_diagonal_sigma(self):
        rng = np.random.default_rng(33)
        draws = sample_mv_laplace(np.eye(2), rng, size=1_000_000)
        corr = np.corrcoef(draws.T)[0, 1]
        assert abs(corr) < 0.005
        abs_corr = np.corrcoef(np.abs(draws).T)[0, 1]
        assert abs_corr > 0.1  # shared mixing variable couples the magnitudes

    def test_asymmetric_sigma_rejected(self):
        with pytest.raises(DomainError):
            sample_mv_laplace(np.array([[1.0, 0.5], [0.2, 1.0]]), np.random.default_rng(0))
        with pytest.raises(DomainError):
            MultivariateLaplace(np.array([[1.0, 0.5], [0.2, 1.0]]))

    def test_bessel_evaluation_against_mpmath(self):
        # orders needed by the density: (2 - q)/2 for q = 1..6
        mpmath.mp.dps = 40
        orders = [0.5, 0.0, -0.5, -1.0, -1.5, -2.0]
        for omega in orders:
            for x in (1e-3, 0.1, 1.0, 5.0, 30.0, 120.0):
                exact = float(mpmath.besselk(omega, x))
                if exact == 0.0 or not math.isfinite(exact):
                    continue
                assert float(bessel_kv(omega, x)) == pytest.approx(exact, rel=1e-10)

    def test_psd_factor_handles_semidefinite(self):
        sigma = np.array([[1.0, 1.0], [1.0, 1.0]])  # rank one
        f = psd_factor(sigma)
        assert np.allclose(f @ f.T, sigma, atol=1e-12)

"""Tests for the four convolution densities against the quadrature oracle."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from convlmm.convolutions import (
    ConvolutionKind,
    ConvolutionParams,
    check_density,
    convolution_logpdf,
    convolution_pdf,
    ll_pdf,
    ln_pdf,
    nl_pdf,
    nn_pdf,
    numeric_convolution_oracle,
    regression_marginal_pdf,
    sample_convolution,
)
from convlmm.distributions import laplace_pdf, normal_pdf
from convlmm.errors import DomainError

SQRT2 = math.sqrt(2.0)
ALL_KINDS = list(ConvolutionKind)


def component_pdfs(kind, params):
    f1 = ((lambda t: laplace_pdf(t, 0.0, params.sigma1))
          if kind.random_is_laplace else
          (lambda t: normal_pdf(t, 0.0, params.sigma1)))
    f2 = ((lambda t: laplace_pdf(t, 0.0, params.sigma2))
          if kind.error_is_laplace else
          (lambda t: normal_pdf(t, 0.0, params.sigma2)))
    return f1, f2


class TestParams:
    def test_validation(self):
        with pytest.raises(DomainError):
            ConvolutionParams(-0.1, 1.0)
        with pytest.raises(DomainError):
            ConvolutionParams(1.0, 0.0)
        assert ConvolutionParams(0.0, 1.0).variance == 1.0

    def test_kind_parse(self):
        assert ConvolutionKind.parse("LL") is ConvolutionKind.LL
        assert ConvolutionKind.parse(ConvolutionKind.NL) is ConvolutionKind.NL
        with pytest.raises(DomainError):
            ConvolutionKind.parse("xx")


class TestClosedForms:
    def test_nn_values(self):
        p = ConvolutionParams(1 / SQRT2, 1 / SQRT2)
        assert nn_pdf(0.0, p) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-12)
        # degenerate convolution: sigma1 = 0 collapses to the noise density
        p0 = ConvolutionParams(0.0, 1.7)
        for y in (-2.0, 0.0, 0.4):
            assert nn_pdf(y, p0) == pytest.approx(normal_pdf(y, 0.0, 1.7), rel=1e-12)

    def test_nl_symmetry_and_limits(self):
        p = ConvolutionParams(0.8, 1.1)
        for y in np.arange(0, 160) / 16.0:
            assert nl_pdf(y, p) == nl_pdf(-y, p)
        p0 = ConvolutionParams(0.0, 1.1)
        for y in (-1.0, 0.0, 2.5):
            assert nl_pdf(y, p0) == pytest.approx(laplace_pdf(y, 0.0, 1.1), rel=1e-12)

    def test_ln_is_nl_with_swapped_scales(self):
        for y in (-3.1, -0.2, 0.0, 1.4, 6.0):
            for a, b in [(0.5, 1.0), (2.0, 1.0), (1.3, 0.4)]:
                assert ln_pdf(y, ConvolutionParams(a, b)) == pytest.approx(
                    nl_pdf(y, ConvolutionParams(b, a)), rel=1e-12)
        # sigma1 = 0 limit is the pure normal noise density
        p0 = ConvolutionParams(0.0, 0.9)
        assert ln_pdf(0.3, p0) == pytest.approx(normal_pdf(0.3, 0.0, 0.9), rel=1e-12)

    def test_ll_equal_rate_value(self):
        # equal scales: rate s = sqrt(2)/sigma and density s/4 at the origin
        for sigma in (0.5, 1.0, 3.0):
            s = SQRT2 / sigma
            assert ll_pdf(0.0, ConvolutionParams(sigma, sigma)) == pytest.approx(
                s / 4.0, rel=1e-12)

    def test_ll_branch_continuity(self):
        # near the equal-rate point the naive two-branch formula divides by
        # kappa**2 - 1 and cancels catastrophically; the implementation must
        # track a high-precision oracle there and join the equal-rate branch
        # continuously
        import mpmath

        mpmath.mp.dps = 50

        def exact(y, sig1, sig2):
            s1 = mpmath.sqrt(2) / mpmath.mpf(sig1)
            s2 = mpmath.sqrt(2) / mpmath.mpf(sig2)
            a = abs(mpmath.mpf(y))
            if s1 == s2:
                return float((s1 / 4) * (1 + s1 * a) * mpmath.e ** (-s1 * a))
            k = s1 / s2
            return float(k / (2 * k**2 - 2)
                         * (s1 * mpmath.e ** (-s2 * a) - s2 * mpmath.e ** (-s1 * a)))

        for sig2 in (1.0, 1.0 + 1e-7, 1.0 + 1e-12):
            for y in (0.0, 0.3, 1.0, 4.0, 9.0):
                got = float(ll_pdf(y, ConvolutionParams(1.0, sig2)))
                assert got == pytest.approx(exact(y, 1.0, sig2), rel=1e-12)
        # and the two sides of the branch point stay within the true gap
        for y in (0.0, 0.5, 2.0):
            gap = abs(float(ll_pdf(y, ConvolutionParams(1.0, 1.0 + 1e-7)))
                      - float(ll_pdf(y, ConvolutionParams(1.0, 1.0))))
            assert gap < 1e-7

    def test_ll_extreme_tail_logpdf_is_finite(self):
        p = ConvolutionParams(1.0, 2.0)
        val = convolution_logpdf(3000.0, ConvolutionKind.LL, p)
        assert np.isfinite(val)
        assert val < -1000

    def test_nl_far_tail_is_finite(self):
        # phi underflows beyond ~38 sigma; the log-space route must not
        p = ConvolutionParams(1.0, 1.0)
        val = convolution_logpdf(60.0, ConvolutionKind.NL, p)
        assert np.isfinite(val)
        ref = numeric_convolution_oracle(
            lambda t: normal_pdf(t, 0.0, 1.0), lambda t: laplace_pdf(t, 0.0, 1.0),
            60.0, tol=1e-30)
        assert math.exp(val) == pytest.approx(ref, rel=1e-4)


PARAM_SETTINGS = [ConvolutionParams(0.5, 1.0), ConvolutionParams(1.0, 2.0),
                  ConvolutionParams(2.0, 0.5)]


class TestAgainstOracle:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("params", PARAM_SETTINGS)
    def test_matches_numeric_convolution(self, kind, params):
        f1, f2 = component_pdfs(kind, params)
        span = 4.0 * math.sqrt(params.variance)
        for y in np.linspace(-span, span, 25):
            oracle = numeric_convolution_oracle(f1, f2, float(y))
            assert float(convolution_pdf(y, kind, params)) == pytest.approx(
                oracle, abs=1e-6)

    def test_oracle_nn_closed_form(self):
        got = numeric_convolution_oracle(
            lambda t: normal_pdf(t, 0.0, 1.0), lambda t: normal_pdf(t, 0.0, 1.0), 0.0)
        assert got == pytest.approx(normal_pdf(0.0, 0.0, SQRT2), abs=1e-9)

    def test_oracle_against_ll_closed_form(self):
        got = numeric_convolution_oracle(
            lambda t: laplace_pdf(t, 0.0, 1.0), lambda t: laplace_pdf(t, 0.0, 1.0), 0.0)
        assert got == pytest.approx(float(ll_pdf(0.0, ConvolutionParams(1.0, 1.0))),
                                    abs=1e-9)

    def test_oracle_narrow_kernel_recovers_density(self):
        # convolving with a near-delta kernel returns the other density
        f = lambda t: normal_pdf(t, 0.0, 1.0)
        delta = lambda t: normal_pdf(t, 0.0, 1e-3)
        for y in (-1.0, 0.0, 0.7):
            assert numeric_convolution_oracle(f, delta, y) == pytest.approx(
                f(y), abs=1e-6)


class TestDensityProperties:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("s1", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("s2", [0.5, 1.0, 2.0])
    def test_normalization_and_variance(self, kind, s1, s2):
        params = ConvolutionParams(s1, s2)
        norm, var = check_density(kind, params)
        assert norm == pytest.approx(1.0, abs=1e-7)
        assert var == pytest.approx(params.variance, rel=1e-4)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_even_and_unimodal(self, kind):
        params = ConvolutionParams(1.0, 1.5)
        ys = np.arange(0, 128) / 16.0
        vals_pos = convolution_pdf(ys, kind, params)
        vals_neg = convolution_pdf(-ys, kind, params)
        assert np.array_equal(vals_pos, vals_neg)
        assert np.all(np.diff(vals_pos) <= 1e-15)  # decreasing away from the mode

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_log_concavity(self, kind):
        params = ConvolutionParams(1.0, 1.0)
        sd = math.sqrt(params.variance)
        grid = np.linspace(-10 * sd, 10 * sd, 1000)
        logs = convolution_logpdf(grid, kind, params)
        assert np.all(np.diff(logs, 2) <= 1e-12)

    def test_tail_ordering_at_unit_variance(self):
        # equal component scales, total variance one: fatter tails with more
        # Laplace content, so LL >= NL >= NN at |y| = 4
        s = math.sqrt(0.5)
        p = ConvolutionParams(s, s)
        for y in (4.0, -4.0):
            nn = float(nn_pdf(y, p))
            nl = float(nl_pdf(y, p))
            ll = float(ll_pdf(y, p))
            assert ll >= nl >= nn

    def test_nl_between_nn_and_ll_in_the_center(self):
        s = math.sqrt(0.5)
        p = ConvolutionParams(s, s)
        assert float(nn_pdf(0.0, p)) < float(nl_pdf(0.0, p)) < float(ll_pdf(0.0, p))


class TestRegressionMarginal:
    def test_plain_convolution_recovered(self):
        sigma1 = np.eye(2)
        x = np.zeros(2)
        z = np.array([1.0, 0.0])
        beta = np.zeros(2)
        for kind in ALL_KINDS:
            for y in (-1.2, 0.0, 0.8):
                got = regression_marginal_pdf(y, kind, x, z, beta, sigma1, 1.3)
                want = convolution_pdf(y, kind, ConvolutionParams(1.0, 1.3))
                assert got == pytest.approx(float(want), rel=1e-12)

    def test_nn_closed_form(self):
        x = np.array([1.0, 0.5])
        z = np.array([1.0, 2.0])
        beta = np.array([0.3, -1.0])
        sigma1 = np.array([[2.0, 0.5], [0.5, 1.0]])
        sigma2 = 0.8
        psi = math.sqrt(z @ sigma1 @ z + sigma2**2)
        for y in (-2.0, 0.1, 3.0):
            got = regression_marginal_pdf(y, ConvolutionKind.NN, x, z, beta,
                                          sigma1, sigma2)
            assert got == pytest.approx(normal_pdf(y, float(x @ beta), psi), rel=1e-12)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_location_shift(self, kind):
        x = np.array([1.0, 2.0])
        beta = np.array([0.7, -0.4])
        z = np.array([1.0])
        sigma1 = np.array([[1.4]])
        shift = float(x @ beta)
        for y in (-1.0, 0.0, 2.2):
            with_beta = regression_marginal_pdf(y + shift, kind, x, z, beta,
                                                sigma1, 1.1)
            without = regression_marginal_pdf(y, kind, x, z, np.zeros(2),
                                              sigma1, 1.1)
            assert with_beta == pytest.approx(without, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            regression_marginal_pdf(0.0, ConvolutionKind.NN, np.zeros(2),
                                    np.zeros(1), np.zeros(3), np.eye(1), 1.0)
        with pytest.raises(DomainError):
            regression_marginal_pdf(0.0, ConvolutionKind.NN, np.zeros(2),
                                    np.zeros(2), np.zeros(2), np.eye(1), 1.0)


class TestSampler:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_moments(self, kind):
        params = ConvolutionParams(1.0, 2.0)
        rng = np.random.default_rng(101)
        draws = sample_convolution(kind, params, rng, size=1_000_000)
        assert draws.var() == pytest.approx(5.0, rel=0.02)
        assert abs(draws.mean()) < 3 * math.sqrt(5.0 / 1e6)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_ks_against_numeric_cdf(self, kind):
        params = ConvolutionParams(1.0, 1.0)
        rng = np.random.default_rng(55)
        draws = sample_convolution(kind, params, rng, size=100_000)

        grid = np.linspace(-12, 12, 4001)
        pdf_vals = convolution_pdf(grid, kind, params)
        cdf_vals = np.concatenate([[0.0], np.cumsum(
            (pdf_vals[1:] + pdf_vals[:-1]) / 2 * np.diff(grid))])
        cdf_vals /= cdf_vals[-1]

        def cdf(x):
            return np.interp(x, grid, cdf_vals)

        res = stats.kstest(draws, cdf)
        assert res.pvalue > 0.01

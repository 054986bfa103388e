"""Tests for the unrestricted covariance parameterization."""

import numpy as np
import pytest

from convlmm.covariance import (
    CovStructure,
    CovStructureKind,
    sigma1_dot_to_xi,
    sigma1_to_xi,
    xi_to_sigma1,
    xi_to_sigma1_dot,
)
from convlmm.errors import DomainError

ANCHOR_SIGMA1 = np.array([[3.0, 1.0], [1.0, 2.0]])
ANCHOR_XI = np.array([-0.183, 0.215, -0.398])


class TestGeneralStructure:
    def test_anchor_forward(self):
        # printed three-decimal coordinates reproduce Sigma1 to matching accuracy
        got = xi_to_sigma1(ANCHOR_XI, CovStructure.general(2), 2.0)
        assert np.allclose(got, ANCHOR_SIGMA1, atol=0.01)

    def test_anchor_inverse(self):
        xi = sigma1_to_xi(ANCHOR_SIGMA1, CovStructure.general(2), 2.0)
        assert np.allclose(xi, ANCHOR_XI, atol=0.001)

    def test_zero_maps_to_identity(self):
        got = xi_to_sigma1(np.zeros(3), CovStructure.general(2), 1.0)
        assert np.allclose(got, np.eye(2), atol=1e-14)
        got1 = xi_to_sigma1(np.zeros(1), CovStructure.scaled_identity(3), 1.0)
        assert np.allclose(got1, np.eye(3), atol=1e-14)

    def test_totality_random_xi(self):
        rng = np.random.default_rng(0)
        st = CovStructure.general(3)
        for _ in range(1000):
            xi = rng.uniform(-10, 10, size=st.n_params)
            sigma = xi_to_sigma1(xi, st, 1.0)
            evals = np.linalg.eigvalsh(sigma)
            assert np.all(evals > 0)
            assert np.allclose(sigma, sigma.T)

    def test_round_trip_random_spd(self):
        rng = np.random.default_rng(1)
        st = CovStructure.general(3)
        worst = 0.0
        for _ in range(100):
            a = rng.normal(size=(3, 3))
            spd = a @ a.T + 0.05 * np.eye(3)
            xi = sigma1_to_xi(spd, st, 1.3)
            back = xi_to_sigma1(xi, st, 1.3)
            worst = max(worst, float(np.abs(back - spd).max()))
            xi2 = sigma1_to_xi(back, st, 1.3)
            assert np.allclose(xi2, xi, atol=1e-8)
        assert worst < 1e-8 * 100  # relative to typical matrix scale

    def test_round_trip_xi_side(self):
        rng = np.random.default_rng(2)
        st = CovStructure.general(2)
        for _ in range(200):
            xi = rng.uniform(-3, 3, size=3)
            back = sigma1_to_xi(xi_to_sigma1(xi, st, 0.7), st, 0.7)
            assert np.allclose(back, xi, atol=1e-8)

    def test_sigma2_scaling(self):
        # Sigma1 is proportional to sigma2**2 at fixed xi
        xi = np.array([0.4, -0.2, 0.1])
        st = CovStructure.general(2)
        s_one = xi_to_sigma1(xi, st, 1.0)
        for sigma2 in (0.5, 2.0, 7.0):
            assert np.allclose(xi_to_sigma1(xi, st, sigma2), sigma2**2 * s_one,
                               rtol=1e-12)
        assert np.allclose(xi_to_sigma1_dot(xi, st), s_one, rtol=1e-12)

    def test_singular_matrix_rejected(self):
        with pytest.raises(DomainError, match="ridge"):
            sigma1_to_xi(np.array([[1.0, 1.0], [1.0, 1.0]]),
                         CovStructure.general(2), 1.0)


class TestRestrictedStructures:
    def test_scaled_identity_round_trip(self):
        st = CovStructure.scaled_identity(2)
        xi = np.array([0.37])
        sigma = xi_to_sigma1(xi, st, 2.0)
        assert np.allclose(sigma, 4.0 * np.exp(2 * 0.37) * np.eye(2))
        assert np.allclose(sigma1_to_xi(sigma, st, 2.0), xi, atol=1e-12)

    def test_diagonal_round_trip(self):
        st = CovStructure.diagonal(3)
        xi = np.array([0.1, -0.4, 1.2])
        sigma = xi_to_sigma1(xi, st, 1.5)
        assert np.allclose(np.diag(np.diag(sigma)), sigma)
        assert np.allclose(sigma1_to_xi(sigma, st, 1.5), xi, atol=1e-12)

    def test_compound_symmetric_round_trip(self):
        st = CovStructure.compound_symmetric(3)
        for xi in (np.array([0.2, 0.0]), np.array([-0.5, 3.0]), np.array([1.0, -4.0])):
            sigma_dot = xi_to_sigma1_dot(xi, st)
            evals = np.linalg.eigvalsh(sigma_dot)
            assert np.all(evals > 0)
            off = sigma_dot[0, 1]
            assert np.allclose(sigma_dot[~np.eye(3, dtype=bool)], off)
            back = sigma1_dot_to_xi(sigma_dot, st)
            assert np.allclose(back, xi, atol=1e-9)

    def test_compound_symmetric_correlation_range(self):
        # admissible correlation lies in (-1/(q-1), 1)
        st = CovStructure.compound_symmetric(3)
        rho_lo = xi_to_sigma1_dot(np.array([0.0, -40.0]), st)
        rho_hi = xi_to_sigma1_dot(np.array([0.0, 40.0]), st)
        assert rho_lo[0, 1] / rho_lo[0, 0] == pytest.approx(-0.5, abs=1e-6)
        assert rho_hi[0, 1] / rho_hi[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert np.all(np.linalg.eigvalsh(rho_lo) > 0)

    def test_structure_mismatch_rejected(self):
        with pytest.raises(DomainError, match="not representable"):
            sigma1_to_xi(np.array([[1.0, 0.2], [0.2, 1.0]]),
                         CovStructure.diagonal(2), 1.0)
        with pytest.raises(DomainError, match="not representable"):
            sigma1_to_xi(np.diag([1.0, 2.0]), CovStructure.scaled_identity(2), 1.0)
        with pytest.raises(DomainError, match="not representable"):
            sigma1_to_xi(np.array([[2.0, 0.3, 0.1], [0.3, 2.0, 0.3],
                                   [0.1, 0.3, 2.0]]),
                         CovStructure.compound_symmetric(3), 1.0)


class TestStructureType:
    def test_param_counts(self):
        assert CovStructure.scaled_identity(4).n_params == 1
        assert CovStructure.diagonal(4).n_params == 4
        assert CovStructure.compound_symmetric(4).n_params == 2
        assert CovStructure.general(4).n_params == 10

    def test_parse(self):
        assert CovStructure("compound-symmetric", 2).kind \
            is CovStructureKind.COMPOUND_SYMMETRIC
        with pytest.raises(DomainError):
            CovStructure("fancy", 2)
        with pytest.raises(DomainError):
            CovStructure.compound_symmetric(1)
        with pytest.raises(DomainError):
            CovStructure.general(0)

    def test_xi_length_checked(self):
        with pytest.raises(DomainError):
            xi_to_sigma1(np.zeros(2), CovStructure.general(2), 1.0)

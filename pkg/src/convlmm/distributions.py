"""Normal and Laplace primitives, including the multivariate Laplace law.

Scale convention: ``sigma`` is always a standard deviation, so both the
normal and the Laplace densities parameterised here have variance
``sigma**2``.  The Laplace density is

    f(t) = 1 / (sqrt(2) * sigma) * exp(-sqrt(2) * |t - mu| / sigma),

equivalently an exponential rate of ``sqrt(2) / sigma``.  A Laplace variate
is also a scale mixture of normals: ``mu + sigma * sqrt(E) * Z`` with ``E``
standard exponential and ``Z`` standard normal, which is the representation
used by the samplers and by the EM machinery downstream.

All density evaluations are pure functions.  Samplers mutate only the
generator passed in; concurrent sampling requires independent generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError

SQRT2 = math.sqrt(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _check_sigma(sigma) -> None:
    if not np.all(np.asarray(sigma) > 0):
        raise DomainError(f"sigma must be positive, got {sigma!r}")


def normal_logpdf(t, mu=0.0, sigma=1.0):
    """Log density of the normal distribution with standard deviation ``sigma``."""
    _check_sigma(sigma)
    z = (np.asarray(t, dtype=float) - mu) / sigma
    return -0.5 * z * z - LOG_SQRT_2PI - np.log(sigma)


def normal_pdf(t, mu=0.0, sigma=1.0):
    """Density of the normal distribution with standard deviation ``sigma``."""
    return np.exp(normal_logpdf(t, mu, sigma))


def laplace_logpdf(t, mu=0.0, sigma=1.0):
    """Log density of the Laplace distribution with variance ``sigma**2``."""
    _check_sigma(sigma)
    z = (np.asarray(t, dtype=float) - mu) / sigma
    return -SQRT2 * np.abs(z) - 0.5 * math.log(2.0) - np.log(sigma)


def laplace_pdf(t, mu=0.0, sigma=1.0):
    """Density of the Laplace distribution with variance ``sigma**2``."""
    return np.exp(laplace_logpdf(t, mu, sigma))


def log_mills(t):
    """Log of the Mills ratio, stable for all real ``t``.

    Uses ``log(1 - Phi(t)) = log Phi(-t)`` evaluated through the stable
    ``log_ndtr``, so the result is finite even where the ratio itself
    overflows a double (t below about -38).
    """
    t = np.asarray(t, dtype=float)
    return special.log_ndtr(-t) + 0.5 * t * t + LOG_SQRT_2PI


def mills_ratio(t):
    """Mills ratio ``(1 - Phi(t)) / phi(t)`` of the standard normal.

    Evaluated through the scaled complementary error function, which keeps
    full relative accuracy in the far right tail where the naive quotient
    degenerates to 0/0.  For very negative ``t`` the true value exceeds the
    double range and ``inf`` is returned.
    """
    t = np.asarray(t, dtype=float)
    return math.sqrt(math.pi / 2.0) * special.erfcx(t / SQRT2)


def sample_laplace_scale_mixture(mu, sigma, rng, size=None):
    """Draw Laplace variates as ``mu + sigma * sqrt(E) * Z``.

    ``E`` is standard exponential and ``Z`` standard normal, drawn in that
    order from ``rng``.
    """
    _check_sigma(sigma)
    e = rng.exponential(size=size)
    z = rng.standard_normal(size=size)
    return mu + sigma * np.sqrt(e) * z


@dataclass(frozen=True)
class UnivariateLaplace:
    """Laplace distribution in the standard-deviation convention."""

    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        _check_sigma(self.sigma)

    def pdf(self, t):
        return laplace_pdf(t, self.mu, self.sigma)

    def logpdf(self, t):
        return laplace_logpdf(t, self.mu, self.sigma)

    def sample(self, rng, size=None):
        return sample_laplace_scale_mixture(self.mu, self.sigma, rng, size=size)


def psd_factor(sigma: np.ndarray) -> np.ndarray:
    """Factor F with ``F @ F.T = sigma`` for a symmetric nonnegative-definite matrix.

    Uses the Cholesky factor when the matrix is positive definite and an
    eigenvalue factor (with tiny negative eigenvalues clipped to zero)
    otherwise.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12):
        raise DomainError("covariance matrix must be symmetric")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    evals, evecs = np.linalg.eigh(sigma)
    floor = -1e-10 * max(1.0, float(np.max(np.abs(evals))))
    if np.min(evals) < floor:
        raise DomainError("covariance matrix has a negative eigenvalue")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def mv_laplace_logpdf(t, sigma: np.ndarray) -> float:
    """Log density of the zero-centred multivariate Laplace with parameter ``sigma``.

    The density is ``2 (2 pi)^(-q/2) |S|^(-1/2) (t' S^-1 t / 2)^(w/2) K_w(sqrt(2 t' S^-1 t))``
    with order ``w = (2 - q) / 2``, evaluated through the exponentially scaled
    Bessel function so large arguments do not underflow.  At ``t = 0`` the
    density is singular for ``q >= 2`` and ``+inf`` is returned as the
    boundary value; for ``q = 1`` it reduces to the univariate Laplace.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    q = t.shape[0]
    if sigma.shape != (q, q):
        raise DomainError(f"sigma must be {q}x{q}, got {sigma.shape}")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise DomainError("sigma must be symmetric positive definite") from exc
    half = np.linalg.solve(chol, t)
    quad = float(half @ half)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    if quad == 0.0:
        if q == 1:
            return -0.5 * math.log(2.0) - 0.5 * logdet
        return math.inf
    omega = (2.0 - q) / 2.0
    u = math.sqrt(2.0 * quad)
    # kve(w, u) = K_w(u) * exp(u)
    log_bessel = math.log(float(special.kve(omega, u))) - u
    return (
        math.log(2.0)
        - 0.5 * q * math.log(2.0 * math.pi)
        - 0.5 * logdet
        + 0.5 * omega * math.log(0.5 * quad)
        + log_bessel
    )


def mv_laplace_pdf(t, sigma: np.ndarray) -> float:
    """Density of the zero-centred multivariate Laplace with parameter ``sigma``."""
    logp = mv_laplace_logpdf(t, sigma)
    return math.inf if math.isinf(logp) and logp > 0 else math.exp(logp)


def sample_mv_laplace(sigma: np.ndarray, rng, size=None) -> np.ndarray:
    """Draw from the multivariate Laplace as ``sqrt(W) * V``.

    ``W`` is standard exponential and ``V ~ N(0, sigma)``, drawn in that
    order.  The sample covariance converges to ``sigma``; with a diagonal
    ``sigma`` the coordinates are uncorrelated but not independent because
    they share the single mixing variable ``W``.
    """
    factor = psd_factor(sigma)
    q = factor.shape[0]
    if size is None:
        w = rng.exponential()
        v = factor @ rng.standard_normal(q)
        return math.sqrt(w) * v
    w = rng.exponential(size=size)
    v = rng.standard_normal((size, q)) @ factor.T
    return np.sqrt(w)[:, None] * v


@dataclass(frozen=True)
class MultivariateLaplace:
    """Zero-centred multivariate Laplace with covariance parameter ``sigma``."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        psd_factor(sigma)  # validates symmetry and nonnegative-definiteness
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    def pdf(self, t):
        return mv_laplace_pdf(t, self.sigma)

    def logpdf(self, t):
        return mv_laplace_logpdf(t, self.sigma)

    def sample(self, rng, size=None):
        return sample_mv_laplace(self.sigma, rng, size=size)

"""Closed-form densities of the four normal/Laplace convolutions.

A convolution ``Y = e1 + e2`` combines a random-effect term ``e1`` (scale
``sigma1``) with a noise term ``e2`` (scale ``sigma2``); each term is either
normal (N) or Laplace (L), giving the four kinds NN, NL, LN and LL.  All
four marginal densities are symmetric, unimodal, log-concave, and have
variance ``sigma1**2 + sigma2**2``.

The LL density uses the exponential *rates* ``s_i = sqrt(2) / sigma_i``,
the convention under which the variance identity above holds.  The NL and
LN evaluations run in log space through the stable Mills ratio so that the
density stays finite far into the tails where the separate factors under-
or overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import integrate

from .distributions import (
    SQRT2,
    laplace_logpdf,
    log_mills,
    normal_logpdf,
    sample_laplace_scale_mixture,
)
from .errors import DomainError, NumericError


class ConvolutionKind(Enum):
    """The four cells of the 2x2 scheme; first letter is the random effect."""

    NN = "nn"
    NL = "nl"
    LN = "ln"
    LL = "ll"

    @classmethod
    def parse(cls, value) -> "ConvolutionKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise DomainError(
                f"unknown convolution kind {value!r}; expected one of nn, nl, ln, ll"
            ) from None

    @property
    def random_is_laplace(self) -> bool:
        return self in (ConvolutionKind.LN, ConvolutionKind.LL)

    @property
    def error_is_laplace(self) -> bool:
        return self in (ConvolutionKind.NL, ConvolutionKind.LL)


@dataclass(frozen=True)
class ConvolutionParams:
    """Scales of the two components; ``sigma1`` may be zero (degenerate random effect)."""

    sigma1: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma1 >= 0:
            raise DomainError(f"sigma1 must be nonnegative, got {self.sigma1!r}")
        if not self.sigma2 > 0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2!r}")

    @property
    def variance(self) -> float:
        return self.sigma1**2 + self.sigma2**2


def nn_logpdf(y, params: ConvolutionParams):
    psi = math.sqrt(params.variance)
    return normal_logpdf(y, 0.0, psi)


def nn_pdf(y, params: ConvolutionParams):
    """Normal-normal marginal: a normal with variance ``sigma1**2 + sigma2**2``."""
    return np.exp(nn_logpdf(y, params))


def nl_logpdf(y, params: ConvolutionParams):
    """Log of the normal-Laplace density.

    The density is ``(1 / (sqrt(2) sigma2)) phi(y / sigma1) *
    {R(kappa - y/sigma1) + R(kappa + y/sigma1)}`` with
    ``kappa = sqrt(2) sigma1 / sigma2`` and ``R`` the Mills ratio.  Computed
    as ``log phi + log(R + R)`` because ``phi`` underflows for arguments
    beyond ~38 while the product stays finite.
    """
    s1, s2 = params.sigma1, params.sigma2
    if s1 == 0.0:
        return laplace_logpdf(y, 0.0, s2)
    y = np.asarray(y, dtype=float)
    kappa = SQRT2 * s1 / s2
    u = y / s1
    tail = np.logaddexp(log_mills(kappa - u), log_mills(kappa + u))
    return -0.5 * math.log(2.0) - math.log(s2) + normal_logpdf(u) + tail


def nl_pdf(y, params: ConvolutionParams):
    """Normal-Laplace marginal density (normal random effect, Laplace noise)."""
    return np.exp(nl_logpdf(y, params))


def ln_logpdf(y, params: ConvolutionParams):
    if params.sigma1 == 0.0:
        return normal_logpdf(y, 0.0, params.sigma2)
    return nl_logpdf(y, ConvolutionParams(params.sigma2, params.sigma1))


def ln_pdf(y, params: ConvolutionParams):
    """Laplace-normal marginal: the NL density with the two scales swapped."""
    return np.exp(ln_logpdf(y, params))


def ll_logpdf(y, params: ConvolutionParams):
    """Log of the Laplace-Laplace density.

    With rates ``s_i = sqrt(2) / sigma_i`` the density is
    ``s1 s2 / (2 (s1 + s2)) * exp(-s_lo |y|) * (1 + s_lo * t)`` where
    ``t = (1 - exp(-(s_hi - s_lo) |y|)) / (s_hi - s_lo)``, which collapses to
    the equal-rate form ``(s/4)(1 + s|y|) exp(-s|y|)`` as the rates meet.
    Evaluating ``t`` through ``expm1`` keeps the two branches continuous to
    machine precision, with no cancellation near equal rates.
    """
    s1, s2 = params.sigma1, params.sigma2
    if s1 == 0.0:
        return laplace_logpdf(y, 0.0, s2)
    r1 = SQRT2 / s1
    r2 = SQRT2 / s2
    r_lo, r_hi = min(r1, r2), max(r1, r2)
    delta = r_hi - r_lo
    a = np.abs(np.asarray(y, dtype=float))
    if delta == 0.0:
        t = a
    else:
        t = -np.expm1(-delta * a) / delta
    return (
        math.log(r1 * r2)
        - math.log(2.0 * (r1 + r2))
        - r_lo * a
        + np.log1p(r_lo * t)
    )


def ll_pdf(y, params: ConvolutionParams):
    """Laplace-Laplace marginal density."""
    return np.exp(ll_logpdf(y, params))


_LOGPDFS = {
    ConvolutionKind.NN: nn_logpdf,
    ConvolutionKind.NL: nl_logpdf,
    ConvolutionKind.LN: ln_logpdf,
    ConvolutionKind.LL: ll_logpdf,
}


def convolution_logpdf(y, kind: ConvolutionKind, params: ConvolutionParams):
    return _LOGPDFS[ConvolutionKind.parse(kind)](y, params)


def convolution_pdf(y, kind: ConvolutionKind, params: ConvolutionParams):
    """Dispatch to the marginal density of the requested convolution kind."""
    return np.exp(convolution_logpdf(y, kind, params))


def regression_marginal_logpdf(y, kind, x, z, beta, sigma1_mat, sigma2):
    """Log marginal density of one observation of the regression model.

    The location is ``x @ beta`` and the random-effect scale is
    ``sqrt(z' Sigma1 z)``; for Laplace random effects this relies on linear
    combinations of the multivariate Laplace being univariate Laplace.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    sigma1_mat = np.asarray(sigma1_mat, dtype=float)
    if x.shape != beta.shape:
        raise DomainError(f"x has shape {x.shape} but beta has shape {beta.shape}")
    if sigma1_mat.shape != (z.shape[0], z.shape[0]):
        raise DomainError(
            f"Sigma1 has shape {sigma1_mat.shape}, expected {(z.shape[0], z.shape[0])}"
        )
    quad = float(z @ sigma1_mat @ z)
    sigma1 = math.sqrt(max(quad, 0.0))
    params = ConvolutionParams(sigma1, float(sigma2))
    resid = np.asarray(y, dtype=float) - float(x @ beta)
    return convolution_logpdf(resid, kind, params)


def regression_marginal_pdf(y, kind, x, z, beta, sigma1_mat, sigma2):
    """Marginal density of one observation of the regression model."""
    return np.exp(regression_marginal_logpdf(y, kind, x, z, beta, sigma1_mat, sigma2))


def numeric_convolution_oracle(f, g, y, kinks=(0.0,), tol=1e-9):
    """Brute-force convolution density by adaptive quadrature (test oracle).

    Integrates ``f(y - u) g(u)`` over the real line, splitting at the
    non-smooth points of either factor (``u = k`` and ``u = y - k`` for each
    kink ``k``, e.g. the origin of a Laplace density) so the quadrature sees
    smooth integrands only.
    """
    y = float(y)
    breaks = sorted({float(k) for k in kinks} | {y - float(k) for k in kinks})
    edges = [-np.inf, *breaks, np.inf]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, err = integrate.quad(
            lambda u: f(y - u) * g(u), lo, hi, epsabs=tol / len(edges), limit=400
        )
        if not np.isfinite(val) or err > 100 * tol:
            raise NumericError(
                f"convolution quadrature did not converge on ({lo}, {hi}): "
                f"value={val!r}, error estimate={err!r}"
            )
        total += val
    return total


def sample_convolution(kind, params: ConvolutionParams, rng, size=None):
    """Draw from the convolution as the sum of independent component draws.

    The random-effect component is drawn first, then the noise component.
    Laplace components use the scale-mixture representation.
    """
    kind = ConvolutionKind.parse(kind)
    if kind.random_is_laplace and params.sigma1 > 0:
        part1 = sample_laplace_scale_mixture(0.0, params.sigma1, rng, size=size)
    else:
        part1 = params.sigma1 * rng.standard_normal(size=size)
    if kind.error_is_laplace:
        part2 = sample_laplace_scale_mixture(0.0, params.sigma2, rng, size=size)
    else:
        part2 = params.sigma2 * rng.standard_normal(size=size)
    return part1 + part2


def check_density(kind, params: ConvolutionParams, tol=1e-10):
    """Quadrature normalization and variance of a convolution density.

    Returns ``(normalization, variance)``; used by the CLI ``--check`` flag
    and by tests that pin the variance identity.
    """
    kind = ConvolutionKind.parse(kind)

    def pdf(t):
        return float(convolution_pdf(t, kind, params))

    scale = math.sqrt(params.variance)
    cut = 40.0 * scale
    norm = 0.0
    var = 0.0
    for lo, hi in ((-cut, 0.0), (0.0, cut)):
        n, _ = integrate.quad(pdf, lo, hi, epsabs=tol, limit=400)
        v, _ = integrate.quad(lambda t: t * t * pdf(t), lo, hi, epsabs=tol, limit=400)
        norm += n
        var += v
    return norm, var

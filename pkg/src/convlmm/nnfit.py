"""Exact maximum likelihood for the normal-normal mixed model.

The marginal distribution of each cluster is multivariate normal, so the
likelihood is available in closed form.  Given the unrestricted covariance
coordinates ``xi`` the GLS estimate of ``beta`` (and, in estimated-scale
mode, of ``sigma2``) is closed form, leaving a low-dimensional profiled
log-likelihood to optimize over ``xi`` alone.

Besides being the NN fitter in its own right, this module provides the
starting values used by both the quadrature and the EM fitters and the
baseline fits of the simulation study.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize

from .covariance import xi_to_sigma1_dot
from .data import ClusteredData, ModelSpec, ResidualMode, ensure_valid, obs_variances
from .errors import NumericError
from .results import FitResult


def _gls_pieces(data: ClusteredData, spec: ModelSpec, sigma1_dot: np.ndarray):
    """Accumulate GLS cross-products over clusters at a fixed relative covariance.

    In estimated-scale mode the per-cluster weight matrix is
    ``Psi = Z Sigma1_dot Z' + I``; in known-variance mode it is
    ``Omega = Z Sigma1 Z' + diag(v)`` with ``sigma2 = 1`` so the two cases
    share the same algebra.
    """
    p = data.p
    xtwx = np.zeros((p, p))
    xtwy = np.zeros(p)
    ytwy = 0.0
    logdet = 0.0
    for cluster in data.clusters:
        v = obs_variances(cluster, spec)
        noise = np.eye(cluster.n) if v is None else np.diag(v)
        psi = cluster.Z @ sigma1_dot @ cluster.Z.T + noise
        try:
            chol = np.linalg.cholesky(psi)
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                f"weight matrix not positive definite for cluster {cluster.id!r}"
            ) from exc
        hx = np.linalg.solve(chol, cluster.X)
        hy = np.linalg.solve(chol, cluster.y)
        xtwx += hx.T @ hx
        xtwy += hx.T @ hy
        ytwy += float(hy @ hy)
        logdet += 2.0 * float(np.sum(np.log(np.diag(chol))))
    return xtwx, xtwy, ytwy, logdet


def _profile(data: ClusteredData, spec: ModelSpec, xi: np.ndarray):
    """Profiled log-likelihood and the implied (beta, sigma2) at given xi."""
    sigma1_dot = xi_to_sigma1_dot(xi, spec.cov_structure)
    xtwx, xtwy, ytwy, logdet = _gls_pieces(data, spec, sigma1_dot)
    beta = np.linalg.solve(xtwx, xtwy)
    rss = max(ytwy - float(xtwy @ beta), 0.0)
    n_total = data.N
    if spec.residual_mode is ResidualMode.ESTIMATED_SCALE:
        sigma2_sq = rss / n_total
        if sigma2_sq <= 0:
            return -math.inf, beta, 1e-12, xtwx
        loglik = -0.5 * (
            n_total * math.log(2.0 * math.pi)
            + n_total * math.log(sigma2_sq)
            + logdet
            + n_total
        )
        return loglik, beta, math.sqrt(sigma2_sq), xtwx
    loglik = -0.5 * (n_total * math.log(2.0 * math.pi) + logdet + rss)
    return loglik, beta, 1.0, xtwx


def fit_nn(data: ClusteredData, spec: ModelSpec, start_xi=None,
           maxiter: int = 2000) -> FitResult:
    """Fit the normal-normal mixed model by exact maximum likelihood.

    Uses ``spec.cov_structure`` and ``spec.residual_mode``; the convolution
    kind in ``spec`` is ignored, so any model spec can be handed in to get
    normal-theory starting values.
    """
    ensure_valid(data, spec)
    m = spec.cov_structure.n_params
    x0 = np.zeros(m) if start_xi is None else np.asarray(start_xi, dtype=float)

    def neg_profile(xi):
        if not np.all(np.isfinite(xi)):
            return math.inf
        try:
            value = _profile(data, spec, xi)[0]
        except NumericError:
            return math.inf
        return -value if np.isfinite(value) else math.inf

    res = minimize(neg_profile, x0, method="Nelder-Mead",
                   options={"maxiter": maxiter, "xatol": 1e-8, "fatol": 1e-10,
                            "adaptive": True})
    polish = minimize(neg_profile, res.x, method="BFGS",
                      options={"gtol": 1e-8, "maxiter": 200})
    best = polish if polish.fun <= res.fun else res
    converged = bool(res.success or polish.success)

    xi = np.asarray(best.x, dtype=float)
    loglik, beta, sigma2, xtwx = _profile(data, spec, xi)
    sigma1 = sigma2**2 * xi_to_sigma1_dot(xi, spec.cov_structure)
    cov_beta = sigma2**2 * np.linalg.inv(xtwx)
    return FitResult(
        beta=beta,
        sigma1=sigma1,
        sigma2=sigma2,
        xi=xi,
        loglik=loglik,
        converged=converged,
        iterations=int(res.nit + polish.nit),
        method="nn_ml",
        se_beta=np.sqrt(np.diag(cov_beta)),
        metadata={"optimizer": "nelder-mead+bfgs"},
    )

"""Numerically integrated likelihood and its direct maximizer.

The marginal likelihood of each cluster integrates the conditional error
density over the random effect.  Normal random effects are handled with a
tensor-product Gauss-Hermite rule after whitening ``Sigma1`` by its
Cholesky factor.  Laplace random effects use their scale-mixture form
``sqrt(W) V``: one Gauss-Laguerre dimension integrates the exponential
mixing variable ``W`` and the Gauss-Hermite tensor handles the normal
``V``.  All cluster sums are accumulated through log-sum-exp.

Default node counts: 25 per dimension for q <= 2, 11 for q in {3, 4},
7 beyond that (chosen by self-convergence of the integrated log-likelihood;
fitted log-likelihoods are reported at this default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.laguerre import laggauss
from scipy.optimize import minimize
from scipy.special import logsumexp

from .covariance import CovStructureKind, xi_to_sigma1
from .convolutions import ConvolutionKind
from .data import ClusteredData, ModelSpec, ResidualMode, ensure_valid, obs_variances
from .distributions import laplace_logpdf, normal_logpdf, psd_factor
from .errors import ConvergenceError, DomainError, UnsupportedStructureError
from .results import BootstrapResult, FitResult


def default_node_count(q: int) -> int:
    if q <= 2:
        return 25
    if q <= 4:
        return 11
    return 7


def gauss_hermite_nodes(n_nodes: int):
    """Probabilists' Gauss-Hermite rule: ``int f(v) phi(v) dv ~= sum w_k f(v_k)``.

    Weights sum to one; a rule with K nodes integrates polynomials up to
    degree 2K - 1 exactly against the standard normal kernel.
    """
    if n_nodes < 1:
        raise DomainError("need at least one quadrature node")
    if n_nodes > 300:
        # the weight recurrence overflows beyond this
        raise DomainError("Gauss-Hermite rules above 300 nodes are not supported")
    nodes, weights = hermegauss(n_nodes)
    return nodes, weights / math.sqrt(2.0 * math.pi)


def gauss_laguerre_nodes(n_nodes: int):
    """Gauss-Laguerre rule: ``int_0^inf f(u) exp(-u) du ~= sum w_k f(u_k)``."""
    if n_nodes < 1:
        raise DomainError("need at least one quadrature node")
    return laggauss(n_nodes)


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product quadrature grid over ``ndim`` dimensions."""

    kind: str                 # "gauss_hermite" or "gauss_laguerre"
    n_nodes: int              # nodes per dimension
    ndim: int
    nodes: np.ndarray         # (n_nodes**ndim, ndim)
    weights: np.ndarray       # (n_nodes**ndim,)

    @classmethod
    def build(cls, kind: str, n_nodes: int, ndim: int) -> "QuadratureGrid":
        if kind == "gauss_hermite":
            nodes1, weights1 = gauss_hermite_nodes(n_nodes)
        elif kind == "gauss_laguerre":
            nodes1, weights1 = gauss_laguerre_nodes(n_nodes)
        else:
            raise DomainError(f"unknown quadrature kind {kind!r}")
        if ndim < 1:
            raise DomainError("grid dimension must be >= 1")
        grids = np.meshgrid(*([nodes1] * ndim), indexing="ij")
        nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
        wgrids = np.meshgrid(*([weights1] * ndim), indexing="ij")
        weights = np.ones(nodes.shape[0])
        for w in wgrids:
            weights = weights * w.reshape(-1)
        return cls(kind=kind, n_nodes=n_nodes, ndim=ndim, nodes=nodes, weights=weights)


def _error_logpdf(resid, scale, laplace: bool):
    return laplace_logpdf(resid, 0.0, scale) if laplace else normal_logpdf(resid, 0.0, scale)


def marginal_loglik_quadrature(data: ClusteredData, spec: ModelSpec, beta, sigma1,
                               sigma2: float, n_nodes: int | None = None,
                               error_dist: str | None = None) -> float:
    """Numerically integrated marginal log-likelihood at natural parameters.

    Supports the NL, LN and LL kinds with any SPD ``Sigma1`` (non-diagonal
    matrices are whitened through the Cholesky factor).  ``error_dist``
    overrides the error law implied by the kind; swapping in "normal" lets
    tests check the quadrature machinery against the exact normal likelihood.
    """
    kind = spec.kind
    if kind is ConvolutionKind.NN and error_dist is None:
        raise DomainError("NN has an exact likelihood; use data.nn_loglik")
    beta = np.asarray(beta, dtype=float)
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2!r}")
    q = data.q
    n_nodes = n_nodes or default_node_count(q)
    err_laplace = kind.error_is_laplace if error_dist is None \
        else (str(error_dist).lower() == "laplace")
    factor = psd_factor(np.asarray(sigma1, dtype=float))
    hermite = QuadratureGrid.build("gauss_hermite", n_nodes, q)
    effect_nodes = hermite.nodes @ factor.T          # (T, q)
    log_wh = np.log(hermite.weights)
    if kind.random_is_laplace:
        mix_nodes, mix_weights = gauss_laguerre_nodes(n_nodes)
        sqrt_mix = np.sqrt(mix_nodes)                # (L,)
        log_wl = np.log(mix_weights)

    total = 0.0
    for cluster in data.clusters:
        resid0 = cluster.y - cluster.X @ beta
        offsets = effect_nodes @ cluster.Z.T         # (T, n)
        v = obs_variances(cluster, spec)
        scale = sigma2 if v is None else sigma2 * np.sqrt(v)
        if not kind.random_is_laplace:
            terms = _error_logpdf(resid0[None, :] - offsets, scale, err_laplace)
            total += float(logsumexp(terms.sum(axis=1) + log_wh))
        else:
            resid = resid0[None, None, :] - sqrt_mix[:, None, None] * offsets[None, :, :]
            terms = _error_logpdf(resid, scale, err_laplace).sum(axis=2)
            total += float(logsumexp(terms + log_wh[None, :] + log_wl[:, None]))
    return total


def theta_size(data: ClusteredData, spec: ModelSpec) -> int:
    m = spec.cov_structure.n_params
    extra = 1 if spec.residual_mode is ResidualMode.ESTIMATED_SCALE else 0
    return data.p + m + extra


def unpack_theta(theta, data: ClusteredData, spec: ModelSpec):
    """Split the flat vector (beta, xi, sigma2) into its parts.

    In known-variance mode the noise scale is fixed at one and absent from
    the vector.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (theta_size(data, spec),):
        raise DomainError(
            f"theta has shape {theta.shape}, expected ({theta_size(data, spec)},)"
        )
    p = data.p
    m = spec.cov_structure.n_params
    beta = theta[:p]
    xi = theta[p:p + m]
    if spec.residual_mode is ResidualMode.ESTIMATED_SCALE:
        sigma2 = float(theta[p + m])
    else:
        sigma2 = 1.0
    return beta, xi, sigma2


def pack_theta(beta, xi, sigma2, spec: ModelSpec) -> np.ndarray:
    parts = [np.asarray(beta, dtype=float).ravel(), np.asarray(xi, dtype=float).ravel()]
    if spec.residual_mode is ResidualMode.ESTIMATED_SCALE:
        parts.append(np.array([float(sigma2)]))
    return np.concatenate(parts)


def integrated_loglik(theta, data: ClusteredData, spec: ModelSpec,
                      n_nodes: int | None = None,
                      error_dist: str | None = None) -> float:
    """Integrated log-likelihood at the flat parameter vector (beta, xi, sigma2)."""
    if spec.kind not in (ConvolutionKind.NL, ConvolutionKind.LN, ConvolutionKind.LL):
        raise DomainError(f"integrated likelihood is for NL/LN/LL, not {spec.kind}")
    beta, xi, sigma2 = unpack_theta(theta, data, spec)
    sigma1 = xi_to_sigma1(xi, spec.cov_structure, sigma2)
    return marginal_loglik_quadrature(
        data, spec, beta, sigma1, sigma2, n_nodes=n_nodes, error_dist=error_dist
    )


_QUADRATURE_KINDS = (ConvolutionKind.NL, ConvolutionKind.LL)
_LL_STRUCTURES = (CovStructureKind.SCALED_IDENTITY, CovStructureKind.DIAGONAL)


def fit_quadrature_ml(data: ClusteredData, spec: ModelSpec,
                      n_nodes: int | None = None, seed: int = 0,
                      start: FitResult | np.ndarray | None = None,
                      n_restarts: int = 2, maxiter: int = 4000) -> FitResult:
    """Maximize the integrated log-likelihood directly.

    Covers NL models with any covariance structure and LL models with
    uncorrelated random effects; correlated Laplace random effects need the
    EM fitter.  Optimization runs a Nelder-Mead simplex from normal-model
    starting values plus ``n_restarts`` perturbed restarts and finishes with
    a quasi-Newton polish; the noise scale is optimized on the log scale so
    the estimate is positive by construction.
    """
    ensure_valid(data, spec)
    if spec.kind not in _QUADRATURE_KINDS:
        raise UnsupportedStructureError(
            f"the quadrature fitter covers NL and LL models, not {spec.kind.value}; "
            "use fit_mcem"
        )
    if spec.kind is ConvolutionKind.LL and spec.cov_structure.kind not in _LL_STRUCTURES:
        raise UnsupportedStructureError(
            "LL with correlated random effects is outside the quadrature fitter; "
            "use fit_mcem, which handles any SPD covariance structure"
        )
    n_nodes = n_nodes or default_node_count(data.q)
    estimated = spec.residual_mode is ResidualMode.ESTIMATED_SCALE

    if start is None:
        from .nnfit import fit_nn  # deferred: nnfit imports FitResult helpers

        nn_spec = dc_replace(spec, kind=ConvolutionKind.NN)
        start_fit = fit_nn(data, nn_spec)
        theta0 = pack_theta(start_fit.beta, start_fit.xi, start_fit.sigma2, spec)
    elif isinstance(start, FitResult):
        theta0 = pack_theta(start.beta, start.xi, start.sigma2, spec)
    else:
        theta0 = np.asarray(start, dtype=float)

    p = data.p
    m = spec.cov_structure.n_params

    def to_internal(theta):
        x = np.array(theta, dtype=float)
        if estimated:
            x[p + m] = math.log(x[p + m])
        return x

    def to_natural(x):
        theta = np.array(x, dtype=float)
        if estimated:
            theta[p + m] = math.exp(min(theta[p + m], 50.0))
        return theta

    def negloglik(x):
        if not np.all(np.isfinite(x)):
            return math.inf
        try:
            value = integrated_loglik(to_natural(x), data, spec, n_nodes=n_nodes)
        except (FloatingPointError, np.linalg.LinAlgError):
            return math.inf
        return -value if np.isfinite(value) else math.inf

    x0 = to_internal(theta0)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2024]))
    starts = [x0]
    for _ in range(n_restarts):
        starts.append(x0 + 0.25 * rng.standard_normal(x0.shape))

    best_x, best_val, best_ok = None, math.inf, False
    for start_x in starts:
        res = minimize(negloglik, start_x, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-6, "fatol": 1e-9,
                                "adaptive": True})
        if res.fun < best_val:
            best_x, best_val, best_ok = res.x, res.fun, bool(res.success)
    polish = minimize(negloglik, best_x, method="BFGS",
                      options={"gtol": 1e-6, "maxiter": 200})
    if polish.fun <= best_val:
        best_x, best_val = polish.x, polish.fun
        best_ok = best_ok or bool(polish.success)

    theta_hat = to_natural(best_x)
    beta, xi, sigma2 = unpack_theta(theta_hat, data, spec)
    sigma1 = xi_to_sigma1(xi, spec.cov_structure, sigma2)
    loglik = marginal_loglik_quadrature(data, spec, beta, sigma1, sigma2)
    return FitResult(
        beta=beta, sigma1=sigma1, sigma2=sigma2, xi=np.asarray(xi), loglik=loglik,
        converged=best_ok, iterations=int(polish.nit) if polish.nit else 0,
        method="quadrature_ml",
        metadata={
            "n_nodes": n_nodes,
            "n_restarts": n_restarts,
            "seed": int(seed),
            "objective_loglik": -best_val,
            "optimizer": "nelder-mead+bfgs",
        },
    )


def block_bootstrap_se(data: ClusteredData, spec: ModelSpec, fit_fn, n_boot: int = 200,
                       seed: int = 0, max_dropped_frac: float = 0.2) -> BootstrapResult:
    """Cluster (block) bootstrap standard errors.

    Whole clusters are resampled with replacement ``n_boot`` times from the
    list of clusters sorted by id (so the result is invariant to input
    order), ``fit_fn`` refits each resample, and the standard deviation of
    the estimates is returned.  Non-convergent replicates are dropped and
    counted; more than ``max_dropped_frac`` dropped is an error.
    """
    if n_boot < 2:
        raise DomainError("need at least two bootstrap replicates")
    canonical = sorted(data.clusters, key=lambda c: c.id)
    m = len(canonical)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 77]))
    thetas = []
    dropped = 0
    for _ in range(n_boot):
        idx = rng.integers(0, m, size=m)
        resampled = tuple(
            dc_replace(canonical[j], id=f"{pos:05d}_{canonical[j].id}")
            for pos, j in enumerate(idx)
        )
        fit = fit_fn(ClusteredData(resampled))
        if fit.converged:
            thetas.append(fit.theta)
        else:
            dropped += 1
    if dropped > max_dropped_frac * n_boot:
        raise ConvergenceError(
            f"{dropped} of {n_boot} bootstrap replicates failed to converge"
        )
    estimates = np.asarray(thetas)
    se = estimates.std(axis=0, ddof=1)
    p = data.p
    mpar = spec.cov_structure.n_params
    return BootstrapResult(
        se_beta=se[:p],
        se_xi=se[p:p + mpar],
        se_sigma2=float(se[p + mpar]) if se.shape[0] > p + mpar else 0.0,
        n_replicates=len(thetas),
        n_dropped=dropped,
        estimates=estimates,
    )


__all__ = [
    "QuadratureGrid",
    "block_bootstrap_se",
    "default_node_count",
    "fit_quadrature_ml",
    "gauss_hermite_nodes",
    "gauss_laguerre_nodes",
    "integrated_loglik",
    "marginal_loglik_quadrature",
    "pack_theta",
    "theta_size",
    "unpack_theta",
]

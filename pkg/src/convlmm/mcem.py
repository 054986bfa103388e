"""Monte Carlo EM estimation of the NL, LN and LL mixed models.

Each Laplace term in the model is written as a normal variate scaled by the
square root of a standard exponential mixing variable ``w``.  Conditional on
the latent ``w`` the cluster response is multivariate normal with covariance
``sigma2**2 * Psi`` where

    NL:  Psi = Z Sdot Z' + diag(w)            (one w per observation)
    LN:  Psi = w * Z Sdot Z' + I              (one w per cluster)
    LL:  Psi = w_1 * Z Sdot Z' + diag(w_2)    (one w per cluster plus one
                                               per observation)

and ``Sdot = Sigma1 / sigma2**2`` is the relative covariance.  The E-step
draws ``w | y`` by component-wise slice sampling on log(w); the M-step
maximizes the Monte Carlo Q-function through closed-form GLS updates of
``beta`` and ``sigma2`` alternated with a numerical update of the
covariance coordinates ``xi``.

In known-variance mode the per-observation noise variances enter the
diagonal part of ``Psi``, ``sigma2`` is fixed at one, and only ``beta`` and
``xi`` are estimated.

Randomness is fully reproducible: the chain of cluster ``i`` at EM
iteration ``t`` draws from a generator seeded by ``(seed, t, i)``, so runs
are bit-identical for a fixed seed and clusters can be sampled in parallel
or in any order without changing the result.
"""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .convolutions import ConvolutionKind
from .covariance import xi_to_sigma1_dot
from .data import ClusteredData, Cluster, ModelSpec, ResidualMode, ensure_valid, obs_variances
from .errors import DomainError, NumericError
from .results import FitResult

_MAX_STEP_OUT = 60
_MAX_SHRINK = 500


def latent_dim(kind: ConvolutionKind, n: int) -> int:
    """Number of latent exponential mixing variables for one cluster of size n."""
    kind = ConvolutionKind.parse(kind)
    if kind is ConvolutionKind.NL:
        return n
    if kind is ConvolutionKind.LN:
        return 1
    if kind is ConvolutionKind.LL:
        return 1 + n
    raise DomainError("the NN model has no latent mixing variables")


def _latent_parts(kind: ConvolutionKind, w: np.ndarray, n: int, obs_var):
    """Split one latent vector into the A-multiplier c and the diagonal of D."""
    v = np.ones(n) if obs_var is None else np.asarray(obs_var, dtype=float)
    if kind is ConvolutionKind.NL:
        return 1.0, w * v
    if kind is ConvolutionKind.LN:
        return float(w[0]), v
    return float(w[0]), w[1:] * v


def build_psi(kind, w, Z, sigma1_dot, obs_var=None) -> np.ndarray:
    """Conditional weight matrix ``Psi`` for one cluster and one latent draw.

    SPD for any positive ``w`` and nonnegative-definite ``sigma1_dot``.
    """
    kind = ConvolutionKind.parse(kind)
    Z = np.asarray(Z, dtype=float)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    n = Z.shape[0]
    if w.shape[0] != latent_dim(kind, n):
        raise DomainError(
            f"latent vector has length {w.shape[0]}, expected {latent_dim(kind, n)} "
            f"for {kind.value} with n={n}"
        )
    if np.any(w <= 0):
        raise DomainError("latent mixing variables must be positive")
    c, dvec = _latent_parts(kind, w, n, obs_var)
    psi = c * (Z @ np.asarray(sigma1_dot, dtype=float) @ Z.T)
    psi[np.diag_indices(n)] += dvec
    return psi


def build_omega(kind, w, Z, sigma1_dot, sigma2, obs_var=None) -> np.ndarray:
    """Conditional covariance ``Omega = sigma2**2 * Psi``."""
    return float(sigma2) ** 2 * build_psi(kind, w, Z, sigma1_dot, obs_var=obs_var)


def complete_loglik(beta, sigma1_dot, sigma2, cluster: Cluster, w, kind,
                    obs_var=None) -> float:
    """Complete-data log-likelihood of one cluster given its latent draw.

    Normal log density of ``y | w`` plus the standard-exponential log prior
    of ``w`` (the prior term is constant in the model parameters).
    """
    kind = ConvolutionKind.parse(kind)
    psi = build_psi(kind, w, cluster.Z, sigma1_dot, obs_var=obs_var)
    try:
        chol = np.linalg.cholesky(psi)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"Psi not positive definite for cluster {cluster.id!r} at w={w!r}"
        ) from exc
    resid = cluster.y - cluster.X @ np.asarray(beta, dtype=float)
    half = np.linalg.solve(chol, resid)
    n = cluster.n
    return (
        -0.5 * n * math.log(2.0 * math.pi)
        - 0.5 * n * math.log(sigma2**2)
        - float(np.sum(np.log(np.diag(chol))))
        - 0.5 * float(half @ half) / sigma2**2
        - float(np.sum(np.atleast_1d(w)))
    )


def q_function(draws, data: ClusteredData, spec: ModelSpec, beta, xi, sigma2) -> float:
    """Monte Carlo Q-function: draws averaged over the complete log-likelihood.

    Reference implementation by direct summation; the M-step uses an
    algebraically identical factored form.
    """
    sigma1_dot = xi_to_sigma1_dot(xi, spec.cov_structure)
    n_draws = draws[0].shape[0]
    total = 0.0
    for cluster, wmat in zip(data.clusters, draws):
        if wmat.shape[0] != n_draws:
            raise DomainError("all clusters must carry the same number of draws")
        v = obs_variances(cluster, spec)
        for k in range(n_draws):
            total += complete_loglik(beta, sigma1_dot, sigma2, cluster, wmat[k],
                                     spec.kind, obs_var=v)
    return total / n_draws


# ---------------------------------------------------------------------------
# E-step: batched component-wise slice sampling on log(w)
# ---------------------------------------------------------------------------


class _GroupTarget:
    """Unnormalized log posterior of log(w) for a group of equal-size clusters."""

    def __init__(self, kind, resid, Z, sigma1_dot, sigma2, obs_var, prior_only=False):
        self.kind = kind
        self.resid = resid                      # (G, n)
        self.n = resid.shape[1]
        # A = Z Sdot Z', fixed during one E-step
        self.A = np.einsum("gnq,qr,gmr->gnm", Z, sigma1_dot, Z)
        self.sigma2_sq = float(sigma2) ** 2
        self.obs_var = obs_var                  # (G, n) or None
        self.prior_only = prior_only

    def __call__(self, x: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Log target at log-latent matrix ``x`` for the given row indices."""
        w = np.exp(x)
        prior = np.sum(x - w, axis=1)
        if self.prior_only:
            return prior
        n = self.n
        if self.kind is ConvolutionKind.NL:
            c = np.ones(x.shape[0])
            dvec = w
        elif self.kind is ConvolutionKind.LN:
            c = w[:, 0]
            dvec = np.ones((x.shape[0], n))
        else:
            c = w[:, 0]
            dvec = w[:, 1:]
        if self.obs_var is not None:
            dvec = dvec * self.obs_var[rows]
        psi = c[:, None, None] * self.A[rows]
        idx = np.arange(n)
        psi[:, idx, idx] += dvec
        resid = self.resid[rows]
        try:
            chol = np.linalg.cholesky(psi)
        except np.linalg.LinAlgError:
            return self._loglik_rowwise(psi, resid) + prior
        half = np.linalg.solve(chol, resid[:, :, None])[:, :, 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        quad = np.sum(half * half, axis=1)
        loglik = -0.5 * (n * math.log(2.0 * math.pi * self.sigma2_sq)
                         + logdet + quad / self.sigma2_sq)
        return loglik + prior

    def _loglik_rowwise(self, psi, resid):
        out = np.empty(psi.shape[0])
        for g in range(psi.shape[0]):
            try:
                chol = np.linalg.cholesky(psi[g])
            except np.linalg.LinAlgError:
                out[g] = -np.inf
                continue
            half = np.linalg.solve(chol, resid[g])
            out[g] = -0.5 * (self.n * math.log(2.0 * math.pi * self.sigma2_sq)
                             + 2.0 * float(np.sum(np.log(np.diag(chol))))
                             + float(half @ half) / self.sigma2_sq)
        return out


def _uniforms(rngs, rows) -> np.ndarray:
    return np.array([rngs[r].uniform() for r in rows])


def _slice_update_coord(x, f0, j, target, rngs, width):
    """One slice-sampling update of coordinate ``j`` for every chain in lockstep.

    Each chain consumes uniforms only from its own generator, so the result
    is identical to updating the chains one at a time.
    """
    n_chains = x.shape[0]
    all_rows = np.arange(n_chains)
    logy = f0 + np.log(_uniforms(rngs, all_rows))
    u = _uniforms(rngs, all_rows)
    left = x[:, j] - width * u
    right = left + width

    def f_at(values, rows):
        cand = x[rows].copy()
        cand[:, j] = values
        return target(cand, rows)

    # stepping out, left then right
    for bounds, sign in ((left, -1.0), (right, 1.0)):
        active = f_at(bounds, all_rows) > logy
        steps = 0
        while np.any(active) and steps < _MAX_STEP_OUT:
            rows = all_rows[active]
            bounds[rows] += sign * width
            still = f_at(bounds[rows], rows) > logy[rows]
            active[rows] = still
            steps += 1

    # shrinkage
    xnew = x[:, j].copy()
    fnew = f0.copy()
    pending = np.ones(n_chains, dtype=bool)
    for _ in range(_MAX_SHRINK):
        rows = all_rows[pending]
        if rows.size == 0:
            return xnew, fnew
        u = _uniforms(rngs, rows)
        prop = left[rows] + u * (right[rows] - left[rows])
        fprop = f_at(prop, rows)
        accept = fprop >= logy[rows]
        acc_rows = rows[accept]
        xnew[acc_rows] = prop[accept]
        fnew[acc_rows] = fprop[accept]
        pending[acc_rows] = False
        rej_rows = rows[~accept]
        rej_prop = prop[~accept]
        shrink_left = rej_prop < x[rej_rows, j]
        left[rej_rows[shrink_left]] = rej_prop[shrink_left]
        right[rej_rows[~shrink_left]] = rej_prop[~shrink_left]
    raise NumericError("slice sampler interval shrank without acceptance")


def _run_chains(target, x0, n_samples, burnin, thin, rngs, width):
    """Run lockstep chains and return draws of w with shape (G, n_samples, d)."""
    x = np.array(x0, dtype=float)
    n_chains, d = x.shape
    all_rows = np.arange(n_chains)
    f0 = target(x, all_rows)
    bad = ~np.isfinite(f0)
    attempts = 0
    while np.any(bad):
        attempts += 1
        if attempts > 10:
            raise NumericError("could not initialize the latent chains at a point "
                               "of positive posterior density")
        for r in all_rows[bad]:
            x[r] = np.log(rngs[r].exponential(size=d))
        f0[bad] = target(x[bad], all_rows[bad])
        bad = ~np.isfinite(f0)
    draws = np.empty((n_chains, n_samples, d))
    kept = 0
    total_sweeps = burnin + n_samples * thin
    for sweep in range(total_sweeps):
        for j in range(d):
            xj, f0 = _slice_update_coord(x, f0, j, target, rngs, width)
            x[:, j] = xj
        if sweep >= burnin and (sweep - burnin) % thin == 0:
            draws[:, kept, :] = np.exp(x)
            kept += 1
    return draws


def sample_w_conditional(cluster: Cluster, beta, sigma1_dot, sigma2, kind,
                         n_samples: int, rng, burnin: int = 10, thin: int = 1,
                         init_w=None, width: float = 1.0, prior_only: bool = False,
                         obs_var=None) -> np.ndarray:
    """Draw ``n_samples`` latent vectors from ``w | y`` for one cluster.

    Slice sampling on the log-latent coordinates targeting the unnormalized
    density g(y | w) h(w); deterministic given ``rng``.  ``prior_only``
    removes the likelihood term (sampling the standard-exponential prior),
    which tests use to validate the sampler.
    """
    kind = ConvolutionKind.parse(kind)
    if n_samples < 1:
        raise DomainError("need at least one draw")
    d = latent_dim(kind, cluster.n)
    resid = (cluster.y - cluster.X @ np.asarray(beta, dtype=float))[None, :]
    z = cluster.Z[None, :, :]
    ov = None if obs_var is None else np.asarray(obs_var, dtype=float)[None, :]
    target = _GroupTarget(kind, resid, z, np.asarray(sigma1_dot, dtype=float),
                          sigma2, ov, prior_only=prior_only)
    x0 = np.zeros((1, d)) if init_w is None else np.log(np.asarray(init_w, dtype=float))[None, :]
    draws = _run_chains(target, x0, n_samples, burnin, thin, [rng], width)
    return draws[0]


# ---------------------------------------------------------------------------
# M-step: factored cross-products and GLS updates
# ---------------------------------------------------------------------------


class _MStepData:
    """Per-draw cross-products that do not depend on the parameters.

    For every (cluster, draw) pair, with D the diagonal part of Psi, stores
    Z'D^-1 Z, Z'D^-1 X, Z'D^-1 y, X'D^-1 X, X'D^-1 y, y'D^-1 y and log|D|.
    Everything the GLS and the Q-function need is then a q-dimensional
    Woodbury assembly per candidate Sigma1_dot.
    """

    def __init__(self, draws, data: ClusteredData, spec: ModelSpec):
        kind = spec.kind
        self.n_draws = draws[0].shape[0]
        self.N = data.N
        self.p = data.p
        self.q = data.q
        blocks = []
        log_h = 0.0
        for cluster, wmat in zip(data.clusters, draws):
            log_h += -float(np.sum(wmat))
            n = cluster.n
            v = obs_variances(cluster, spec)
            if kind is ConvolutionKind.NL:
                c = np.ones(self.n_draws)
                dmat = wmat
            elif kind is ConvolutionKind.LN:
                c = wmat[:, 0]
                dmat = np.ones((self.n_draws, n))
            else:
                c = wmat[:, 0]
                dmat = wmat[:, 1:]
            if v is not None:
                dmat = dmat * v[None, :]
            inv_d = 1.0 / dmat                                    # (K, n)
            Z, X, y = cluster.Z, cluster.X, cluster.y
            blocks.append({
                "c": c,
                "ld": np.sum(np.log(dmat), axis=1),
                "zz": np.einsum("nq,kn,nr->kqr", Z, inv_d, Z),
                "zx": np.einsum("nq,kn,np->kqp", Z, inv_d, X),
                "zy": np.einsum("nq,kn,n->kq", Z, inv_d, y),
                "xx": np.einsum("np,kn,nr->kpr", X, inv_d, X),
                "xy": np.einsum("np,kn,n->kp", X, inv_d, y),
                "yy": np.einsum("kn,n->k", inv_d * y[None, :], y),
            })
        self.c = np.concatenate([b["c"] for b in blocks])
        self.ld = np.concatenate([b["ld"] for b in blocks])
        self.zz = np.concatenate([b["zz"] for b in blocks])
        self.zx = np.concatenate([b["zx"] for b in blocks])
        self.zy = np.concatenate([b["zy"] for b in blocks])
        self.xx = np.concatenate([b["xx"] for b in blocks])
        self.xy = np.concatenate([b["xy"] for b in blocks])
        self.yy = np.concatenate([b["yy"] for b in blocks])
        self.log_h_avg = log_h / self.n_draws

    def assemble(self, sigma1_dot: np.ndarray):
        """Sums of X'Psi^-1 X, X'Psi^-1 y, y'Psi^-1 y and log|Psi| over all draws."""
        try:
            chol_s = np.linalg.cholesky(sigma1_dot)
        except np.linalg.LinAlgError as exc:
            raise NumericError("Sigma1_dot is not positive definite") from exc
        q = self.q
        # chol_s indexed [q, r] contracts as (chol_s.T @ .) below
        tzx = np.einsum("qr,bqp->brp", chol_s, self.zx)
        tzy = np.einsum("qr,bq->br", chol_s, self.zy)
        inner = np.einsum("qr,bqs,st->brt", chol_s, self.zz, chol_s)
        s_mat = np.eye(q)[None, :, :] + self.c[:, None, None] * inner
        chol_batch = np.linalg.cholesky(s_mat)
        ux = np.linalg.solve(chol_batch, tzx)
        uy = np.linalg.solve(chol_batch, tzy[:, :, None])[:, :, 0]
        cw = self.c[:, None, None]
        xx_psi = self.xx - cw * np.einsum("bqp,bqr->bpr", ux, ux)
        xy_psi = self.xy - self.c[:, None] * np.einsum("bqp,bq->bp", ux, uy)
        yy_psi = self.yy - self.c * np.einsum("bq,bq->b", uy, uy)
        logdet = self.ld + 2.0 * np.sum(
            np.log(np.diagonal(chol_batch, axis1=1, axis2=2)), axis=1
        )
        return (xx_psi.sum(axis=0), xy_psi.sum(axis=0),
                float(yy_psi.sum()), float(logdet.sum()))

    def q_value(self, sums, beta, sigma2) -> float:
        sum_xx, sum_xy, sum_yy, sum_logdet = sums
        rss = sum_yy - 2.0 * float(sum_xy @ beta) + float(beta @ sum_xx @ beta)
        k = self.n_draws
        return (
            -0.5 * self.N * math.log(2.0 * math.pi * sigma2**2)
            - 0.5 * sum_logdet / k
            - 0.5 * rss / (k * sigma2**2)
            + self.log_h_avg
        )

    def gls(self, sums, update_sigma2: bool):
        sum_xx, sum_xy, sum_yy, _ = sums
        beta = np.linalg.solve(sum_xx, sum_xy)
        if not update_sigma2:
            return beta, None
        rss = sum_yy - float(sum_xy @ beta)
        sigma2 = math.sqrt(max(rss / (self.N * self.n_draws), 1e-24))
        return beta, sigma2


def m_step(draws, data: ClusteredData, spec: ModelSpec, beta, xi, sigma2,
           inner_max: int = 5, inner_tol: float = 1e-6, xi_maxiter: int = 200):
    """Maximize the Q-function at fixed draws.

    Alternates (a) exact GLS updates of beta and sigma2 at the current
    covariance coordinates with (b) a numerical update of xi at fixed beta
    and sigma2; the two have no simultaneous closed form.  The returned
    parameters never decrease the Q-function relative to the entering ones.
    """
    state = _MStepData(draws, data, spec)
    update_sigma2 = spec.residual_mode is ResidualMode.ESTIMATED_SCALE
    beta = np.asarray(beta, dtype=float)
    xi = np.asarray(xi, dtype=float)
    sigma2 = float(sigma2)

    def sums_at(xi_vec):
        return state.assemble(xi_to_sigma1_dot(xi_vec, spec.cov_structure))

    sums = sums_at(xi)
    q_prev = state.q_value(sums, beta, sigma2)
    for _ in range(inner_max):
        # (a) closed-form GLS at fixed xi
        beta, new_sigma2 = state.gls(sums, update_sigma2)
        if update_sigma2:
            sigma2 = new_sigma2

        # (b) numerical update of xi at fixed beta, sigma2
        def neg_q(xi_vec):
            try:
                return -state.q_value(sums_at(xi_vec), beta, sigma2)
            except NumericError:
                return math.inf

        res = minimize(neg_q, xi, method="Nelder-Mead",
                       options={"maxiter": xi_maxiter, "xatol": 1e-7,
                                "fatol": 1e-10, "adaptive": True})
        if -res.fun >= -neg_q(xi):
            xi = np.asarray(res.x, dtype=float)
        sums = sums_at(xi)
        q_now = state.q_value(sums, beta, sigma2)
        if abs(q_now - q_prev) <= inner_tol * max(1.0, abs(q_prev)):
            q_prev = q_now
            break
        q_prev = q_now
    return beta, xi, sigma2, q_prev, sums


@dataclass
class MCEMConfig:
    """Controls for the EM loop.

    ``mc_samples`` fixes the Monte Carlo size; when None the size grows as
    min(20 t, 500) with the iteration number t.  ``criterion`` stops on the
    relative change of the Q-function ("q_change"), of the parameter vector
    ("param_change"), or of either ("either").
    """

    seed: int = 0
    mc_samples: int | None = None
    k_schedule: Callable[[int], int] | None = None
    max_iter: int = 100
    tol: float = 5e-4
    criterion: str = "either"
    burnin: int = 10
    thin: int = 1
    inner_max: int = 5
    inner_tol: float = 1e-6
    slice_width: float = 1.0
    verbose: bool = False
    loglik_nodes: int | None = None

    def __post_init__(self):
        if self.seed < 0:
            raise DomainError("seed must be a nonnegative integer")
        if self.criterion not in ("q_change", "param_change", "either"):
            raise DomainError(f"unknown convergence criterion {self.criterion!r}")
        if self.tol <= 0:
            raise DomainError("tolerance must be positive")
        if self.max_iter < 1:
            raise DomainError("max_iter must be at least 1")

    def samples_at(self, iteration: int) -> int:
        if self.k_schedule is not None:
            return max(1, int(self.k_schedule(iteration)))
        if self.mc_samples is not None:
            return max(1, int(self.mc_samples))
        return min(20 * iteration, 500)


_MCEM_KINDS = (ConvolutionKind.NL, ConvolutionKind.LN, ConvolutionKind.LL)


def fit_mcem(data: ClusteredData, spec: ModelSpec,
             config: MCEMConfig | None = None) -> FitResult:
    """Fit an NL, LN or LL model by Monte Carlo EM.

    Starts from the exact normal-model fit, alternates slice-sampled
    E-steps with GLS M-steps, and stops when the relative change of the
    Q-function or of the parameters drops below the tolerance.  The
    reported log-likelihood is the numerically integrated marginal
    log-likelihood at the default node count, and the standard errors of
    ``beta`` are the GLS by-product averaged over the final draws.
    """
    if config is None:
        config = MCEMConfig()
    ensure_valid(data, spec)
    if spec.kind not in _MCEM_KINDS:
        raise DomainError("fit_mcem covers the NL, LN and LL models; "
                          "the NN model has an exact fitter (fit_nn)")
    from .nnfit import fit_nn

    t_start = time.perf_counter()
    start = fit_nn(data, spec)
    beta, xi, sigma2 = start.beta, start.xi, start.sigma2
    update_sigma2 = spec.residual_mode is ResidualMode.ESTIMATED_SCALE
    if not update_sigma2:
        sigma2 = 1.0

    # group clusters by size so chains can run in lockstep
    groups: dict[int, list[int]] = {}
    for i, cluster in enumerate(data.clusters):
        groups.setdefault(cluster.n, []).append(i)
    group_arrays = {}
    for n, idxs in groups.items():
        group_arrays[n] = {
            "idx": idxs,
            "Y": np.stack([data.clusters[i].y for i in idxs]),
            "X": np.stack([data.clusters[i].X for i in idxs]),
            "Z": np.stack([data.clusters[i].Z for i in idxs]),
            "v": (np.stack([data.clusters[i].known_var for i in idxs])
                  if data.has_known_var and
                  spec.residual_mode is ResidualMode.KNOWN_VARIANCES else None),
        }

    d_by_cluster = [latent_dim(spec.kind, c.n) for c in data.clusters]
    w_last = [np.ones(d) for d in d_by_cluster]

    q_prev = None
    theta_prev = None
    converged = False
    stop_reason = "max_iter"
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        n_samples = config.samples_at(iteration)
        sigma1_dot = xi_to_sigma1_dot(xi, spec.cov_structure)

        draws: list[np.ndarray | None] = [None] * data.M
        for n, arrays in group_arrays.items():
            idxs = arrays["idx"]
            resid = arrays["Y"] - arrays["X"] @ beta
            target = _GroupTarget(spec.kind, resid, arrays["Z"], sigma1_dot,
                                  sigma2, arrays["v"])
            rngs = [np.random.default_rng(
                np.random.SeedSequence([int(config.seed), iteration, i]))
                for i in idxs]
            x0 = np.log(np.stack([w_last[i] for i in idxs]))
            group_draws = _run_chains(target, x0, n_samples, config.burnin,
                                      config.thin, rngs, config.slice_width)
            for row, i in enumerate(idxs):
                draws[i] = group_draws[row]
                w_last[i] = group_draws[row, -1, :]

        beta, xi, sigma2, q_now, sums = m_step(
            draws, data, spec, beta, xi, sigma2,
            inner_max=config.inner_max, inner_tol=config.inner_tol)

        theta = np.concatenate([beta, xi, [sigma2]])
        if q_prev is not None:
            dq = abs(q_now - q_prev) / max(1.0, abs(q_prev))
            dtheta = float(np.max(np.abs(theta - theta_prev)
                                  / np.maximum(1.0, np.abs(theta_prev))))
            if config.verbose:
                print(f"mcem iter={iteration} K={n_samples} Q={q_now:.6f} "
                      f"dQ={dq:.3e} dtheta={dtheta:.3e} sigma2={sigma2:.6f}",
                      file=sys.stderr)
            hit_q = dq < config.tol
            hit_theta = dtheta < config.tol
            if ((config.criterion == "q_change" and hit_q)
                    or (config.criterion == "param_change" and hit_theta)
                    or (config.criterion == "either" and (hit_q or hit_theta))):
                converged = True
                stop_reason = "q_change" if hit_q else "param_change"
                break
        elif config.verbose:
            print(f"mcem iter={iteration} K={n_samples} Q={q_now:.6f} "
                  f"sigma2={sigma2:.6f}", file=sys.stderr)
        q_prev = q_now
        theta_prev = theta

    sigma1 = sigma2**2 * xi_to_sigma1_dot(xi, spec.cov_structure)
    sum_xx = sums[0]
    cov_beta = sigma2**2 * np.linalg.inv(sum_xx / draws[0].shape[0])
    from .data import loglik_marginal  # deferred: data defers to quadrature

    loglik = loglik_marginal(data, spec, beta, sigma1, sigma2,
                             n_nodes=config.loglik_nodes)
    return FitResult(
        beta=beta,
        sigma1=sigma1,
        sigma2=sigma2,
        xi=xi,
        loglik=loglik,
        converged=converged,
        iterations=iteration,
        method="mcem",
        se_beta=np.sqrt(np.diag(cov_beta)),
        metadata={
            "seed": int(config.seed),
            "stop_reason": stop_reason,
            "final_mc_samples": int(draws[0].shape[0]),
            "q_function": float(q_now),
            "elapsed_seconds": round(time.perf_counter() - t_start, 3),
        },
    )

"""Shared fixtures and small data builders for the test suite."""

import numpy as np
import pytest

from convlmm.convolutions import ConvolutionKind
from convlmm.covariance import CovStructure
from convlmm.data import Cluster, ClusteredData, ModelSpec, ResidualMode
from convlmm.distributions import sample_laplace_scale_mixture, sample_mv_laplace


def make_clustered_data(kind="nn", n_clusters=30, cluster_size=5, q=2,
                        beta=(1.0, 2.0), sigma1=((3.0, 1.0), (1.0, 2.0)),
                        sigma2=2.0, seed=0, known_var=None):
    """Simulate clustered data under any of the four kinds.

    With q=1 the random effect acts on the intercept only; with q=2 on the
    intercept and the covariate (Z = X).  ``known_var`` draws per-observation
    noise variances uniformly from the given (lo, hi) range and scales the
    noise accordingly.
    """
    kind = ConvolutionKind.parse(kind)
    rng = np.random.default_rng(seed)
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=float))[:q, :q]
    factor = np.linalg.cholesky(sigma1)
    beta = np.asarray(beta, dtype=float)
    clusters = []
    for i in range(n_clusters):
        x1 = rng.normal() + rng.normal(size=cluster_size)
        X = np.column_stack([np.ones(cluster_size), x1])
        Z = X[:, :q]
        if kind.random_is_laplace:
            eff = np.sqrt(rng.exponential()) * (factor @ rng.standard_normal(q))
        else:
            eff = factor @ rng.standard_normal(q)
        kv = None
        if known_var is not None:
            kv = rng.uniform(known_var[0], known_var[1], size=cluster_size)
            scales = np.sqrt(kv)
        else:
            scales = np.full(cluster_size, sigma2)
        if kind.error_is_laplace:
            noise = np.array([sample_laplace_scale_mixture(0.0, s, rng) for s in scales])
        else:
            noise = scales * rng.standard_normal(cluster_size)
        y = X @ beta + Z @ eff + noise
        clusters.append(Cluster(id=f"c{i:04d}", y=y, X=X, Z=Z, known_var=kv))
    return ClusteredData(tuple(clusters))


def spec_for(kind, q=2, structure="general", mode=ResidualMode.ESTIMATED_SCALE):
    random_cols = ("intercept", "x1")[:q]
    return ModelSpec(kind, ("intercept", "x1"), random_cols,
                     CovStructure(structure, q), residual_mode=mode)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


__all__ = ["make_clustered_data", "spec_for", "sample_mv_laplace"]

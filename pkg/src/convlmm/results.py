"""Result containers shared by the fitters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass
class FitResult:
    """Maximum-likelihood estimates and diagnostics from one model fit.

    ``xi`` holds the unrestricted coordinates of the relative covariance
    (row-major upper triangle of the log square root for the general
    structure).  ``se_beta`` is None when the fitting method does not
    produce standard errors as a by-product; use the block bootstrap then.
    """

    beta: np.ndarray
    sigma1: np.ndarray
    sigma2: float
    xi: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    method: str
    se_beta: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.sigma1 = np.asarray(self.sigma1, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        if self.se_beta is not None:
            self.se_beta = np.asarray(self.se_beta, dtype=float)
            if np.any(self.se_beta < 0):
                raise DomainError("standard errors must be nonnegative")
        if not self.sigma2 > 0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2!r}")
        if not np.allclose(self.sigma1, self.sigma1.T, rtol=1e-8, atol=1e-10):
            raise DomainError("Sigma1 must be symmetric")

    @property
    def theta(self) -> np.ndarray:
        """Flat parameter vector (beta, xi, sigma2) in the documented order."""
        return np.concatenate([self.beta, self.xi, [self.sigma2]])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "loglik": float(self.loglik),
            "beta": [float(v) for v in self.beta],
            "se_beta": None if self.se_beta is None else [float(v) for v in self.se_beta],
            "sigma1": [[float(v) for v in row] for row in self.sigma1],
            "sigma2": float(self.sigma2),
            "xi": [float(v) for v in self.xi],
            "metadata": dict(self.metadata),
        }


@dataclass
class BootstrapResult:
    """Cluster-bootstrap standard errors for the flat parameter vector."""

    se_beta: np.ndarray
    se_xi: np.ndarray
    se_sigma2: float
    n_replicates: int
    n_dropped: int
    estimates: np.ndarray  # (kept replicates, p + m + 1) theta rows

    def to_dict(self) -> dict:
        return {
            "se_beta": [float(v) for v in self.se_beta],
            "se_xi": [float(v) for v in self.se_xi],
            "se_sigma2": float(self.se_sigma2),
            "n_replicates": int(self.n_replicates),
            "n_dropped": int(self.n_dropped),
        }

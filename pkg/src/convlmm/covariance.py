"""Structured random-effect covariance matrices and their unrestricted coordinates.

The fitters never optimize over covariance matrices directly.  Instead the
*relative* covariance ``Sigma1_dot = Sigma1 / sigma2**2`` is mapped to an
unrestricted real vector ``xi``, so any optimizer step lands on a valid
symmetric positive-definite matrix by construction.

For the general structure, ``xi`` holds the row-major upper triangle
(diagonal included) of the matrix logarithm of the symmetric square root of
``Sigma1_dot``, i.e. ``xi = upper(0.5 * logm(Sigma1_dot))``.  The restricted
structures use per-structure transforms on the same square-root scale: log
standard deviations for scaled-identity and diagonal, and a scaled logit for
the compound-symmetry correlation, whose admissible range is
``(-1/(q-1), 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, logit

from .errors import DomainError

# Relative tolerance used when checking that a matrix actually has the
# pattern a restricted structure requires.
_PATTERN_RTOL = 1e-8


class CovStructureKind(Enum):
    SCALED_IDENTITY = "scaled_identity"
    DIAGONAL = "diagonal"
    COMPOUND_SYMMETRIC = "compound_symmetric"
    GENERAL_SPD = "general"

    @classmethod
    def parse(cls, value) -> "CovStructureKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if member.value == key:
                return member
        raise DomainError(
            f"unknown covariance structure {value!r}; expected one of "
            f"{', '.join(m.value for m in cls)}"
        )


@dataclass(frozen=True)
class CovStructure:
    """A covariance structure together with the random-effect dimension ``q``."""

    kind: CovStructureKind
    q: int

    def __post_init__(self):
        object.__setattr__(self, "kind", CovStructureKind.parse(self.kind))
        if self.q < 1:
            raise DomainError(f"dimension q must be >= 1, got {self.q}")
        if self.kind is CovStructureKind.COMPOUND_SYMMETRIC and self.q < 2:
            raise DomainError("compound symmetry requires q >= 2")

    @property
    def n_params(self) -> int:
        if self.kind is CovStructureKind.SCALED_IDENTITY:
            return 1
        if self.kind is CovStructureKind.DIAGONAL:
            return self.q
        if self.kind is CovStructureKind.COMPOUND_SYMMETRIC:
            return 2
        return self.q * (self.q + 1) // 2

    @classmethod
    def scaled_identity(cls, q: int) -> "CovStructure":
        return cls(CovStructureKind.SCALED_IDENTITY, q)

    @classmethod
    def diagonal(cls, q: int) -> "CovStructure":
        return cls(CovStructureKind.DIAGONAL, q)

    @classmethod
    def compound_symmetric(cls, q: int) -> "CovStructure":
        return cls(CovStructureKind.COMPOUND_SYMMETRIC, q)

    @classmethod
    def general(cls, q: int) -> "CovStructure":
        return cls(CovStructureKind.GENERAL_SPD, q)


def _sym_from_upper(xi: np.ndarray, q: int) -> np.ndarray:
    s = np.zeros((q, q))
    iu = np.triu_indices(q)
    s[iu] = xi
    s.T[iu] = xi
    return s


def _upper_from_sym(s: np.ndarray) -> np.ndarray:
    return s[np.triu_indices(s.shape[0])].copy()


def _check_xi(xi, structure: CovStructure) -> np.ndarray:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (structure.n_params,):
        raise DomainError(
            f"xi must have length {structure.n_params} for {structure.kind.value} "
            f"with q={structure.q}, got shape {xi.shape}"
        )
    return xi


def _cs_rho_bounds(q: int) -> tuple[float, float]:
    return -1.0 / (q - 1), 1.0


def xi_to_sigma1_dot(xi, structure: CovStructure) -> np.ndarray:
    """Map unrestricted coordinates to the relative covariance ``Sigma1 / sigma2**2``.

    Total map: every finite ``xi`` yields a symmetric positive-definite
    matrix.
    """
    xi = _check_xi(xi, structure)
    q = structure.q
    kind = structure.kind
    if kind is CovStructureKind.SCALED_IDENTITY:
        return math.exp(2.0 * xi[0]) * np.eye(q)
    if kind is CovStructureKind.DIAGONAL:
        return np.diag(np.exp(2.0 * xi))
    if kind is CovStructureKind.COMPOUND_SYMMETRIC:
        lo, hi = _cs_rho_bounds(q)
        v = math.exp(2.0 * xi[0])
        rho = lo + (hi - lo) * float(expit(xi[1]))
        return v * ((1.0 - rho) * np.eye(q) + rho * np.ones((q, q)))
    s = _sym_from_upper(xi, q)
    evals, evecs = np.linalg.eigh(s)
    return (evecs * np.exp(2.0 * evals)) @ evecs.T


def xi_to_sigma1(xi, structure: CovStructure, sigma2: float) -> np.ndarray:
    """Map unrestricted coordinates to the random-effect covariance ``Sigma1``."""
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2!r}")
    return sigma2**2 * xi_to_sigma1_dot(xi, structure)


def sigma1_dot_to_xi(sigma1_dot: np.ndarray, structure: CovStructure) -> np.ndarray:
    """Inverse of :func:`xi_to_sigma1_dot` on the representable set."""
    a = np.asarray(sigma1_dot, dtype=float)
    q = structure.q
    if a.shape != (q, q):
        raise DomainError(f"matrix must be {q}x{q}, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=_PATTERN_RTOL, atol=1e-12):
        raise DomainError("matrix must be symmetric")
    kind = structure.kind
    scale = float(np.max(np.abs(a))) or 1.0

    def _require(condition, what):
        if not condition:
            raise DomainError(
                f"matrix is not representable as {structure.kind.value}: {what}"
            )

    if kind is CovStructureKind.SCALED_IDENTITY:
        c = float(np.mean(np.diag(a)))
        _require(np.allclose(a, c * np.eye(q), rtol=_PATTERN_RTOL, atol=_PATTERN_RTOL * scale),
                 "not a multiple of the identity")
        _require(c > 0, "scale is not positive (singular matrix; consider adding a ridge)")
        return np.array([0.5 * math.log(c)])
    if kind is CovStructureKind.DIAGONAL:
        d = np.diag(a).copy()
        _require(np.allclose(a, np.diag(d), rtol=_PATTERN_RTOL, atol=_PATTERN_RTOL * scale),
                 "off-diagonal entries are not zero")
        _require(np.all(d > 0), "a diagonal entry is not positive "
                                "(singular matrix; consider adding a ridge)")
        return 0.5 * np.log(d)
    if kind is CovStructureKind.COMPOUND_SYMMETRIC:
        v = float(np.mean(np.diag(a)))
        off = a[~np.eye(q, dtype=bool)]
        c = float(np.mean(off))
        pattern = v * np.eye(q) + c * (np.ones((q, q)) - np.eye(q))
        _require(np.allclose(a, pattern, rtol=_PATTERN_RTOL, atol=_PATTERN_RTOL * scale),
                 "diagonal or off-diagonal entries are not constant")
        _require(v > 0, "diagonal is not positive")
        rho = c / v
        lo, hi = _cs_rho_bounds(q)
        _require(lo < rho < hi,
                 f"correlation {rho:.6g} outside the open interval ({lo:.6g}, {hi:.6g}) "
                 "(singular matrix; consider adding a ridge)")
        return np.array([0.5 * math.log(v), float(logit((rho - lo) / (hi - lo)))])
    evals, evecs = np.linalg.eigh(a)
    if np.min(evals) <= 0:
        raise DomainError(
            "matrix is singular or indefinite; consider adding a small ridge "
            "before converting to xi"
        )
    s = (evecs * (0.5 * np.log(evals))) @ evecs.T
    return _upper_from_sym(s)


def sigma1_to_xi(sigma1: np.ndarray, structure: CovStructure, sigma2: float) -> np.ndarray:
    """Unrestricted coordinates of a random-effect covariance ``Sigma1``."""
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2!r}")
    return sigma1_dot_to_xi(np.asarray(sigma1, dtype=float) / sigma2**2, structure)

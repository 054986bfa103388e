"""Clustered-data containers, CSV ingestion, and the marginal log-likelihood.

Data layout: M clusters, cluster i holding a response vector ``y_i`` of
length ``n_i`` with design matrices ``X_i`` (fixed effects, n_i x p) and
``Z_i`` (random effects, n_i x q).  In the known-variance (meta-analysis)
mode each observation additionally carries its known sampling variance and
the noise scale ``sigma2`` is fixed at 1 instead of being estimated.

CSV files are long format (one row per observation), UTF-8, with a header
row, '.' decimal separator and no thousands separators.  Intercept columns
are prepended only when the column mapping explicitly asks for them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .convolutions import ConvolutionKind
from .covariance import CovStructure
from .errors import DataError, DomainError, NumericError

INTERCEPT_NAME = "intercept"


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Cluster:
    """One cluster's response and design matrices (immutable after construction)."""

    id: str
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    known_var: np.ndarray | None = None

    def __post_init__(self):
        y = _freeze(np.atleast_1d(self.y))
        X = _freeze(np.atleast_2d(self.X))
        Z = _freeze(np.atleast_2d(self.Z))
        n = y.shape[0]
        if n < 1:
            raise DataError(f"cluster {self.id!r} is empty")
        if X.shape[0] != n or Z.shape[0] != n:
            raise DataError(
                f"cluster {self.id!r}: X has {X.shape[0]} rows and Z has "
                f"{Z.shape[0]}, expected {n}"
            )
        kv = self.known_var
        if kv is not None:
            kv = _freeze(np.atleast_1d(kv))
            if kv.shape[0] != n:
                raise DataError(f"cluster {self.id!r}: known_var length mismatch")
        for name, arr in (("y", y), ("X", X), ("Z", Z), ("known_var", kv)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataError(f"cluster {self.id!r}: non-finite value in {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "known_var", kv)

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class ClusteredData:
    """M clusters with a common fixed-effect and random-effect design width."""

    clusters: tuple[Cluster, ...]

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if len(clusters) < 1:
            raise DataError("need at least one cluster")
        p = clusters[0].X.shape[1]
        q = clusters[0].Z.shape[1]
        has_kv = clusters[0].known_var is not None
        ids = set()
        for c in clusters:
            if c.X.shape[1] != p or c.Z.shape[1] != q:
                raise DataError(
                    f"cluster {c.id!r}: design width differs from the first cluster"
                )
            if (c.known_var is not None) != has_kv:
                raise DataError("known_var must be present for all clusters or none")
            if c.id in ids:
                raise DataError(f"duplicate cluster id {c.id!r}")
            ids.add(c.id)
        object.__setattr__(self, "clusters", clusters)

    @property
    def M(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return self.clusters[0].X.shape[1]

    @property
    def q(self) -> int:
        return self.clusters[0].Z.shape[1]

    @property
    def N(self) -> int:
        return sum(c.n for c in self.clusters)

    @property
    def n_sizes(self) -> tuple[int, ...]:
        return tuple(c.n for c in self.clusters)

    @property
    def has_known_var(self) -> bool:
        return self.clusters[0].known_var is not None

    def cluster_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.clusters)


class ResidualMode(Enum):
    ESTIMATED_SCALE = "estimated_scale"
    KNOWN_VARIANCES = "known_variances"

    @classmethod
    def parse(cls, value) -> "ResidualMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if member.value == key:
                return member
        raise DomainError(f"unknown residual mode {value!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Which convolution to fit, with design-column labels and covariance structure."""

    kind: ConvolutionKind
    fixed_cols: tuple[str, ...]
    random_cols: tuple[str, ...]
    cov_structure: CovStructure
    residual_mode: ResidualMode = ResidualMode.ESTIMATED_SCALE

    def __post_init__(self):
        object.__setattr__(self, "kind", ConvolutionKind.parse(self.kind))
        object.__setattr__(self, "residual_mode", ResidualMode.parse(self.residual_mode))
        object.__setattr__(self, "fixed_cols", tuple(self.fixed_cols))
        object.__setattr__(self, "random_cols", tuple(self.random_cols))
        if len(self.random_cols) != self.cov_structure.q:
            raise DomainError(
                f"cov structure has q={self.cov_structure.q} but "
                f"{len(self.random_cols)} random columns were named"
            )


@dataclass(frozen=True)
class ColumnMapping:
    """Explicit CSV column mapping; intercepts are never added implicitly."""

    cluster: str
    response: str
    fixed: tuple[str, ...] = ()
    random: tuple[str, ...] = ()
    known_var: str | None = None
    fixed_intercept: bool = True
    random_intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))

    @property
    def fixed_names(self) -> tuple[str, ...]:
        base = (INTERCEPT_NAME,) if self.fixed_intercept else ()
        return base + self.fixed

    @property
    def random_names(self) -> tuple[str, ...]:
        base = (INTERCEPT_NAME,) if self.random_intercept else ()
        return base + self.random


def _parse_cell(raw: str, row: int, column: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise DataError(
            f"row {row}, column {column!r}: could not parse {raw!r} as a number"
        ) from None


def load_csv(path, mapping: ColumnMapping) -> ClusteredData:
    """Read a long-format CSV into :class:`ClusteredData`.

    Rows are grouped by the cluster-id column; clusters appear in order of
    first appearance and rows keep their file order within each cluster.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        needed = [mapping.cluster, mapping.response, *mapping.fixed, *mapping.random]
        if mapping.known_var is not None:
            needed.append(mapping.known_var)
        col_index = {}
        for name in needed:
            if name not in header:
                raise DataError(f"{path}: missing column {name!r} (header: {header})")
            col_index[name] = header.index(name)

        order: list[str] = []
        rows: dict[str, list[dict]] = {}
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) < len(header):
                raise DataError(f"{path}: row {lineno} has {len(cells)} cells, "
                                f"expected {len(header)}")
            cid = cells[col_index[mapping.cluster]].strip()
            record = {
                name: _parse_cell(cells[idx], lineno, name)
                for name, idx in col_index.items()
                if name != mapping.cluster
            }
            if cid not in rows:
                order.append(cid)
                rows[cid] = []
            rows[cid].append(record)
    if not order:
        raise DataError(f"{path}: no data rows")

    clusters = []
    for cid in order:
        recs = rows[cid]
        y = np.array([r[mapping.response] for r in recs])
        ones = np.ones((len(recs), 1))
        xcols = [np.array([r[c] for r in recs])[:, None] for c in mapping.fixed]
        zcols = [np.array([r[c] for r in recs])[:, None] for c in mapping.random]
        X = np.hstack(([ones] if mapping.fixed_intercept else []) + xcols) \
            if (mapping.fixed_intercept or xcols) else np.empty((len(recs), 0))
        Z = np.hstack(([ones] if mapping.random_intercept else []) + zcols) \
            if (mapping.random_intercept or zcols) else np.empty((len(recs), 0))
        kv = None
        if mapping.known_var is not None:
            kv = np.array([r[mapping.known_var] for r in recs])
        clusters.append(Cluster(id=cid, y=y, X=X, Z=Z, known_var=kv))
    return ClusteredData(tuple(clusters))


def write_csv(data: ClusteredData, path, mapping: ColumnMapping) -> None:
    """Write data back to the long CSV layout described by ``mapping``.

    Values are written with full round-trip precision, so loading the file
    again reproduces the numeric content bit-exactly.
    """
    fixed_offset = 1 if mapping.fixed_intercept else 0
    random_offset = 1 if mapping.random_intercept else 0
    header = [mapping.cluster, mapping.response, *mapping.fixed]
    extra_random = [c for c in mapping.random if c not in mapping.fixed]
    header += extra_random
    if mapping.known_var is not None:
        header.append(mapping.known_var)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for cluster in data.clusters:
            for j in range(cluster.n):
                row = [cluster.id, repr(float(cluster.y[j]))]
                for k, _ in enumerate(mapping.fixed):
                    row.append(repr(float(cluster.X[j, fixed_offset + k])))
                for name in extra_random:
                    k = mapping.random.index(name)
                    row.append(repr(float(cluster.Z[j, random_offset + k])))
                if mapping.known_var is not None:
                    row.append(repr(float(cluster.known_var[j])))
                writer.writerow(row)


@dataclass
class ValidationReport:
    ok: bool = True
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def fail(self, message: str) -> None:
        self.ok = False
        self.errors.append(message)

    def warn(self, message: str) -> None:
        self.warnings.append(message)


def validate(data: ClusteredData, spec: ModelSpec) -> ValidationReport:
    """Consistency checks for a (data, model) pair; rank failures are hard errors."""
    report = ValidationReport()
    if len(spec.fixed_cols) != data.p:
        report.fail(
            f"model names {len(spec.fixed_cols)} fixed columns but X has width {data.p}"
        )
    if spec.cov_structure.q != data.q:
        report.fail(
            f"covariance structure has q={spec.cov_structure.q} but Z has width {data.q}"
        )
    stacked_x = np.vstack([c.X for c in data.clusters])
    rank = int(np.linalg.matrix_rank(stacked_x))
    if rank < data.p:
        report.fail(
            f"stacked fixed-effect design is rank deficient (rank {rank} < p={data.p}); "
            "remove duplicated or collinear columns"
        )
    if data.q > min(data.n_sizes):
        report.warn(
            f"q={data.q} exceeds the smallest cluster size {min(data.n_sizes)}; "
            "random effects are weakly identified"
        )
    if spec.residual_mode is ResidualMode.KNOWN_VARIANCES:
        if not data.has_known_var:
            report.fail("known-variance mode requires a known-variance column")
        else:
            for c in data.clusters:
                if np.any(c.known_var <= 0):
                    report.fail(f"cluster {c.id!r}: known variances must be positive")
    elif data.has_known_var:
        report.warn("data carries known variances but the model does not use them")
    return report


def ensure_valid(data: ClusteredData, spec: ModelSpec) -> ValidationReport:
    """Run :func:`validate` and raise :class:`DataError` on hard failures."""
    report = validate(data, spec)
    if not report.ok:
        raise DataError("; ".join(report.errors))
    return report


def obs_variances(cluster: Cluster, spec: ModelSpec) -> np.ndarray | None:
    """Per-observation noise variance multipliers, or None in estimated mode."""
    if spec.residual_mode is ResidualMode.KNOWN_VARIANCES:
        return cluster.known_var
    return None


def nn_loglik(data: ClusteredData, spec: ModelSpec, beta, sigma1, sigma2) -> float:
    """Exact marginal normal log-likelihood of the NN model.

    Per cluster the marginal covariance is ``Z Sigma1 Z' + sigma2**2 * V``
    with ``V`` the identity or the diagonal of known variances.
    """
    beta = np.asarray(beta, dtype=float)
    sigma1 = np.asarray(sigma1, dtype=float)
    total = 0.0
    for cluster in data.clusters:
        v = obs_variances(cluster, spec)
        noise = sigma2**2 * (np.eye(cluster.n) if v is None else np.diag(v))
        omega = cluster.Z @ sigma1 @ cluster.Z.T + noise
        try:
            chol = np.linalg.cholesky(omega)
        except np.linalg.LinAlgError as exc:
            raise NumericError(
                f"marginal covariance is not positive definite for cluster {cluster.id!r}"
            ) from exc
        resid = cluster.y - cluster.X @ beta
        half = np.linalg.solve(chol, resid)
        total += -0.5 * (
            cluster.n * math.log(2.0 * math.pi)
            + 2.0 * float(np.sum(np.log(np.diag(chol))))
            + float(half @ half)
        )
    return total


def loglik_marginal(data: ClusteredData, spec: ModelSpec, beta, sigma1, sigma2,
                    n_nodes: int | None = None) -> float:
    """Marginal log-likelihood: exact for NN, numerically integrated otherwise.

    The non-normal kinds are evaluated by the quadrature machinery with the
    default node count (25 per dimension for q <= 2), which is also the
    precision at which fitted log-likelihoods are reported.
    """
    if spec.kind is ConvolutionKind.NN:
        return nn_loglik(data, spec, beta, sigma1, sigma2)
    from . import quadrature  # deferred to avoid an import cycle

    return quadrature.marginal_loglik_quadrature(
        data, spec, beta, sigma1, sigma2, n_nodes=n_nodes
    )

"""Scenario generator and the bias/variance/MSE study harness.

Four data-generating scenarios share the same design: a balanced layout of
M clusters with n repeated measurements, fixed effects beta = (1, 2) on an
intercept and one covariate ``x1 = gamma_i + zeta_ij`` (both standard
normal), random effects on the same two columns with covariance
Sigma1 = [[3, 1], [1, 2]], and noise with scale sigma2 = 2.  Scenario 1
draws both random terms normal (NN), scenario 2 normal effects with Laplace
noise (NL), scenario 3 Laplace effects with normal noise (LN), and scenario
4 both Laplace (LL).

The study fits each replicate with a set of models and reports bias,
variance and MSE of the fixed effects and of the covariance coordinates
``xi``: absolute for the NN baseline and as signed ratios to the NN values
for the other models.  Moments use the population convention so that
MSE = variance + bias**2 holds exactly per cell.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .convolutions import ConvolutionKind
from .covariance import CovStructure, sigma1_to_xi
from .data import Cluster, ClusteredData, ModelSpec
from .distributions import psd_factor, sample_laplace_scale_mixture
from .errors import DomainError
from .mcem import MCEMConfig, fit_mcem
from .nnfit import fit_nn
from .quadrature import fit_quadrature_ml
from .results import FitResult

SCENARIO_KINDS = {
    1: ConvolutionKind.NN,
    2: ConvolutionKind.NL,
    3: ConvolutionKind.LN,
    4: ConvolutionKind.LL,
}

PARAM_NAMES = ("beta0", "beta1", "xi1", "xi2", "xi3")


@dataclass(frozen=True)
class ScenarioSpec:
    """One data-generating scenario; defaults mirror the reference study."""

    scenario: int
    n_clusters: int = 100
    cluster_size: int = 5
    beta: tuple[float, float] = (1.0, 2.0)
    sigma1: tuple[tuple[float, float], ...] = ((3.0, 1.0), (1.0, 2.0))
    sigma2: float = 2.0
    replicates: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIO_KINDS:
            raise DomainError(f"scenario must be 1..4, got {self.scenario}")
        if self.n_clusters < 1 or self.cluster_size < 1 or self.replicates < 1:
            raise DomainError("cluster count, cluster size and replicates must be >= 1")
        if self.seed < 0:
            raise DomainError("seed must be a nonnegative integer")

    @property
    def kind(self) -> ConvolutionKind:
        return SCENARIO_KINDS[self.scenario]

    @property
    def sigma1_matrix(self) -> np.ndarray:
        return np.asarray(self.sigma1, dtype=float)

    @property
    def true_xi(self) -> np.ndarray:
        return sigma1_to_xi(self.sigma1_matrix, CovStructure.general(2), self.sigma2)


def generate_scenario(spec: ScenarioSpec, replicate: int, return_latent: bool = False):
    """Generate one replicate dataset; deterministic in (seed, replicate).

    The stream is derived from the pair, so replicate r is identical whether
    generated alone or inside a batch.  With ``return_latent`` the drawn
    random effects and noise are returned alongside the data (test hook).
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1000 + replicate]))
    kind = spec.kind
    factor = psd_factor(spec.sigma1_matrix)
    beta = np.asarray(spec.beta, dtype=float)
    n = spec.cluster_size
    clusters = []
    effects = np.empty((spec.n_clusters, 2))
    noises = np.empty((spec.n_clusters, n))
    for i in range(spec.n_clusters):
        gamma = rng.normal()
        x1 = gamma + rng.normal(size=n)
        design = np.column_stack([np.ones(n), x1])
        if kind.random_is_laplace:
            eff = math.sqrt(rng.exponential()) * (factor @ rng.standard_normal(2))
        else:
            eff = factor @ rng.standard_normal(2)
        if kind.error_is_laplace:
            noise = sample_laplace_scale_mixture(0.0, spec.sigma2, rng, size=n)
        else:
            noise = spec.sigma2 * rng.standard_normal(n)
        y = design @ beta + design @ eff + noise
        clusters.append(Cluster(id=f"c{i:04d}", y=y, X=design, Z=design))
        effects[i] = eff
        noises[i] = noise
    data = ClusteredData(tuple(clusters))
    if return_latent:
        return data, {"effects": effects, "noise": noises}
    return data


def model_spec_for(kind: ConvolutionKind) -> ModelSpec:
    return ModelSpec(kind, ("intercept", "x1"), ("intercept", "x1"),
                     CovStructure.general(2))


def default_fitters(scenario: int) -> list[tuple[str, str]]:
    """The study layout of the reference tables: every model under scenario 1,
    otherwise the NN baseline plus the scenario-matched model."""
    if scenario == 1:
        return [("nn", "exact"), ("nl", "mcem"), ("ln", "mcem"), ("ll", "mcem")]
    matched = SCENARIO_KINDS[scenario].value
    return [("nn", "exact"), (matched, "mcem")]


def fit_one(data: ClusteredData, kind, backend: str, seed: int,
            mcem_overrides: dict | None = None) -> FitResult:
    """Fit one model to one dataset with the requested backend."""
    kind = ConvolutionKind.parse(kind)
    spec = model_spec_for(kind)
    if kind is ConvolutionKind.NN:
        return fit_nn(data, spec)
    backend = str(backend).lower()
    if backend in ("exact", "nn"):
        raise DomainError(f"backend {backend!r} only applies to the NN model")
    if backend == "quadrature":
        return fit_quadrature_ml(data, spec, seed=seed)
    if backend == "mcem":
        overrides = dict(mcem_overrides or {})
        overrides.setdefault("seed", seed)
        return fit_mcem(data, spec, MCEMConfig(**overrides))
    raise DomainError(f"unknown fitter backend {backend!r}")


@dataclass
class SimCell:
    scenario: int
    model: str
    backend: str
    parameter: str
    bias: float
    variance: float
    mse: float
    relative: bool
    n_converged: int
    n_replicates: int


@dataclass
class SimReport:
    """Aggregated study results plus the replicate-level raw estimates."""

    scenario: int
    true_values: np.ndarray            # (5,) beta0 beta1 xi1 xi2 xi3
    cells: list[SimCell]
    raw: dict[str, np.ndarray]         # model -> (R, 5) estimates, NaN if dropped
    n_replicates: int
    models: list[tuple[str, str]] = field(default_factory=list)

    def cell(self, model: str, parameter: str) -> SimCell:
        for c in self.cells:
            if c.model == model and c.parameter == parameter:
                return c
        raise KeyError((model, parameter))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["scenario", "model", "backend", "parameter", "bias",
                             "variance", "mse", "relative", "n_converged",
                             "n_replicates"])
            for c in self.cells:
                writer.writerow([c.scenario, c.model, c.backend, c.parameter,
                                 repr(c.bias), repr(c.variance), repr(c.mse),
                                 int(c.relative), c.n_converged, c.n_replicates])

    def raw_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["scenario", "model", "replicate", *PARAM_NAMES])
            for model, _ in self.models:
                est = self.raw[model]
                for r in range(est.shape[0]):
                    writer.writerow([self.scenario, model, r,
                                     *[repr(float(v)) for v in est[r]]])

    def format_table(self) -> str:
        """Text table in the layout of the reference study: one block per
        statistic, NN rows absolute (in parentheses), others relative."""
        lines = []
        header = f"{'':<6}" + "".join(f"{p:>12}" for p in PARAM_NAMES)
        for stat in ("bias", "variance", "mse"):
            lines.append(f"Scenario {self.scenario}: {stat} "
                         f"(NN absolute in parentheses, others relative to NN)")
            lines.append(header)
            for model, _ in self.models:
                row = [f"{model.upper():<6}"]
                for param in PARAM_NAMES:
                    c = self.cell(model, param)
                    value = getattr(c, stat)
                    text = f"({value:.4f})" if not c.relative else f"{value:.4f}"
                    row.append(f"{text:>12}")
                lines.append("".join(row))
            lines.append("")
        return "\n".join(lines)


def _study_replicate(args):
    spec, replicate, fitters, mcem_overrides = args
    data = generate_scenario(spec, replicate)
    out = {}
    for model_idx, (kind, backend) in enumerate(fitters):
        fit_seed = int(np.random.SeedSequence(
            [spec.seed, 2000 + replicate, model_idx]).generate_state(1)[0] % (2**31))
        fit = fit_one(data, kind, backend, seed=fit_seed,
                      mcem_overrides=mcem_overrides)
        est = np.concatenate([fit.beta, fit.xi])
        out[kind] = (est, bool(fit.converged))
    return replicate, out


def run_study(spec: ScenarioSpec, fitters: list[tuple[str, str]] | None = None,
              mcem_overrides: dict | None = None, n_jobs: int = 1) -> SimReport:
    """Run the replicate study and aggregate bias/variance/MSE per parameter.

    The first fitter must be the NN baseline so the other models can be
    reported relative to it.  Non-convergent replicates are excluded from
    the moments and counted per model.  Replicates run in parallel when
    ``n_jobs`` > 1; seeds are derived per (replicate, model) so the result
    does not depend on scheduling.
    """
    fitters = fitters or default_fitters(spec.scenario)
    fitters = [(ConvolutionKind.parse(k).value, b) for k, b in fitters]
    if fitters[0][0] != "nn":
        raise DomainError("the first fitter must be the NN baseline")
    if len({k for k, _ in fitters}) != len(fitters):
        raise DomainError("each model may appear only once in the fitter list")

    jobs = [(spec, r, fitters, mcem_overrides) for r in range(spec.replicates)]
    results = {}
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for replicate, out in pool.map(_study_replicate, jobs):
                results[replicate] = out
    else:
        for job in jobs:
            replicate, out = _study_replicate(job)
            results[replicate] = out

    truth = np.concatenate([np.asarray(spec.beta, dtype=float), spec.true_xi])
    raw = {}
    converged_mask = {}
    for kind, _ in fitters:
        est = np.full((spec.replicates, len(PARAM_NAMES)), np.nan)
        ok = np.zeros(spec.replicates, dtype=bool)
        for r in range(spec.replicates):
            vec, conv = results[r][kind]
            est[r] = vec
            ok[r] = conv
        raw[kind] = est
        converged_mask[kind] = ok

    def moments(kind):
        est = raw[kind][converged_mask[kind]]
        bias = est.mean(axis=0) - truth
        var = est.var(axis=0)                      # population variance
        mse = np.mean((est - truth) ** 2, axis=0)
        return bias, var, mse, est.shape[0]

    nn_bias, nn_var, nn_mse, nn_count = moments("nn")
    cells = []
    for kind, backend in fitters:
        bias, var, mse, count = moments(kind)
        relative = kind != "nn"
        for j, param in enumerate(PARAM_NAMES):
            if relative:
                b = bias[j] / nn_bias[j] if nn_bias[j] != 0 else math.inf
                v = var[j] / nn_var[j] if nn_var[j] != 0 else math.inf
                m = mse[j] / nn_mse[j] if nn_mse[j] != 0 else math.inf
            else:
                b, v, m = bias[j], var[j], mse[j]
            cells.append(SimCell(spec.scenario, kind, backend, param,
                                 float(b), float(v), float(m), relative,
                                 count, spec.replicates))
    return SimReport(scenario=spec.scenario, true_values=truth, cells=cells,
                     raw=raw, n_replicates=spec.replicates, models=fitters)

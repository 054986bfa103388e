"""Mixed-effects models built from normal and Laplace convolutions.

Four model kinds cover the 2x2 scheme of normal/Laplace random effects and
noise (NN, NL, LN, LL).  The package provides the closed-form marginal
densities, a multivariate Laplace distribution, exact maximum likelihood
for the NN model, a numerically integrated likelihood maximizer for NL/LL,
a Monte Carlo EM fitter for NL/LN/LL, cluster-bootstrap standard errors,
and a simulation harness for bias/variance/MSE studies.
"""

__version__ = "0.1.0"

from .convolutions import (
    ConvolutionKind,
    ConvolutionParams,
    convolution_pdf,
    ll_pdf,
    ln_pdf,
    nl_pdf,
    nn_pdf,
    numeric_convolution_oracle,
    regression_marginal_pdf,
    sample_convolution,
)
from .covariance import CovStructure, CovStructureKind, sigma1_to_xi, xi_to_sigma1
from .data import (
    Cluster,
    ClusteredData,
    ColumnMapping,
    ModelSpec,
    ResidualMode,
    load_csv,
    loglik_marginal,
    validate,
)
from .distributions import (
    MultivariateLaplace,
    UnivariateLaplace,
    laplace_pdf,
    mills_ratio,
    mv_laplace_pdf,
    normal_pdf,
    sample_laplace_scale_mixture,
    sample_mv_laplace,
)
from .errors import (
    ConvergenceError,
    ConvlmmError,
    DataError,
    DomainError,
    NumericError,
    UnsupportedStructureError,
)
from .mcem import MCEMConfig, fit_mcem, sample_w_conditional
from .nnfit import fit_nn
from .quadrature import (
    QuadratureGrid,
    block_bootstrap_se,
    fit_quadrature_ml,
    gauss_hermite_nodes,
    gauss_laguerre_nodes,
    integrated_loglik,
)
from .results import BootstrapResult, FitResult
from .simulate import ScenarioSpec, SimReport, generate_scenario, run_study

__all__ = [
    "BootstrapResult",
    "Cluster",
    "ClusteredData",
    "ColumnMapping",
    "ConvergenceError",
    "ConvlmmError",
    "ConvolutionKind",
    "ConvolutionParams",
    "CovStructure",
    "CovStructureKind",
    "DataError",
    "DomainError",
    "FitResult",
    "MCEMConfig",
    "ModelSpec",
    "MultivariateLaplace",
    "NumericError",
    "QuadratureGrid",
    "ResidualMode",
    "ScenarioSpec",
    "SimReport",
    "UnivariateLaplace",
    "UnsupportedStructureError",
    "block_bootstrap_se",
    "convolution_pdf",
    "fit_mcem",
    "fit_nn",
    "fit_quadrature_ml",
    "gauss_hermite_nodes",
    "gauss_laguerre_nodes",
    "generate_scenario",
    "integrated_loglik",
    "laplace_pdf",
    "ll_pdf",
    "ln_pdf",
    "load_csv",
    "loglik_marginal",
    "mills_ratio",
    "mv_laplace_pdf",
    "nl_pdf",
    "nn_pdf",
    "normal_pdf",
    "numeric_convolution_oracle",
    "regression_marginal_pdf",
    "run_study",
    "sample_convolution",
    "sample_laplace_scale_mixture",
    "sample_mv_laplace",
    "sample_w_conditional",
    "sigma1_to_xi",
    "validate",
    "xi_to_sigma1",
]

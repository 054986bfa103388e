"""Command-line interface: density evaluation, model fitting, bootstrap, simulation.

Subcommands
-----------
density    evaluate a convolution density on points or a grid (CSV output);
           ``--check`` also reports quadrature normalization and variance
fit        fit a model to a CSV file, JSON output
bootstrap  cluster-bootstrap standard errors for a fit configuration
simulate   run the replicate study for one scenario, CSV + text table output

Exit codes: 0 success, 2 usage or validation error, 3 flagged
non-convergence, 4 numeric failure.  Fits and simulations require an
explicit ``--seed``; given the seed every primary output is byte-identical
across runs (timestamps aside).  A config file (JSON or ``key=value``
lines) supplies defaults; explicit flags override it.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .convolutions import (
    ConvolutionKind,
    ConvolutionParams,
    check_density,
    convolution_pdf,
)
from .covariance import CovStructure
from .data import ColumnMapping, ModelSpec, ResidualMode, load_csv
from .errors import (
    ConvergenceError,
    ConvlmmError,
    DataError,
    DomainError,
    NumericError,
)
from .mcem import MCEMConfig, fit_mcem
from .nnfit import fit_nn
from .quadrature import block_bootstrap_se, fit_quadrature_ml
from .simulate import ScenarioSpec, run_study

SCHEMA_VERSION = "1"

#: JSON schema of the ``fit`` subcommand output (validated in the test suite).
FIT_RESULT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "tool", "timestamp", "config", "result"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "tool": {
            "type": "object",
            "required": ["name", "version"],
            "properties": {
                "name": {"type": "string"},
                "version": {"type": "string"},
            },
        },
        "timestamp": {"type": "string"},
        "config": {"type": "object"},
        "result": {
            "type": "object",
            "required": ["method", "converged", "iterations", "loglik", "beta",
                         "se_beta", "sigma1", "sigma2", "xi", "metadata"],
            "properties": {
                "method": {"type": "string"},
                "converged": {"type": "boolean"},
                "iterations": {"type": "integer"},
                "loglik": {"type": "number"},
                "beta": {"type": "array", "items": {"type": "number"}},
                "se_beta": {
                    "anyOf": [
                        {"type": "null"},
                        {"type": "array", "items": {"type": "number", "minimum": 0}},
                    ]
                },
                "sigma1": {"type": "array",
                           "items": {"type": "array", "items": {"type": "number"}}},
                "sigma2": {"type": "number", "exclusiveMinimum": 0},
                "xi": {"type": "array", "items": {"type": "number"}},
                "metadata": {"type": "object"},
                "bootstrap": {"type": "object"},
            },
        },
    },
}


def _round_floats(obj, digits):
    if digits is None:
        return obj
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, list):
        return [_round_floats(v, digits) for v in obj]
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    return obj


def _emit_json(payload, output, digits):
    text = json.dumps(_round_floats(payload, digits), indent=2)
    if output:
        with open(output, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
    else:
        print(text)


def _format_value(value, digits):
    return f"{value:.{digits}g}" if digits is not None else repr(float(value))


def _comma_list(text):
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


# ---------------------------------------------------------------------------
# parser construction
# ---------------------------------------------------------------------------


def _add_fit_options(sub, with_bootstrap_count=False):
    sub.add_argument("--input", help="input CSV path")
    sub.add_argument("--cluster-col")
    sub.add_argument("--response-col")
    sub.add_argument("--fixed-cols", type=_comma_list, default=(),
                     help="comma-separated fixed-effect covariate columns")
    sub.add_argument("--random-cols", type=_comma_list, default=(),
                     help="comma-separated random-effect covariate columns")
    sub.add_argument("--known-var-col", default=None,
                     help="column of known per-observation sampling variances; "
                          "fixes the noise scale at 1 (meta-analysis mode)")
    sub.add_argument("--fixed-intercept", action=argparse.BooleanOptionalAction,
                     default=True, help="prepend a column of ones to X")
    sub.add_argument("--random-intercept", action=argparse.BooleanOptionalAction,
                     default=True, help="prepend a column of ones to Z")
    sub.add_argument("--kind", choices=["nn", "nl", "ln", "ll"])
    sub.add_argument("--structure", default="general",
                     choices=["scaled-identity", "diagonal",
                              "compound-symmetric", "general"])
    sub.add_argument("--fitter", default="mcem", choices=["mcem", "quadrature"],
                     help="fitting algorithm for the NL/LN/LL kinds")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--mc-samples", type=int, default=None,
                     help="fixed Monte Carlo size per EM iteration "
                          "(default: min(20 t, 500) schedule)")
    sub.add_argument("--max-iter", type=int, default=100)
    sub.add_argument("--tol", type=float, default=5e-4)
    sub.add_argument("--nodes", type=int, default=None,
                     help="quadrature nodes per dimension")
    if with_bootstrap_count:
        sub.add_argument("--replicates", type=int, default=200,
                         help="bootstrap replicates")
    else:
        sub.add_argument("--bootstrap", type=int, default=None, metavar="B",
                         help="also compute B-replicate block-bootstrap SEs")
    sub.add_argument("--output", default=None, help="output JSON path (default stdout)")
    sub.add_argument("--digits", type=int, default=None)
    sub.add_argument("--threads", type=int, default=None)
    sub.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convlmm",
        description="Mixed-effects models from normal/Laplace convolutions.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", default=None,
                        help="config file (JSON or key=value lines) supplying "
                             "defaults; explicit flags win")
    subs = parser.add_subparsers(dest="command", required=True)

    dens = subs.add_parser("density", help="evaluate a convolution density")
    dens.add_argument("--kind", choices=["nn", "nl", "ln", "ll"])
    dens.add_argument("--sigma1", type=float, default=None)
    dens.add_argument("--sigma2", type=float, default=None)
    dens.add_argument("--at", type=_comma_list, default=None,
                      help="comma-separated evaluation points")
    dens.add_argument("--grid", default=None, metavar="LO:HI:N",
                      help="evaluate on an equally spaced grid")
    dens.add_argument("--check", action="store_true",
                      help="also report quadrature normalization and variance")
    dens.add_argument("--output", default=None, help="CSV path (default stdout)")
    dens.add_argument("--digits", type=int, default=None)

    fit = subs.add_parser("fit", help="fit a model to a CSV file")
    _add_fit_options(fit)

    boot = subs.add_parser("bootstrap", help="block-bootstrap standard errors")
    _add_fit_options(boot, with_bootstrap_count=True)

    sim = subs.add_parser("simulate", help="run the replicate simulation study")
    sim.add_argument("--scenario", type=int, choices=[1, 2, 3, 4], default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--replicates", type=int, default=100)
    sim.add_argument("--clusters", type=int, default=100)
    sim.add_argument("--per-cluster", type=int, default=5)
    sim.add_argument("--fitters", type=_comma_list, default=None,
                     help="comma-separated models, optionally kind:backend "
                          "(e.g. nn,ll:mcem); default matches the scenario")
    sim.add_argument("--mc-samples", type=int, default=None)
    sim.add_argument("--max-iter", type=int, default=100)
    sim.add_argument("--tol", type=float, default=5e-4)
    sim.add_argument("--raw", action="store_true",
                     help="also write replicate-level raw estimates")
    sim.add_argument("--output-dir", default=".")
    sim.add_argument("--digits", type=int, default=None)
    sim.add_argument("--threads", type=int, default=None)
    sim.add_argument("--verbose", action="store_true")
    parser._convlmm_subparsers = {"density": dens, "fit": fit,
                                  "bootstrap": boot, "simulate": sim}
    return parser


def _load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as handle:
        text = handle.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        loaded = json.loads(text)
        if not isinstance(loaded, dict):
            raise DataError(f"{path}: config JSON must be an object")
        return loaded
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}: line {lineno} is not key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce_config(parser, subparser, values: dict) -> dict:
    """Convert raw config values through the option types of the subparser."""
    actions = {a.dest: a for a in subparser._actions}
    out = {}
    for raw_key, raw_value in values.items():
        dest = str(raw_key).replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise DataError(f"config key {raw_key!r} is not a known option")
        if isinstance(raw_value, str) and isinstance(
                action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
            out[dest] = raw_value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None and isinstance(raw_value, str):
            out[dest] = action.type(raw_value)
        else:
            out[dest] = raw_value
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

_REQUIRED = {
    "density": ("kind", "sigma1", "sigma2"),
    "fit": ("input", "cluster_col", "response_col", "kind", "seed"),
    "bootstrap": ("input", "cluster_col", "response_col", "kind", "seed"),
    "simulate": ("scenario", "seed"),
}


def _require_options(args) -> None:
    missing = [name.replace("_", "-") for name in _REQUIRED[args.command]
               if getattr(args, name, None) is None]
    if missing:
        raise DomainError(
            "missing required option(s): " + ", ".join(f"--{m}" for m in missing)
        )


def _cmd_density(args) -> int:
    params = ConvolutionParams(args.sigma1, args.sigma2)
    kind = ConvolutionKind.parse(args.kind)
    if args.at is None and args.grid is None:
        raise DomainError("density needs --at or --grid")
    points = []
    if args.at is not None:
        points.extend(float(v) for v in args.at)
    if args.grid is not None:
        try:
            lo, hi, count = args.grid.split(":")
            lo, hi, count = float(lo), float(hi), int(count)
        except ValueError:
            raise DomainError(f"--grid must be LO:HI:N, got {args.grid!r}") from None
        if count < 1:
            raise DomainError("--grid needs at least one point")
        points.extend(np.linspace(lo, hi, count).tolist())
    lines = ["y,pdf"]
    for y in points:
        value = float(convolution_pdf(y, kind, params))
        lines.append(f"{_format_value(y, args.digits)},{_format_value(value, args.digits)}")
    table = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8") as handle:
            handle.write(table)
    else:
        sys.stdout.write(table)
    if args.check:
        norm, var = check_density(kind, params)
        print(f"normalization={norm:.6f}")
        print(f"variance={var:.6f}")
    return 0


def _build_model_inputs(args):
    mapping = ColumnMapping(
        cluster=args.cluster_col,
        response=args.response_col,
        fixed=args.fixed_cols,
        random=args.random_cols,
        known_var=args.known_var_col,
        fixed_intercept=args.fixed_intercept,
        random_intercept=args.random_intercept,
    )
    data = load_csv(args.input, mapping)
    structure = CovStructure(args.structure, data.q)
    mode = (ResidualMode.KNOWN_VARIANCES if args.known_var_col
            else ResidualMode.ESTIMATED_SCALE)
    spec = ModelSpec(args.kind, mapping.fixed_names, mapping.random_names,
                     structure, residual_mode=mode)
    return data, spec, mapping


def _make_fit_fn(args, spec):
    kind = ConvolutionKind.parse(args.kind)

    def fit_fn(data):
        if kind is ConvolutionKind.NN:
            return fit_nn(data, spec)
        if args.fitter == "quadrature":
            return fit_quadrature_ml(data, spec, n_nodes=args.nodes, seed=args.seed)
        config = MCEMConfig(seed=args.seed, mc_samples=args.mc_samples,
                            max_iter=args.max_iter, tol=args.tol,
                            verbose=args.verbose, loglik_nodes=args.nodes)
        return fit_mcem(data, spec, config)

    return fit_fn


def _resolved_fit_config(args) -> dict:
    keys = ["command", "input", "cluster_col", "response_col", "fixed_cols",
            "random_cols", "known_var_col", "fixed_intercept", "random_intercept",
            "kind", "structure", "fitter", "seed", "mc_samples", "max_iter",
            "tol", "nodes"]
    config = {}
    for key in keys:
        value = getattr(args, key, None)
        config[key] = list(value) if isinstance(value, tuple) else value
    for key in ("bootstrap", "replicates"):
        if hasattr(args, key):
            config[key] = getattr(args, key)
    return config


def _payload(config, result_dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "convlmm", "version": __version__},
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config,
        "result": result_dict,
    }


def _cmd_fit(args) -> int:
    data, spec, _ = _build_model_inputs(args)
    fit_fn = _make_fit_fn(args, spec)
    fit = fit_fn(data)
    result = fit.to_dict()
    if args.bootstrap:
        boot = block_bootstrap_se(data, spec, fit_fn, n_boot=args.bootstrap,
                                  seed=args.seed)
        result["bootstrap"] = boot.to_dict()
    _emit_json(_payload(_resolved_fit_config(args), result), args.output, args.digits)
    return 0 if fit.converged else 3


def _cmd_bootstrap(args) -> int:
    data, spec, _ = _build_model_inputs(args)
    fit_fn = _make_fit_fn(args, spec)
    boot = block_bootstrap_se(data, spec, fit_fn, n_boot=args.replicates,
                              seed=args.seed)
    _emit_json(_payload(_resolved_fit_config(args), boot.to_dict()),
               args.output, args.digits)
    return 0


def _parse_fitters(items):
    if items is None:
        return None
    fitters = []
    for item in items:
        kind, _, backend = str(item).partition(":")
        kind = ConvolutionKind.parse(kind).value
        if not backend:
            backend = "exact" if kind == "nn" else "mcem"
        fitters.append((kind, backend))
    return fitters


def _cmd_simulate(args) -> int:
    spec = ScenarioSpec(scenario=args.scenario, n_clusters=args.clusters,
                        cluster_size=args.per_cluster, replicates=args.replicates,
                        seed=args.seed)
    overrides = {}
    if args.mc_samples is not None:
        overrides["mc_samples"] = args.mc_samples
    overrides["max_iter"] = args.max_iter
    overrides["tol"] = args.tol
    n_jobs = args.threads if args.threads else (os.cpu_count() or 1)
    report = run_study(spec, fitters=_parse_fitters(args.fitters),
                       mcem_overrides=overrides, n_jobs=n_jobs)
    os.makedirs(args.output_dir, exist_ok=True)
    stem = os.path.join(args.output_dir, f"simulate_scenario{args.scenario}")
    report.to_csv(stem + "_report.csv")
    table = report.format_table()
    with open(stem + "_report.txt", "w", encoding="utf-8") as handle:
        handle.write(table)
    if args.raw:
        report.raw_to_csv(stem + "_raw.csv")
    sys.stdout.write(table)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args, remaining = parser.parse_known_args(argv)
    if remaining:
        parser.error(f"unrecognized arguments: {' '.join(remaining)}")
    try:
        if args.config:
            # re-parse with config values as defaults so explicit flags win
            chosen = parser._convlmm_subparsers[args.command]
            defaults = _coerce_config(parser, chosen, _load_config_file(args.config))
            chosen.set_defaults(**defaults)
            args = parser.parse_args(argv)
        _require_options(args)
        if args.command == "density":
            return _cmd_density(args)
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "bootstrap":
            return _cmd_bootstrap(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        raise DomainError(f"unknown command {args.command!r}")
    except (DataError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ConvlmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end.

::

    fellnerschall fit --config model.ini --data data.csv --out report.json [--fitted fitted.csv]
    fellnerschall simulate --scenario sine-gaussian --seed 1 --n 200 --out data.csv
    fellnerschall emlab --config model.ini --data data.csv --block s1 --out steps.csv

Exit codes: 0 success, 2 configuration error, 3 data error, 4 no convergence
(the report is still written). Errors print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, linalg
from .emlab import root_curves, step_ordering_experiment
from .gaussian import FitOptions, GaussianProblem, build_report, fit_gaussian
from .general import GeneralOptions, NewtonDiverged, fit_general_model, make_model
from .likelihoods import FAMILY_LINKS, NoEventsError, SupportViolation
from .simulate import SCENARIOS, UnknownScenario, read_csv, simulate, to_csv
from .smooths import (KINDS, MissingCovariateError, ModelSpec, NonFiniteDataError, SmoothError,
                      SmoothTerm, assemble_design)

EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, message, key=""):
        super().__init__(message)
        self.key = key


class DataError(ValueError):
    def __init__(self, message, kind="DataError"):
        super().__init__(message)
        self.kind = kind


@dataclass
class RunConfig:
    spec: ModelSpec
    family: str = "gaussian"
    link: str | None = None
    status: str | None = None
    weights: str | None = None
    offset: str | None = None
    options: dict = field(default_factory=dict)
    emlab: dict = field(default_factory=dict)


_MODEL_KEYS = {"response", "family", "link", "intercept", "parametric", "status", "weights", "offset"}
_SMOOTH_KEYS = {"kind", "covariate", "covariates", "k", "degree", "penalty_order", "n_lambda", "margin"}
_OPTION_KEYS = {"lambda_init", "step_control", "max_iter", "tol_rel", "tol_lambda", "k_max",
                "lambda_cap", "hessian_mode", "seed"}
_EMLAB_KEYS = {"grid_min", "grid_max", "grid_points", "sigma2"}


def _names(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _get(section, key, conv, default=None):
    raw = section.get(key)
    if raw is None or raw.strip() == "":
        return default
    try:
        return conv(raw.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r}", f"{section.name}.{key}") from None


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def parse_config(text: str) -> RunConfig:
    """Parse the INI-style model description.

    Sections: ``[model]``, one ``[smooth <label>]`` per smooth term,
    optional ``[options]`` and ``[emlab]``.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err).splitlines()[0], "syntax") from None
    if "model" not in cp:
        raise ConfigError("missing [model] section", "model")
    model = cp["model"]
    for key in model:
        if key not in _MODEL_KEYS:
            raise ConfigError(f"unknown key {key!r}", f"model.{key}")
    response = _get(model, "response", str)
    if response is None:
        raise ConfigError("response is required", "model.response")
    family = _get(model, "family", str, "gaussian")
    if family not in FAMILY_LINKS and family != "cox":
        raise ConfigError(f"unknown family {family!r}", "model.family")
    link = _get(model, "link", str)
    if link is not None and (family == "cox" or link not in FAMILY_LINKS[family]):
        raise ConfigError(f"link {link!r} not valid for family {family!r}", "model.link")
    status = _get(model, "status", str)
    if family == "cox" and status is None:
        raise ConfigError("cox family needs a status column", "model.status")
    intercept = _get(model, "intercept", _bool, family != "cox")
    if family == "cox" and intercept:
        raise ConfigError("cox models have no intercept", "model.intercept")

    smooths = []
    for name in cp.sections():
        if name in ("model", "options", "emlab"):
            continue
        if not name.startswith("smooth"):
            raise ConfigError(f"unknown section [{name}]", name)
        sec = cp[name]
        for key in sec:
            if key not in _SMOOTH_KEYS:
                raise ConfigError(f"unknown key {key!r}", f"{name}.{key}")
        label = name[len("smooth"):].strip()
        kind = _get(sec, "kind", str)
        if kind not in KINDS:
            raise ConfigError(f"unknown smooth kind {kind!r}", f"{name}.kind")
        covs = _get(sec, "covariates", _names) or _get(sec, "covariate", _names)
        if not covs:
            raise ConfigError("covariate is required", f"{name}.covariate")
        kw = {}
        for key in ("k", "degree", "penalty_order", "n_lambda"):
            v = _get(sec, key, int)
            if v is not None:
                kw[key] = v
        margin = _get(sec, "margin", str)
        if margin is not None:
            kw["margin"] = margin
        try:
            smooths.append(SmoothTerm(kind, covs, label=label or "", **kw))
        except (SmoothError, TypeError) as err:
            raise ConfigError(str(err), name) from None

    options = {}
    if "options" in cp:
        sec = cp["options"]
        for key in sec:
            if key not in _OPTION_KEYS:
                raise ConfigError(f"unknown key {key!r}", f"options.{key}")
        for key, conv in (("lambda_init", float), ("max_iter", int), ("tol_rel", float),
                          ("tol_lambda", float), ("k_max", int), ("lambda_cap", float),
                          ("step_control", str), ("hessian_mode", str), ("seed", int)):
            v = _get(sec, key, conv)
            if v is not None:
                options[key] = v
        if options.get("step_control", "halving") not in ("halving", "off"):
            raise ConfigError("step_control must be halving or off", "options.step_control")
    emlab = {}
    if "emlab" in cp:
        sec = cp["emlab"]
        for key in sec:
            if key not in _EMLAB_KEYS:
                raise ConfigError(f"unknown key {key!r}", f"emlab.{key}")
        for key, conv in (("grid_min", float), ("grid_max", float), ("grid_points", int),
                          ("sigma2", float)):
            v = _get(sec, key, conv)
            if v is not None:
                emlab[key] = v

    spec = ModelSpec(response=response, parametric=_get(model, "parametric", _names, ()),
                     smooths=tuple(smooths), intercept=intercept)
    return RunConfig(spec, family, link, status, _get(model, "weights", str),
                     _get(model, "offset", str), options, emlab)


def _options(cfg: RunConfig):
    opts = {k: v for k, v in cfg.options.items() if k != "seed"}
    if cfg.family == "gaussian" and (cfg.link in (None, "identity")):
        opts.pop("hessian_mode", None)
        return FitOptions(**opts)
    return GeneralOptions(**opts)


def _load(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    except OSError as err:
        raise ConfigError(str(err), "config") from None
    try:
        data = read_csv(args.data)
    except (OSError, ValueError) as err:
        raise DataError(str(err)) from None
    return cfg, data


def _design(cfg, data):
    try:
        return assemble_design(cfg.spec, data)
    except MissingCovariateError as err:
        raise DataError(f"missing column {err.args[0]!r}", "MissingCovariate") from None
    except NonFiniteDataError as err:
        raise DataError(str(err), "NonFiniteData") from None
    except SmoothError as err:
        raise DataError(str(err), type(err).__name__) from None


def run_fit(cfg: RunConfig, data):
    """Fit according to ``cfg``; returns ``(report, design, fitted_table)``."""
    t0 = time.perf_counter()
    design = _design(cfg, data)
    opts = _options(cfg)
    for col in (cfg.spec.response, cfg.status, cfg.weights, cfg.offset):
        if col is not None and col not in data:
            raise DataError(f"missing column {col!r}", "MissingCovariate")
    X = design.X
    if isinstance(opts, GeneralOptions):
        try:
            model = make_model(cfg.family, X, data, cfg.spec.response, link=cfg.link,
                               status=cfg.status, weights=cfg.weights, offset=cfg.offset)
        except SupportViolation as err:
            raise DataError(str(err), "SupportViolation") from None
        except NoEventsError as err:
            raise DataError(str(err), "NoEvents") from None
        state = fit_general_model(model, design.penalties, opts)
        V = state.system.inverse()
        edf_diag = np.einsum("ij,ji->i", V, state.hessian)
        link = "cox-breslow" if cfg.family == "cox" else model.link.name
        report = build_report(design, state, 0.0, family=cfg.family, link=link,
                              step_control=opts.step_control, edf_diag=edf_diag,
                              scale=model.scale, lam=state.rho, reml=state.laml,
                              hessian_modes=[t["hessian_mode"] for t in state.trajectory])
        eta = X @ state.beta
        fitted = eta if cfg.family == "cox" else model.link.inverse(eta + model.offset)
    else:
        y = np.asarray(data[cfg.spec.response], dtype=float)
        state = fit_gaussian(GaussianProblem(X, y, design.penalties), opts)
        V = state.sigma2 * state.system.inverse()
        report = build_report(design, state, 0.0, step_control=opts.step_control)
        fitted = X @ state.beta
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, V, X), 0.0))
    table = {"row": np.arange(1, X.shape[0] + 1), "fitted": fitted}
    for label, sl in design.term_slices.items():
        table[label] = X[:, sl] @ state.beta[sl]
    table["se"] = se
    report.wall_time = time.perf_counter() - t0
    return report, design, table


def _write_table(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = list(table)
        w.writerow(names)
        for row in zip(*(table[k] for k in names)):
            w.writerow([str(int(v)) if isinstance(v, (np.integer, int)) else repr(float(v)) for v in row])


def cmd_fit(args) -> int:
    cfg, data = _load(args)
    report, _, table = run_fit(cfg, data)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    if args.fitted:
        _write_table(args.fitted, table)
    if not report.converged:
        _diag("MaxIterExceeded", EXIT_CONVERGENCE, "",
              f"no convergence after {report.iterations} iterations; report written")
        return EXIT_CONVERGENCE
    return 0


def _param(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), float(value)


def cmd_simulate(args) -> int:
    params = dict(args.param or [])
    try:
        data = simulate(args.scenario, args.seed, args.n, **params)
    except TypeError as err:
        raise ConfigError(str(err), "param") from None
    text = to_csv(data)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    return 0


def run_emlab(cfg: RunConfig, data, block: str):
    if cfg.family != "gaussian" or cfg.link not in (None, "identity"):
        raise ConfigError("emlab needs a gaussian identity model", "model.family")
    design = _design(cfg, data)
    labels = design.penalties.labels
    if block not in labels:
        raise ConfigError(f"unknown block {block!r}; blocks are {labels}", "block")
    j = labels.index(block)
    y = np.asarray(data[cfg.spec.response], dtype=float)
    problem = GaussianProblem(design.X, y, design.penalties)
    sigma2 = cfg.emlab.get("sigma2")
    if sigma2 is not None and len(labels) == 1:
        # nothing else to condition on; the scale is fixed by the user
        lam = np.ones(1)
    else:
        opts = {k: v for k, v in cfg.options.items() if k not in ("seed", "hessian_mode")}
        state = fit_gaussian(problem, FitOptions(**opts))
        lam = state.lam
        sigma2 = state.sigma2 if sigma2 is None else sigma2
    grid = np.geomspace(cfg.emlab.get("grid_min", 1e-5), cfg.emlab.get("grid_max", 1e3),
                        cfg.emlab.get("grid_points", 41))
    rows = step_ordering_experiment(problem, lam, j, grid, sigma2)
    return rows, (problem, lam, sigma2, j)


def cmd_emlab(args) -> int:
    cfg, data = _load(args)
    rows, (problem, lam, sigma2, j) = run_emlab(cfg, data, args.block)
    _write_table(args.out, {k: [r[k] for r in rows] for k in rows[0]})
    if args.curves:
        grid = np.geomspace(1e-7, 1e5, 121)
        curves = root_curves(problem, lam, j, sigma2, args.curves_at, grid)
        _write_table(args.curves, {k: [r[k] for r in curves] for k in curves[0]})
    return 0


def _diag(kind, code, key, message):
    print(json.dumps({"error": kind, "exit_code": code, "key": key, "message": message}),
          file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _diag("UsageError", EXIT_CONFIG, "", message)
        sys.exit(EXIT_CONFIG)


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fellnerschall",
                                     description="Smoothing parameter estimation by generalized Fellner-Schall updates.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write a JSON report")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fitted")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--scenario", required=True, help=", ".join(sorted(SCENARIOS)))
    p.add_argument("--seed", required=True, type=_seed)
    p.add_argument("--n", type=int)
    p.add_argument("--param", type=_param, action="append", help="scenario parameter key=value")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("emlab", help="compare EM, accelerated EM and Fellner-Schall steps")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--block", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curves", help="also write root-finding curves to this CSV")
    p.add_argument("--curves-at", type=float, default=1.0, help="lambda' for --curves")
    p.set_defaults(func=cmd_emlab)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        _diag("ConfigError", EXIT_CONFIG, err.key, str(err))
        return EXIT_CONFIG
    except UnknownScenario as err:
        _diag("UnknownScenario", EXIT_CONFIG, "scenario", str(err))
        return EXIT_CONFIG
    except DataError as err:
        _diag(err.kind, EXIT_DATA, "", str(err))
        return EXIT_DATA
    except (NewtonDiverged, linalg.LinalgError) as err:
        _diag(type(err).__name__, EXIT_CONVERGENCE, "", str(err))
        return EXIT_CONVERGENCE
    except ValueError as err:
        # remaining validation failures come from the data (degenerate EDF, rank problems)
        _diag(type(err).__name__, EXIT_DATA, "", str(err))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``mfhboot {validate,fit,predict,ci,compare,simulate}``.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.  Flags override values from ``--config``.
"""

import argparse
import json
import sys
import warnings
from importlib import resources

import numpy as np

from . import __version__
from .bootstrap import BootstrapOptions, QuantileMethod, confidence_intervals
from .errors import ConfigError, DataError, NumericalError
from .estimation import FitOptions, fit_model
from .io import (format_float, parse_dataset, parse_targets, read_config, target_label,
                 write_intervals)
from .model import CovarianceKind, CovarianceModel, correlation_matrix, validate_dataset
from .prediction import posterior_moments
from .simulation import SUMMARY_LABELS, SimulationConfig, coverage_study, length_comparison

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def example_path(name="example.csv"):
    """Path of a bundled file: the synthetic example dataset by default."""
    return str(resources.files("mfhboot") / "data" / name)


# options that may also come from the config file, with their defaults
_DEFAULTS = {
    "model": "unstructured", "tol": 1e-8, "max_iter": 1000, "alpha": 0.05, "B": 1000,
    "seed": None, "quantile": "equal", "target": None, "component": None,
    "methods": "MFH,UFH,DIR", "threads": 1, "R": None,
}
_CONFIG_KEYS = {"model": "model", "tol": "tol", "max_iter": "max_iter", "alpha": "alpha",
                "b": "B", "seed": "seed", "quantile_method": "quantile",
                "targets": "target", "target": "target", "component": "component",
                "methods": "methods", "threads": "threads", "r": "R"}
_CONVERT = {"tol": float, "max_iter": int, "alpha": float, "B": int, "seed": int,
            "component": int, "threads": int, "R": int}


def _build_parser():
    p = _Parser(prog="mfhboot", description="Multivariate Fay-Herriot fitting, "
                "prediction and parametric-bootstrap confidence intervals.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, help="dataset CSV")
            sp.add_argument("--model", choices=[k.value for k in CovarianceKind],
                            help="covariance family of A (default unstructured)")
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--tol", type=float, help="convergence tolerance (default 1e-8)")
        sp.add_argument("--max-iter", dest="max_iter", type=int, help="iteration cap")

    def boot(sp):
        sp.add_argument("--seed", type=int, help="bootstrap seed (required)")
        sp.add_argument("--B", "-B", dest="B", type=int, help="replicates (default 1000)")
        sp.add_argument("--alpha", type=float, help="1 - confidence level (default 0.05)")
        sp.add_argument("--quantile", choices=[q.value for q in QuantileMethod],
                        help="quantile rule (default equal)")
        sp.add_argument("--threads", "--workers", dest="threads", type=int,
                        help="worker processes; results do not depend on it")

    sp = sub.add_parser("validate", help="check a dataset")
    common(sp)

    sp = sub.add_parser("fit", help="maximum-likelihood fit")
    common(sp)
    sp.add_argument("--params-out", help="write parameters as JSON")

    sp = sub.add_parser("predict", help="per-area EBLUP")
    common(sp)
    sp.add_argument("--out", help="CSV output (default stdout)")

    sp = sub.add_parser("ci", help="bootstrap confidence intervals")
    common(sp)
    boot(sp)
    sp.add_argument("--target", action="append",
                    help="area:component[:weight] terms joined by ','; repeatable")
    sp.add_argument("--out", help="CSV output (default stdout)")

    sp = sub.add_parser("compare", help="per-area interval lengths of MFH, UFH and DIR")
    common(sp)
    boot(sp)
    sp.add_argument("--component", type=int, help="component j (1-based)")
    sp.add_argument("--methods", help="subset of MFH,UFH,DIR")
    sp.add_argument("--out", help="per-area CSV")
    sp.add_argument("--summary-out", help="summary CSV")

    sp = sub.add_parser("simulate", help="Monte Carlo coverage study")
    common(sp, data=False)
    sp.add_argument("--seed", type=int, help="master seed (required)")
    sp.add_argument("--R", "-R", dest="R", type=int, help="repetitions")
    sp.add_argument("--B", "-B", dest="B", type=int, help="bootstrap replicates")
    sp.add_argument("--threads", "--workers", dest="threads", type=int)
    sp.add_argument("--out", help="CSV output (default stdout)")
    return p


def _resolve(args):
    """Fill unset flags from the config file, then from defaults."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    extra = {}
    for key, value in cfg.items():
        name = _CONFIG_KEYS.get(key)
        if name is None:
            extra[key] = value
            continue
        if getattr(args, name, None) is None:
            conv = _CONVERT.get(name, str)
            try:
                setattr(args, name, value if name == "target" else conv(value))
            except ValueError:
                raise ConfigError(f"bad value for {key} in config: {value!r}") from None
    for name, default in _DEFAULTS.items():
        if args.command == "simulate" and name in ("B", "R"):
            continue  # the simulation config carries its own defaults
        if getattr(args, name, None) is None:
            setattr(args, name, default)
    if isinstance(args.target, list):
        args.target = ";".join(args.target)
    return extra


def _fit_options(args):
    try:
        return FitOptions(tol=args.tol, max_iter=args.max_iter)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load(args):
    ds = parse_dataset(args.data)
    cm = CovarianceModel(args.model, ds.s)
    return ds, cm


def _boot_options(args):
    if args.seed is None:
        raise UsageError(f"mfhboot {args.command}: --seed is required")
    try:
        return BootstrapOptions(args.seed, args.B, args.quantile,
                                fit_options=_fit_options(args), workers=args.threads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _matrix_lines(M, fmt="{:8.3f}"):
    return ["  " + " ".join(fmt.format(v) for v in row) for row in np.atleast_2d(M)]


def cmd_validate(args, out):
    ds = parse_dataset(args.data)
    rep = validate_dataset(ds, CovarianceModel(args.model, ds.s))
    print(rep.format(), file=out)
    if not rep.ok:
        msg = "; ".join(f.message for f in rep.failures)
        raise _ValidationFailed(msg)
    return EXIT_OK


class _ValidationFailed(DataError):
    pass


def fit_report(ds, cm, fitted):
    lines = [f"model: {cm.kind.value} (m={ds.m}, s={ds.s}, p={ds.p})",
             f"method: {fitted.method}",
             f"log-likelihood: {fitted.loglik:.10g}",
             f"iterations: {fitted.iterations}",
             f"converged: {str(fitted.converged).lower()}",
             f"boundary: {str(fitted.boundary_flag).lower()}",
             "beta: " + " ".join(f"{b:.6g}" for b in fitted.beta),
             "psi: " + " ".join(f"{v:.6g}" for v in fitted.psi),
             "A_hat:", *_matrix_lines(fitted.A_hat, "{:12.6g}"),
             "correlation of A_hat:", *_matrix_lines(correlation_matrix(fitted.A_hat))]
    lines += [f"note: {n}" for n in fitted.notes]
    return "\n".join(lines)


def cmd_fit(args, out):
    ds, cm = _load(args)
    fitted = fit_model(ds, cm, _fit_options(args))
    print(fit_report(ds, cm, fitted), file=out)
    if args.params_out:
        payload = {"model": cm.kind.value, "m": ds.m, "s": ds.s, "p": ds.p,
                   "beta": list(map(float, fitted.beta)), "psi": list(map(float, fitted.psi)),
                   "A_hat": np.asarray(fitted.A_hat).tolist(),
                   "correlation": np.round(correlation_matrix(fitted.A_hat), 3).tolist(),
                   "loglik": fitted.loglik, "iterations": fitted.iterations,
                   "converged": fitted.converged, "boundary_flag": fitted.boundary_flag}
        with open(args.params_out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_predict(args, out):
    ds, cm = _load(args)
    fitted = fit_model(ds, cm, _fit_options(args))
    theta, B = posterior_moments(ds, fitted.beta, fitted.A_hat)
    header = ["area_id", *(f"eblup_{j}" for j in range(1, ds.s + 1)),
              *(f"sd_{j}" for j in range(1, ds.s + 1))]
    sd = np.sqrt(np.maximum(np.diagonal(B, axis1=1, axis2=2), 0.0))
    lines = [",".join(header)]
    for i, a in enumerate(ds.area_ids):
        lines.append(",".join([a, *(format_float(v) for v in (*theta[i], *sd[i]))]))
    _emit("\n".join(lines) + "\n", args.out, out)
    return EXIT_OK


def _emit(text, path, out):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        out.write(text)


def cmd_ci(args, out):
    opts = _boot_options(args)
    ds, cm = _load(args)
    if not args.target:
        raise ConfigError("no --target given")
    targets = parse_targets(args.target, ds.area_ids, ds.s)
    results = confidence_intervals(ds, cm, targets, args.alpha, opts)
    labels = [target_label(t, ds.area_ids, ds.s) for t in targets]
    if args.out:
        write_intervals(results, labels, args.out)
    else:
        write_intervals(results, labels, out)
    return EXIT_OK


def cmd_compare(args, out):
    opts = _boot_options(args)
    ds, cm = _load(args)
    if args.component is None:
        raise ConfigError("no --component given")
    methods = tuple(t.strip() for t in args.methods.split(",") if t.strip())
    lc = length_comparison(ds, args.component - 1, methods, opts.B, opts.seed, args.alpha, cm,
                           opts.quantile_method, opts.fit_options, opts.workers)
    if args.out:
        lc.to_csv(args.out)
    if args.summary_out:
        lc.summary_to_csv(args.summary_out)
    print(f"interval lengths, component {args.component}, alpha={args.alpha:g}, "
          f"B={opts.B}", file=out)
    print(f"{'':6s}" + "".join(f"{k:>10s}" for k in SUMMARY_LABELS), file=out)
    for method, stats in lc.summary().items():
        print(f"{method:6s}" + "".join(f"{stats[k]:10.4f}" for k in SUMMARY_LABELS), file=out)
    for method, note in lc.notes.items():
        print(f"note: {method} missing ({note})", file=out)
    return EXIT_OK


def cmd_simulate(args, out):
    if args.seed is None:
        raise UsageError("mfhboot simulate: --seed is required")
    if not args.config:
        raise UsageError("mfhboot simulate: --config is required")
    cfg = read_config(args.config)
    for key in ("seed", "model", "quantile_method", "threads", "target"):
        cfg.pop(key, None)
    overrides = {"master_seed": args.seed, "workers": args.threads}
    if args.R is not None:
        overrides["R"] = args.R
    if args.B is not None:
        overrides["B"] = args.B
    sim = SimulationConfig.from_mapping(cfg, **overrides)
    rep = coverage_study(sim)
    if args.out:
        rep.to_csv(args.out)
    print(f"{'method':6s} {'target':>10s} {'CR':>8s} {'Len1':>9s} {'Len2':>9s} "
          f"{'n':>6s} {'failed':>6s}", file=out)
    for row in rep.rows():
        if row["target"] != "all" and len(rep.target_labels) > 12:
            continue
        print(f"{row['method']:6s} {row['target']:>10s} {row['CR']:8.2f} {row['Len1']:9.4f} "
              f"{row['Len2']:9.4f} {row['n']:6d} {row['failures']:6d}", file=out)
    return EXIT_OK


_COMMANDS = {"validate": cmd_validate, "fit": cmd_fit, "predict": cmd_predict,
             "ci": cmd_ci, "compare": cmd_compare, "simulate": cmd_simulate}


def main(argv=None, out=None, err=None):
    """Run the CLI and return the exit status."""
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = _build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("mfhboot: a subcommand is required "
                             "(validate, fit, predict, ci, compare, simulate)")
        _resolve(args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            status = _COMMANDS[args.command](args, out)
        for w in caught:
            print(f"warning: {w.message}", file=err)
        return status
    except UsageError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=err)
        return EXIT_USAGE
    except _ValidationFailed as exc:
        print(f"error: validation failed: {exc}", file=err)
        return EXIT_DATA
    except DataError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=err)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=err)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DATA


run_cli = main


def entry():
    sys.exit(main())

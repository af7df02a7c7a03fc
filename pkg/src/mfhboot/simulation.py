"""Monte Carlo coverage studies and per-area interval-length comparisons.

A coverage study keeps X and D fixed (drawn once from the master seed) and
redraws theta and y from the true model in every repetition.  Each
repetition owns the streams (master_seed, 2, r) for the data and
(master_seed, 3, r) / (master_seed, 4, r, j) for the MFH / UFH bootstraps, so
results do not depend on how repetitions are spread over workers.
"""

import csv
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .baselines import direct_interval, ufh_intervals
from .bootstrap import BootstrapOptions, QuantileMethod, confidence_intervals
from .errors import ConfigError, DataError, NumericalError
from .estimation import FitOptions
from .linalg import cholesky, derive_seed, make_rng, standard_normal
from .model import (CovarianceKind, CovarianceModel, Dataset, LinearTarget,
                    covariance_matrix)

METHODS = ("MFH", "UFH", "DIR")
SUMMARY_LABELS = ("min", "25%", "Median", "Mean", "75%", "max")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def equicorrelated(s, variance, rho):
    """variance * ((1 - rho) I + rho 1 1^T)."""
    return variance * ((1.0 - rho) * np.eye(s) + rho * np.ones((s, s)))


@dataclass(frozen=True)
class SimulationConfig:
    """Design of a coverage study.

    ``true_cov`` gives A directly; alternatively ``cov_kind`` with
    ``true_psi``.  With ``design="covariate"`` area i has
    X_i = blockdiag((1, x_i1), ..., (1, x_is)) and p = 2s; with
    ``design="intercept"`` X_i = I_s.  D_i = Q diag(lambda) Q^T with Q a
    random rotation and lambda uniform on ``d_eigen_range`` unless
    ``D_fixed`` is given.  ``targets`` of None means every (area, component).
    """

    m: int
    s: int
    true_cov: np.ndarray = None
    cov_kind: CovarianceKind = CovarianceKind.UNSTRUCTURED
    true_psi: np.ndarray = None
    true_beta: np.ndarray = None
    design: str = "covariate"
    d_eigen_range: tuple = (0.5, 2.0)
    D_fixed: np.ndarray = None
    targets: tuple = None
    methods: tuple = ("MFH", "DIR")
    R: int = 100
    B: int = 300
    alpha: float = 0.05
    master_seed: int = 0
    quantile_method: QuantileMethod = QuantileMethod.EQUAL_TAILED
    max_failures: int = None
    fit_options: FitOptions = field(default_factory=FitOptions)
    workers: int = 1

    def __post_init__(self):
        if self.m < 1 or self.s < 1:
            raise ConfigError("m and s must be positive")
        if self.R < 1:
            raise ConfigError("R must be at least 1")
        if self.B < 1:
            raise ConfigError("B must be at least 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.design not in ("covariate", "intercept"):
            raise ConfigError(f"unknown design {self.design!r}")
        methods = tuple(str(x).upper() for x in self.methods)
        unknown = [x for x in methods if x not in METHODS]
        if unknown or not methods:
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "cov_kind", CovarianceKind(self.cov_kind))
        object.__setattr__(self, "quantile_method", QuantileMethod(self.quantile_method))
        lo, hi = self.d_eigen_range
        if not 0 < lo <= hi:
            raise ConfigError("d_eigen_range must satisfy 0 < low <= high")
        if (self.true_cov is None) == (self.true_psi is None):
            raise ConfigError("give exactly one of true_cov and true_psi")

    @property
    def covariance_model(self):
        return CovarianceModel(self.cov_kind, self.s)

    @property
    def p(self):
        return 2 * self.s if self.design == "covariate" else self.s

    def true_A(self):
        if self.true_cov is not None:
            A = np.asarray(self.true_cov, dtype=float)
            if A.shape != (self.s, self.s):
                raise ConfigError(f"true_cov must be {self.s}x{self.s}")
            try:
                cholesky(A)
            except NumericalError as exc:
                raise ConfigError("true_cov must be positive definite") from exc
            return 0.5 * (A + A.T)
        try:
            return np.array(covariance_matrix(self.covariance_model, self.true_psi))
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    def beta(self):
        if self.true_beta is None:
            if self.design == "covariate":
                return np.tile([1.0, 0.5], self.s)
            return np.ones(self.s)
        beta = np.asarray(self.true_beta, dtype=float).ravel()
        if beta.shape != (self.p,):
            raise ConfigError(f"true_beta must have length p={self.p}")
        return beta

    @classmethod
    def from_mapping(cls, cfg, **overrides):
        """Build from flat string key/values (see :func:`mfhboot.io.read_config`).

        Keys: m, s, design, true_cov ("a,b;c,d") or true_var with true_corr
        (equicorrelated) or cov_kind with true_psi, true_beta, d_eigen_range,
        targets ("all", "component:J" or area:component[:weight] terms with
        areas numbered 1..m), methods, R, B, alpha, quantile_method,
        max_failures, tol, max_iter.
        """
        from .io import parse_matrix, parse_targets, parse_vector

        cfg = dict(cfg)
        known = {"m", "s", "design", "true_cov", "true_var", "true_corr", "cov_kind",
                 "true_psi", "true_beta", "d_eigen_range", "targets", "methods", "r",
                 "b", "alpha", "quantile_method", "max_failures", "tol", "max_iter",
                 "master_seed", "workers"}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigError(f"unknown simulation keys: {', '.join(unknown)}")

        def num(key, conv, default=None):
            if key not in cfg:
                if default is None:
                    raise ConfigError(f"missing key {key!r}")
                return default
            try:
                return conv(cfg[key])
            except ValueError:
                raise ConfigError(f"bad value for {key}: {cfg[key]!r}") from None

        m, s = num("m", int), num("s", int)
        kw = {"m": m, "s": s, "R": num("r", int, 100), "B": num("b", int, 300),
              "alpha": num("alpha", float, 0.05),
              "master_seed": num("master_seed", int, 0), "workers": num("workers", int, 1)}
        if "design" in cfg:
            kw["design"] = cfg["design"].strip().lower()
        if "true_cov" in cfg:
            kw["true_cov"] = parse_matrix(cfg["true_cov"])
        elif "true_var" in cfg:
            kw["true_cov"] = equicorrelated(s, num("true_var", float), num("true_corr", float, 0.0))
        elif "true_psi" in cfg:
            kw["true_psi"] = parse_vector(cfg["true_psi"])
        if "cov_kind" in cfg:
            kw["cov_kind"] = cfg["cov_kind"].strip().lower()
        if "true_beta" in cfg:
            kw["true_beta"] = parse_vector(cfg["true_beta"])
        if "d_eigen_range" in cfg:
            lo_hi = parse_vector(cfg["d_eigen_range"])
            if lo_hi.shape != (2,):
                raise ConfigError("d_eigen_range needs two numbers")
            kw["d_eigen_range"] = tuple(lo_hi)
        if "methods" in cfg:
            kw["methods"] = tuple(t.strip() for t in cfg["methods"].split(",") if t.strip())
        if "quantile_method" in cfg:
            try:
                kw["quantile_method"] = QuantileMethod(cfg["quantile_method"].strip().lower())
            except ValueError:
                raise ConfigError("quantile_method must be 'equal' or 'shortest'") from None
        if "max_failures" in cfg:
            kw["max_failures"] = num("max_failures", int)
        kw["fit_options"] = FitOptions(tol=num("tol", float, 1e-8),
                                       max_iter=num("max_iter", int, 1000))
        spec = cfg.get("targets", "all").strip()
        if spec.lower().startswith("component:"):
            j = int(spec.split(":", 1)[1]) - 1
            if not 0 <= j < s:
                raise ConfigError(f"component outside 1..{s}")
            kw["targets"] = tuple(LinearTarget.unit(m, s, i, j) for i in range(m))
        elif spec.lower() != "all":
            kw["targets"] = tuple(parse_targets(spec, [str(i + 1) for i in range(m)], s))
        kw.update(overrides)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def echo(self):
        """Plain-value view of the configuration for reports."""
        out = {}
        for k, v in asdict(self).items():
            if k in ("D_fixed", "targets", "fit_options"):
                continue
            if isinstance(v, np.ndarray):
                v = v.tolist()
            if hasattr(v, "value"):
                v = v.value
            out[k] = v
        out["A"] = self.true_A().tolist()
        return out


def simulation_design(cfg):
    """Fixed (X, D) of a study: both drawn from the master seed once."""
    m, s = cfg.m, cfg.s
    if cfg.design == "covariate":
        x = standard_normal(make_rng(cfg.master_seed, 0), m * s).reshape(m, s)
        X = np.zeros((m, s, 2 * s))
        for j in range(s):
            X[:, j, 2 * j] = 1.0
            X[:, j, 2 * j + 1] = x[:, j]
    else:
        X = np.broadcast_to(np.eye(s), (m, s, s)).copy()
    if cfg.D_fixed is not None:
        D = np.asarray(cfg.D_fixed, dtype=float)
        if D.shape != (m, s, s):
            raise ConfigError(f"D_fixed must have shape ({m}, {s}, {s})")
    else:
        rng = make_rng(cfg.master_seed, 1)
        lo, hi = cfg.d_eigen_range
        D = np.empty((m, s, s))
        for i in range(m):
            Q, R = np.linalg.qr(standard_normal(rng, s * s).reshape(s, s))
            Q = Q * np.sign(np.diag(R))
            lam = lo + (hi - lo) * rng.random(s)
            D[i] = (Q * lam) @ Q.T
    return X, 0.5 * (D + np.swapaxes(D, 1, 2))


def simulate_dataset(cfg, r=1):
    """Repetition ``r`` of a study as a Dataset, with the true theta (m, s)."""
    A = cfg.true_A()
    X, D = simulation_design(cfg)
    base = Dataset(None, np.zeros((cfg.m, cfg.s)), D, X)
    L_D = np.array([cholesky(d) for d in base.D])
    return _simulate_data((cfg, base, X @ cfg.beta(), cholesky(A), L_D), r)


def _resolve_targets(cfg):
    if cfg.targets is None:
        return [LinearTarget.unit(cfg.m, cfg.s, i, j)
                for i in range(cfg.m) for j in range(cfg.s)]
    targets = []
    for t in cfg.targets:
        t = t if isinstance(t, LinearTarget) else LinearTarget(t)
        if t.c.shape[0] != cfg.m * cfg.s:
            raise ConfigError(f"target weights must have length m*s = {cfg.m * cfg.s}")
        targets.append(t)
    return targets


def _target_label(t, s):
    nz = np.flatnonzero(t.c)
    parts = []
    for k in nz:
        i, j = divmod(int(k), s)
        w = t.c[k]
        parts.append(f"{i + 1}:{j + 1}" if w == 1.0 else f"{i + 1}:{j + 1}:{w:g}")
    return "+".join(parts)


def _check_applicable(cfg, targets):
    for t in targets:
        if "DIR" in cfg.methods and t.unit_index(cfg.s) is None:
            raise ConfigError("DIR needs single (area, component) targets, got "
                              + _target_label(t, cfg.s))
        if "UFH" in cfg.methods:
            comps = {int(k) % cfg.s for k in np.flatnonzero(t.c)}
            if len(comps) != 1:
                raise ConfigError("UFH needs targets within one component, got "
                                  + _target_label(t, cfg.s))


# ---------------------------------------------------------------------------
# coverage study
# ---------------------------------------------------------------------------


@dataclass
class CoverageReport:
    """Per-repetition outcomes and their summaries.

    ``covered`` and ``lengths`` map a method to an (R, n_targets) array with
    nan where the method failed in that repetition; ``failures`` counts
    failed repetitions by exception name.
    """

    config: dict
    methods: tuple
    target_labels: list
    covered: dict
    lengths: dict
    failures: dict
    D_trace: np.ndarray = None
    target_areas: np.ndarray = None

    def _cells(self, method, target=None):
        cov = self.covered[method]
        ln = self.lengths[method]
        if target is not None:
            cov, ln = cov[:, target], ln[:, target]
        ok = ~np.isnan(cov)
        return cov[ok], ln[ok], int(np.sum(~ok))

    def summary(self, method, target=None):
        """CR in percent, Len1 (mean length), Len2 (median length), n, failures."""
        cov, ln, n_fail = self._cells(method, target)
        if cov.size == 0:
            return {"CR": math.nan, "Len1": math.nan, "Len2": math.nan,
                    "n": 0, "failures": n_fail}
        return {"CR": 100.0 * float(np.mean(cov)), "Len1": float(np.mean(ln)),
                "Len2": float(np.median(ln)), "n": int(cov.size), "failures": n_fail}

    def cr(self, method, target=None):
        return self.summary(method, target)["CR"]

    def rows(self):
        out = []
        for method in self.methods:
            for k, label in enumerate(self.target_labels):
                out.append({"method": method, "target": label, **self.summary(method, k)})
            out.append({"method": method, "target": "all", **self.summary(method)})
        return out

    def mean_length_by_area(self, method):
        """Mean interval length per area over repetitions and that area's targets."""
        ln = self.lengths[method]
        m = len(self.D_trace)
        out = np.full(m, np.nan)
        for i in range(m):
            cols = np.flatnonzero(self.target_areas == i)
            if cols.size:
                out[i] = np.nanmean(ln[:, cols])
        return out

    def length_gap_spearman(self, method="MFH", baseline="DIR"):
        """Spearman correlation of trace(D_i) with the baseline-minus-method gap."""
        gap = self.mean_length_by_area(baseline) - self.mean_length_by_area(method)
        ok = ~np.isnan(gap)
        return float(spearmanr(self.D_trace[ok], gap[ok]).statistic)

    def to_csv(self, path):
        fields = ["method", "target", "CR", "Len1", "Len2", "n", "failures"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v)
                            for k, v in row.items()})

    def identical(self, other):
        """Bitwise equality of every per-repetition outcome."""
        if self.methods != other.methods or self.failures != other.failures:
            return False
        return all(np.array_equal(self.covered[k], other.covered[k], equal_nan=True)
                   and np.array_equal(self.lengths[k], other.lengths[k], equal_nan=True)
                   for k in self.methods)


def _simulate_data(state, r):
    cfg, base, mean, L_A, L_D = state[:5]
    rng = make_rng(cfg.master_seed, 2, r)
    z = standard_normal(rng, 2 * cfg.m * cfg.s).reshape(2, cfg.m, cfg.s)
    theta = mean + z[0] @ L_A.T
    y = theta + np.einsum("iab,ib->ia", L_D, z[1])
    return base.with_y(y), theta


def _repetition(state, r):
    cfg, base, mean, L_A, L_D, targets, C, units = state
    ds, theta = _simulate_data(state, r)
    truth = C @ theta.ravel()
    K = len(targets)
    out = {}
    for method in cfg.methods:
        lower = np.full(K, np.nan)
        upper = np.full(K, np.nan)
        reason = None
        if method == "DIR":
            for k, (i, j) in enumerate(units):
                res = direct_interval(ds.y[i, j], ds.D[i, j, j], cfg.alpha)
                lower[k], upper[k] = res.lower, res.upper
        elif method == "MFH":
            opts = BootstrapOptions(derive_seed(cfg.master_seed, 3, r), cfg.B,
                                    cfg.quantile_method, cfg.max_failures, cfg.fit_options)
            try:
                res = confidence_intervals(ds, cfg.covariance_model, targets, cfg.alpha, opts)
                lower[:] = [x.lower for x in res]
                upper[:] = [x.upper for x in res]
            except (NumericalError, DataError) as exc:
                reason = type(exc).__name__
        else:
            by_comp = {}
            for k, t in enumerate(targets):
                j = int(np.flatnonzero(t.c)[0]) % cfg.s
                by_comp.setdefault(j, []).append(k)
            reasons = []
            for j, ks in sorted(by_comp.items()):
                opts = BootstrapOptions(derive_seed(cfg.master_seed, 4, r, j), cfg.B,
                                        cfg.quantile_method, cfg.max_failures,
                                        cfg.fit_options)
                uni = [LinearTarget(targets[k].blocks(cfg.s)[:, j]) for k in ks]
                try:
                    res = ufh_intervals(ds, j, None, cfg.alpha, opts, uni)
                except (NumericalError, DataError) as exc:
                    reasons.append(type(exc).__name__)
                    continue
                lower[ks] = [x.lower for x in res]
                upper[ks] = [x.upper for x in res]
            reason = reasons[0] if reasons else None
        covered = np.where(np.isnan(lower), np.nan,
                           ((lower <= truth) & (truth <= upper)).astype(float))
        out[method] = (covered, upper - lower, reason)
    return r, out


def _run_repetitions(args):
    state, reps = args
    return [_repetition(state, r) for r in reps]


def coverage_study(cfg):
    """Empirical coverage and lengths of each method over R simulated datasets.

    Failed repetitions (for example a zero UFH variance estimate) are counted
    per method and left out of CR, Len1 and Len2 rather than scored as misses.
    """
    if not isinstance(cfg, SimulationConfig):
        raise ConfigError("coverage_study needs a SimulationConfig")
    A = cfg.true_A()
    beta = cfg.beta()
    X, D = simulation_design(cfg)
    base = Dataset(None, np.zeros((cfg.m, cfg.s)), D, X)
    targets = _resolve_targets(cfg)
    _check_applicable(cfg, targets)
    C = np.array([t.c for t in targets])
    units = [t.unit_index(cfg.s) for t in targets]
    L_A = cholesky(A)
    L_D = np.array([cholesky(d) for d in base.D])
    state = (cfg, base, X @ beta, L_A, L_D, targets, C, units)

    reps = list(range(1, cfg.R + 1))
    if cfg.workers == 1:
        results = [_repetition(state, r) for r in reps]
    else:
        jobs = [(state, reps[k::cfg.workers]) for k in range(cfg.workers) if reps[k::cfg.workers]]
        results = []
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for part in pool.map(_run_repetitions, jobs):
                results.extend(part)
        results.sort(key=lambda row: row[0])

    covered, lengths, failures = {}, {}, {}
    for method in cfg.methods:
        covered[method] = np.array([out[method][0] for _, out in results])
        lengths[method] = np.array([out[method][1] for _, out in results])
        failures[method] = dict(Counter(out[method][2] for _, out in results
                                        if out[method][2] is not None))
    areas = np.array([int(np.flatnonzero(t.c)[0]) // cfg.s for t in targets])
    return CoverageReport(cfg.echo(), cfg.methods, [_target_label(t, cfg.s) for t in targets],
                          covered, lengths, failures,
                          np.trace(D, axis1=1, axis2=2), areas)


# ---------------------------------------------------------------------------
# length comparison
# ---------------------------------------------------------------------------


def summary_statistics(values):
    """min, 25%, Median, Mean, 75%, max of the non-missing values."""
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return dict.fromkeys(SUMMARY_LABELS, math.nan)
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(SUMMARY_LABELS, [q[0], q[1], q[2], float(np.mean(v)), q[3], q[4]]))


@dataclass
class LengthComparison:
    """Per-area interval lengths for one component, rows sorted by D_{i,jj}."""

    component: int
    area_ids: tuple
    sampling_variance: np.ndarray
    lengths: dict
    notes: dict = field(default_factory=dict)

    @property
    def methods(self):
        return tuple(self.lengths)

    def differences(self):
        out = {}
        if "MFH" in self.lengths:
            for other in ("UFH", "DIR"):
                if other in self.lengths:
                    out[f"MFH-{other}"] = self.lengths["MFH"] - self.lengths[other]
        return out

    def summary(self):
        return {k: summary_statistics(v) for k, v in self.lengths.items()}

    def to_csv(self, path):
        diffs = self.differences()
        header = ["area_id", "sampling_variance", *self.lengths, *diffs]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for n, a in enumerate(self.area_ids):
                vals = [self.sampling_variance[n], *(v[n] for v in self.lengths.values()),
                        *(v[n] for v in diffs.values())]
                w.writerow([a, *(_cell(x) for x in vals)])

    def summary_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", *SUMMARY_LABELS])
            for method, stats in self.summary().items():
                w.writerow([method, *(_cell(stats[k]) for k in SUMMARY_LABELS)])
            for method, note in self.notes.items():
                w.writerow([f"# {method}: {note}"])


def _cell(x):
    return "NA" if math.isnan(x) else f"{x:.6g}"


def length_comparison(ds, component, methods=METHODS, B=1000, seed=None, alpha=0.05,
                      cm=None, quantile_method=QuantileMethod.EQUAL_TAILED,
                      fit_options=None, workers=1, covariate_columns=None):
    """Interval lengths of each method for theta_{i, component} in every area.

    MFH and UFH use the same bootstrap seed.  A method that cannot produce
    intervals leaves a column of nan with the reason in ``notes``.
    """
    if seed is None:
        raise ConfigError("length_comparison needs a seed")
    methods = tuple(str(x).upper() for x in methods)
    if any(x not in METHODS for x in methods):
        raise ConfigError(f"methods must be a subset of {METHODS}")
    if not 0 <= component < ds.s:
        raise ConfigError(f"component {component + 1} outside 1..{ds.s}")
    cm = cm or CovarianceModel(CovarianceKind.UNSTRUCTURED, ds.s)
    opts = BootstrapOptions(seed, B, quantile_method,
                            fit_options=fit_options or FitOptions(), workers=workers)
    m = ds.m
    lengths, notes = {}, {}
    for method in methods:
        ln = np.full(m, np.nan)
        try:
            if method == "DIR":
                ln[:] = [direct_interval(ds.y[i, component], ds.D[i, component, component],
                                         alpha).length for i in range(m)]
            elif method == "MFH":
                targets = [LinearTarget.unit(m, ds.s, i, component) for i in range(m)]
                ln[:] = [r.length for r in confidence_intervals(ds, cm, targets, alpha, opts)]
            else:
                res = ufh_intervals(ds, component, covariate_columns, alpha, opts, range(m))
                ln[:] = [r.length for r in res]
        except (NumericalError, DataError) as exc:
            notes[method] = f"{type(exc).__name__}: {exc}"
        lengths[method] = ln
    d = ds.D[:, component, component]
    order = np.argsort(d, kind="stable")
    return LengthComparison(component, tuple(ds.area_ids[i] for i in order), d[order],
                            {k: v[order] for k, v in lengths.items()}, notes)

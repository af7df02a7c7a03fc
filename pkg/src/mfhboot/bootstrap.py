"""Parametric bootstrap intervals for T = c^T theta.

For b = 1..B a replicate is drawn from the fitted model,

    theta*_i = X_i beta_hat + v*_i,  v*_i ~ N(0, A_hat),
    y*_i     = theta*_i + e*_i,      e*_i ~ N(0, D_i),

the model is refitted to y*, and the pivot (T* - mu_T(y*, phi*)) / sigma_T(psi*)
is recorded.  Quantiles (q1, q2) of the pivots give the interval
[mu_hat + sigma_hat q1, mu_hat + sigma_hat q2].

Determinism: replicate b, attempt a draws from the stream (seed, b, a), so the
sample is the same whatever order or process the replicates run in.  Pivots
are collected by index and sorted at the end.
"""

import enum
import math
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (BelowMinimumReplicates, DataError, DegenerateVariance,
                     InsufficientReplicates, NotPositiveDefinite, NumericalError,
                     TooManyFailures)
from .estimation import FitOptions, fit_model, require_nondegenerate
from .linalg import cholesky, make_rng, standard_normal
from .prediction import posterior_moments, target_matrix, target_moments

MIN_RECOMMENDED_B = 100
# guards floor/ceil of (B + 1) * alpha / 2 against representation error
_INDEX_EPS = 1e-9
# a refit whose sigma_T is below this fraction of the direct-estimate scale
# (A* = 0 in the direction of c) gives no usable pivot
_SD_EPS = 1e-6


class QuantileMethod(enum.Enum):
    EQUAL_TAILED = "equal"
    SHORTEST_LENGTH = "shortest"


@dataclass(frozen=True)
class BootstrapOptions:
    seed: int
    B: int = 1000
    quantile_method: QuantileMethod = QuantileMethod.EQUAL_TAILED
    max_failures: int = None
    fit_options: FitOptions = field(default_factory=FitOptions)
    workers: int = 1
    warm_start: bool = True

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a bootstrap seed is required")
        if self.B < 1:
            raise ValueError("B must be positive")
        object.__setattr__(self, "quantile_method", QuantileMethod(self.quantile_method))
        if self.max_failures is None:
            object.__setattr__(self, "max_failures", math.ceil(0.02 * self.B))
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass(frozen=True)
class PivotSample:
    pivots: np.ndarray  # sorted ascending
    n_failed: int = 0
    failure_reasons: dict = field(default_factory=dict)
    n_nonconverged: int = 0
    warnings: tuple = ()

    @property
    def B(self):
        return len(self.pivots)


@dataclass(frozen=True)
class IntervalResult:
    lower: float
    upper: float
    q1: float
    q2: float
    method: str
    alpha: float
    mu_hat: float
    sigma_hat: float
    B_effective: int
    n_failed: int = 0
    warnings: tuple = ()

    @property
    def length(self):
        return self.upper - self.lower

    def covers(self, value):
        return self.lower <= value <= self.upper


# ---------------------------------------------------------------------------
# replicates
# ---------------------------------------------------------------------------


def _chol_D(ds):
    if "chol_D" not in ds._cache:
        ds._cache["chol_D"] = np.array([cholesky(d) for d in ds.D])
    return ds._cache["chol_D"]


def generate_replicate(ds, fitted, cm, rng):
    """One parametric-bootstrap dataset and its true theta*.

    Draws m*s normals for the random effects, then m*s for the sampling
    errors, area-major within each block.
    """
    if fitted.boundary_flag:
        raise NotPositiveDefinite("cannot resample from a singular A_hat")
    L_A = cholesky(fitted.A_hat)
    L_D = _chol_D(ds)
    z = standard_normal(rng, 2 * ds.m * ds.s).reshape(2, ds.m, ds.s)
    v = z[0] @ L_A.T
    e = np.einsum("iab,ib->ia", L_D, z[1])
    theta = ds.X @ np.asarray(fitted.beta) + v
    return ds.with_y(theta + e), theta


def _direct_sd(ds, C):
    """sqrt(c^T blockdiag(D) c) per target row, the scale of the direct estimate."""
    if "direct_sd" not in ds._cache or ds._cache["direct_sd"][0] is not C:
        _, sd = target_moments(C, np.zeros((ds.m, ds.s)), ds.D)
        ds._cache["direct_sd"] = (C, sd)
    return ds._cache["direct_sd"][1]


def _one_replicate(ds, fitted, cm, C, opts, index):
    """Pivots of replicate ``index`` for every target row of C.

    Refits that raise, or whose sigma_T vanishes for some target, are redrawn
    from the next attempt stream, at most ``max_failures + 1`` attempts in total.
    """
    reasons = []
    init = fitted.params if opts.warm_start else None
    for attempt in range(opts.max_failures + 1):
        rng = make_rng(opts.seed, index, attempt)
        ds_star, theta_star = generate_replicate(ds, fitted, cm, rng)
        try:
            refit = fit_model(ds_star, cm, opts.fit_options, init=init)
        except (NumericalError, DataError) as exc:
            reasons.append(type(exc).__name__)
            continue
        # a refit on the singular boundary is still the replicate's ML estimate
        # and is kept unless sigma_T vanishes, which leaves the pivot undefined
        try:
            theta_hat, Bcov = posterior_moments(ds_star, refit.beta, refit.A_hat)
        except NotPositiveDefinite:
            reasons.append("NotPositiveDefinite")
            continue
        mu, sd = target_moments(C, theta_hat, Bcov)
        if not np.all(sd > _SD_EPS * _direct_sd(ds, C)) or not np.all(np.isfinite(mu)):
            reasons.append("DegenerateVariance")
            continue
        T = np.sum(C * theta_star.reshape(1, -1), axis=1)
        return (T - mu) / sd, reasons, (not refit.converged, refit.boundary_flag)
    return None, reasons, (False, False)


def _run_chunk(args):
    ds, fitted, cm, C, opts, indices = args
    return [(b, *_one_replicate(ds, fitted, cm, C, opts, b)) for b in indices]


def bootstrap_pivots(ds, fitted, cm, targets, opts):
    """Pivot matrix (B, n_targets), rows in replicate order, plus diagnostics.

    Raises TooManyFailures when the redraw count exceeds ``opts.max_failures``.
    """
    if fitted.boundary_flag:
        raise DegenerateVariance("cannot bootstrap from a fit on the singular boundary")
    C = target_matrix(targets, ds.m, ds.s)
    indices = list(range(1, opts.B + 1))
    results = []
    if opts.workers == 1:
        n_failed = 0
        for b in indices:
            row = (b, *_one_replicate(ds, fitted, cm, C, opts, b))
            n_failed += len(row[2])
            if n_failed > opts.max_failures:
                break
            results.append(row)
    else:
        chunks = [indices[k::opts.workers] for k in range(opts.workers)]
        jobs = [(ds, fitted, cm, C, opts, ch) for ch in chunks if ch]
        with ProcessPoolExecutor(max_workers=opts.workers) as pool:
            for part in pool.map(_run_chunk, jobs):
                results.extend(part)
        results.sort(key=lambda row: row[0])
    reasons = Counter()
    for _, _, why, _ in results:
        reasons.update(why)
    n_failed = sum(reasons.values())
    if n_failed > opts.max_failures or len(results) < opts.B \
            or any(row[1] is None for row in results):
        raise TooManyFailures(
            f"more than {opts.max_failures} bootstrap refits failed "
            f"({dict(reasons) or 'refit limit reached'})")
    P = np.array([row[1] for row in results])
    n_nonconv = sum(bool(row[3][0]) for row in results)
    n_boundary = sum(bool(row[3][1]) for row in results)
    notes = []
    if n_boundary:
        notes.append(f"{n_boundary} of {opts.B} refits on the singular boundary")
    if opts.B < MIN_RECOMMENDED_B:
        msg = f"B={opts.B} is below the recommended minimum of {MIN_RECOMMENDED_B}"
        warnings.warn(msg, BelowMinimumReplicates, stacklevel=2)
        notes.append(msg)
    return P, n_failed, dict(reasons), n_nonconv, tuple(notes)


def pivot_sample(ds, fitted, cm, c, opts):
    P, n_failed, reasons, n_nonconv, notes = bootstrap_pivots(ds, fitted, cm, [c], opts)
    return PivotSample(np.sort(P[:, 0]), n_failed, reasons, n_nonconv, notes)


# ---------------------------------------------------------------------------
# quantiles and intervals
# ---------------------------------------------------------------------------


def equal_tailed_positions(B, alpha):
    """1-based order-statistic positions for the equal-tailed rule."""
    lo = math.floor((B + 1) * alpha / 2 + _INDEX_EPS)
    hi = math.ceil((B + 1) * (1 - alpha / 2) - _INDEX_EPS)
    return max(lo, 1), min(hi, B)


def select_quantiles(pivots, alpha, method=QuantileMethod.EQUAL_TAILED):
    """(q1, q2) from sorted pivots.

    Equal-tailed: order statistics at floor((B+1) alpha/2) and
    ceil((B+1)(1 - alpha/2)).  Shortest: the narrowest window of
    ceil(B (1 - alpha)) consecutive order statistics, ties to the left.
    """
    pivots = np.asarray(getattr(pivots, "pivots", pivots), dtype=float)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    B = len(pivots)
    if B < math.ceil(2 / alpha - _INDEX_EPS):
        raise InsufficientReplicates(f"B={B} is too small for alpha={alpha}; "
                                     f"need at least {math.ceil(2 / alpha - _INDEX_EPS)}")
    if np.any(np.diff(pivots) < 0):
        pivots = np.sort(pivots)
    method = QuantileMethod(method)
    if method is QuantileMethod.EQUAL_TAILED:
        lo, hi = equal_tailed_positions(B, alpha)
        return float(pivots[lo - 1]), float(pivots[hi - 1])
    w = math.ceil(B * (1 - alpha) - _INDEX_EPS)
    widths = pivots[w - 1:] - pivots[:B - w + 1]
    i = int(np.argmin(widths))  # first minimum
    return float(pivots[i]), float(pivots[i + w - 1])


def interval_from_pivots(mu_hat, sigma_hat, pivots, alpha, method=QuantileMethod.EQUAL_TAILED,
                         tag="MFH", n_failed=0, notes=()):
    method = QuantileMethod(method)
    q1, q2 = select_quantiles(pivots, alpha, method)
    return IntervalResult(float(mu_hat + sigma_hat * q1), float(mu_hat + sigma_hat * q2),
                          q1, q2, f"{tag}-bootstrap-{method.value}", float(alpha),
                          float(mu_hat), float(sigma_hat), len(pivots), int(n_failed),
                          tuple(notes))


def confidence_intervals(ds, cm, targets, alpha, opts, fitted=None, tag="MFH"):
    """Intervals for several targets sharing one set of bootstrap replicates."""
    if fitted is None:
        fitted = fit_model(ds, cm, opts.fit_options)
    require_nondegenerate(fitted)
    C = target_matrix(targets, ds.m, ds.s)
    theta_hat, Bcov = posterior_moments(ds, fitted.beta, fitted.A_hat)
    mu, sd = target_moments(C, theta_hat, Bcov)
    P, n_failed, _, _, notes = bootstrap_pivots(ds, fitted, cm, targets, opts)
    return [interval_from_pivots(mu[k], sd[k], np.sort(P[:, k]), alpha,
                                 opts.quantile_method, tag, n_failed, notes)
            for k in range(len(C))]


def confidence_interval(ds, cm, c, alpha, opts, fitted=None, tag="MFH"):
    """Parametric-bootstrap interval for T = c^T theta.

    Fits the model unless ``fitted`` is given.  A fit on the singular boundary
    raises DegenerateVariance.
    """
    return confidence_intervals(ds, cm, [c], alpha, opts, fitted, tag)[0]

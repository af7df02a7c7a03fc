"""Comparison intervals: direct (survey estimate only) and univariate Fay-Herriot.

The univariate model is the s = 1 case of the multivariate pipeline; the
functions here only extract one component and delegate, so differences
between the two always come from the model and never from the code.
"""

import math

import numpy as np
from scipy.special import ndtri

from .bootstrap import IntervalResult, confidence_intervals
from .errors import BadDimension, BadVariance, DegenerateVariance, UfhZeroVariance
from .model import CovarianceKind, CovarianceModel, Dataset, LinearTarget


def normal_quantile(prob):
    """Standard normal quantile (scipy's ndtri, accurate to double precision)."""
    return float(ndtri(prob))


def direct_interval(y_ij, d_jj, alpha):
    """y +/- z_{alpha/2} sqrt(d): exact under the model for a single estimate."""
    if not d_jj > 0:
        raise BadVariance(f"sampling variance must be positive, got {d_jj}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = normal_quantile(1 - alpha / 2)
    se = math.sqrt(d_jj)
    return IntervalResult(y_ij - z * se, y_ij + z * se, -z, z, "DIR", float(alpha),
                          float(y_ij), se, 0)


def univariate_columns(ds, component):
    """Columns of X used by ``component``: those not identically zero in its row."""
    return np.flatnonzero(np.any(ds.X[:, component, :] != 0, axis=0))


def extract_component(ds, component, covariate_columns=None):
    """The s = 1 dataset for one component of a multivariate dataset."""
    if not 0 <= component < ds.s:
        raise BadDimension(f"component {component} outside 0..{ds.s - 1}")
    if covariate_columns is None:
        covariate_columns = univariate_columns(ds, component)
    cols = np.asarray(covariate_columns, dtype=int)
    return Dataset(ds.area_ids,
                   ds.y[:, component:component + 1],
                   ds.D[:, component:component + 1, component:component + 1],
                   ds.X[:, component:component + 1, cols])


def _univariate_target(target, m):
    if isinstance(target, LinearTarget):
        if target.c.shape[0] != m:
            raise BadDimension(f"univariate target needs {m} weights, got {target.c.shape[0]}")
        return target
    return LinearTarget.unit(m, 1, int(target), 0)


def ufh_intervals(ds, component, covariate_columns, alpha, opts, targets, fitted=None):
    """Univariate bootstrap intervals for one component of ``ds``.

    ``targets`` holds area indices (0-based) or LinearTargets with m weights.
    ``covariate_columns`` of None keeps the columns of X used by the component.
    A zero variance estimate raises UfhZeroVariance: the interval cannot be
    formed and the caller decides what to report instead.
    """
    ds1 = extract_component(ds, component, covariate_columns)
    cm1 = CovarianceModel(CovarianceKind.UNSTRUCTURED, 1)
    targets = [_univariate_target(t, ds1.m) for t in targets]
    try:
        return confidence_intervals(ds1, cm1, targets, alpha, opts, fitted, tag="UFH")
    except UfhZeroVariance:
        raise
    except DegenerateVariance as exc:
        raise UfhZeroVariance(
            f"univariate random-effects variance for component {component + 1} "
            f"is estimated as zero; interval cannot be obtained ({exc})") from exc


def ufh_interval(ds, component, covariate_columns, alpha, opts, target=0):
    """Univariate interval for a single target (an area index by default 0)."""
    return ufh_intervals(ds, component, covariate_columns, alpha, opts, [target])[0]

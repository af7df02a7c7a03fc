"""Multivariate Fay-Herriot small-area model with parametric-bootstrap intervals.

Typical use::

    from mfhboot import *
    ds = parse_dataset("areas.csv")
    cm = CovarianceModel("unstructured", ds.s)
    fitted = fit_model(ds, cm)
    c = LinearTarget.unit(ds.m, ds.s, area=0, component=1)
    ci = confidence_interval(ds, cm, c, 0.05, BootstrapOptions(seed=1))
"""

__version__ = "0.1.0"

from .baselines import direct_interval, extract_component, ufh_interval, ufh_intervals
from .bootstrap import (BootstrapOptions, IntervalResult, PivotSample, QuantileMethod,
                        bootstrap_pivots, confidence_interval, confidence_intervals,
                        generate_replicate, pivot_sample, select_quantiles)
from .errors import *  # noqa: F401,F403
from .estimation import (FitOptions, FittedModel, e_step, em_fit, fit_model, fit_structured,
                         gls_beta, log_likelihood)
from .io import parse_dataset, read_config, write_dataset
from .linalg import (cholesky, inverse_spd, log_det_spd, make_rng, sample_mvn, solve_spd,
                     sym_matrix)
from .model import (AreaData, CovarianceKind, CovarianceModel, Dataset, LinearTarget,
                    ParamVector, ValidationReport, correlation_matrix, covariance_matrix,
                    marginal_variance, validate_dataset)
from .prediction import (Prediction, conditional_mean, conditional_sd, eblup, predict)
from .simulation import (CoverageReport, LengthComparison, SimulationConfig, coverage_study,
                         equicorrelated, length_comparison)

"""EBLUP and the conditional distribution of T = c^T theta given y.

Given y, theta_i is normal with mean

    mu_i = A (A + D_i)^{-1} y_i + D_i (A + D_i)^{-1} X_i beta
         = y_i - D_i (A + D_i)^{-1} (y_i - X_i beta)

and covariance B_i = A - A (A + D_i)^{-1} A, independently over areas, so
T | y ~ N(c^T mu, sum_i c_i^T B_i c_i).  B_i is formed by subtraction so a
fitted A close to singular still gives finite output.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import BadDimension, DegenerateVarianceWarning, NotPositiveDefinite
from .linalg import DEFAULT_PD_TOL, nb_chol_solve, nb_cholesky
from .model import covariance_matrix


@dataclass(frozen=True)
class Prediction:
    theta_hat: np.ndarray  # (m, s)
    mu_T: float
    sigma_T: float


@njit(cache=True)
def posterior_kernel(y, X, D, beta, A, theta_out, B_out):
    """Per-area posterior means (the EBLUP) and covariances; False if not PD."""
    m, s = y.shape
    p = X.shape[2]
    S = np.empty((s, s))
    L = np.empty((s, s))
    r = np.empty(s)
    w = np.empty(s)
    col = np.empty(s)
    SinvA = np.empty((s, s))
    for i in range(m):
        for a in range(s):
            t = y[i, a]
            for k in range(p):
                t -= X[i, a, k] * beta[k]
            r[a] = t
            for b in range(s):
                S[a, b] = A[a, b] + D[i, a, b]
        if not nb_cholesky(S, L, DEFAULT_PD_TOL):
            return False
        nb_chol_solve(L, r, w)
        for a in range(s):
            t = 0.0
            for b in range(s):
                t += D[i, a, b] * w[b]
            theta_out[i, a] = y[i, a] - t
        for c in range(s):
            nb_chol_solve(L, A[c], col)
            for a in range(s):
                SinvA[a, c] = col[a]
        for a in range(s):
            for b in range(a + 1):
                t = 0.0
                for k in range(s):
                    t += A[a, k] * SinvA[k, b]
                B_out[i, a, b] = A[a, b] - t
                B_out[i, b, a] = B_out[i, a, b]
    return True


def posterior_moments(ds, beta, A):
    """(theta_hat, B) with theta_hat (m, s) and B (m, s, s)."""
    A = np.ascontiguousarray(A, dtype=float)
    beta = np.ascontiguousarray(beta, dtype=float)
    if A.shape != (ds.s, ds.s) or beta.shape != (ds.p,):
        raise BadDimension("parameter dimensions do not match the dataset")
    theta = np.empty((ds.m, ds.s))
    B = np.empty((ds.m, ds.s, ds.s))
    if not posterior_kernel(ds.y, ds.X, ds.D, beta, A, theta, B):
        raise NotPositiveDefinite("A + D_i is not positive definite")
    return theta, B


def target_matrix(targets, m, s):
    """Stack LinearTargets into a (n_targets, m*s) weight matrix."""
    C = np.array([np.asarray(t.c if hasattr(t, "c") else t, dtype=float) for t in targets])
    if C.ndim != 2 or C.shape[1] != m * s:
        raise BadDimension(f"target weights must have length m*s = {m * s}")
    return C


def target_moments(C, theta, B):
    """Conditional means and standard deviations for each row of C.

    Sums are taken with numpy's pairwise summation along contiguous rows, so
    the reduction order is fixed.
    """
    m, s = theta.shape
    mu = np.sum(C * theta.reshape(1, -1), axis=1)
    Cb = C.reshape(len(C), m, s)
    var = np.sum(np.einsum("tia,iab,tib->ti", Cb, B, Cb), axis=1)
    return mu, np.sqrt(np.maximum(var, 0.0))


def eblup(ds, phi, cm):
    """theta_hat_i = y_i - D_i (A + D_i)^{-1} (y_i - X_i beta), shape (m, s)."""
    theta, _ = posterior_moments(ds, phi.beta, covariance_matrix(cm, phi.psi))
    return theta


def _check_target(ds, c):
    c = np.asarray(getattr(c, "c", c), dtype=float).ravel()
    if c.shape[0] != ds.m * ds.s:
        raise BadDimension(f"target weights must have length m*s = {ds.m * ds.s}")
    return c


def conditional_mean(ds, phi, cm, c):
    c = _check_target(ds, c)
    theta, _ = posterior_moments(ds, phi.beta, covariance_matrix(cm, phi.psi))
    return float(np.sum(c * theta.ravel()))


def conditional_sd(ds, psi, cm, c):
    """sqrt(sum_i c_i^T B_i c_i); depends on psi, D and c only."""
    c = _check_target(ds, c)
    # beta and y do not enter B_i; any beta gives the same covariances
    _, B = posterior_moments(ds, np.zeros(ds.p), covariance_matrix(cm, psi))
    _, sd = target_moments(c[None, :], np.zeros((ds.m, ds.s)), B)
    sd = float(sd[0])
    if sd < 1e-12:
        warnings.warn(f"conditional standard deviation {sd:.3g} is numerically zero",
                      DegenerateVarianceWarning, stacklevel=2)
    return sd


def predict(ds, phi, cm, c):
    c = _check_target(ds, c)
    theta, B = posterior_moments(ds, phi.beta, covariance_matrix(cm, phi.psi))
    mu, sd = target_moments(c[None, :], theta, B)
    return Prediction(theta, float(mu[0]), float(sd[0]))

"""Small dense SPD linear algebra and seeded Gaussian sampling.

Every matrix handled by the package is symmetric positive definite by model
construction (A(psi), D_i, A + D_i), so factorization, inversion and
log-determinants all go through a Cholesky factor.  The ``nb_*`` kernels are
numba-compiled and operate on preallocated buffers; they are what the fitting
loops call per area.  The public wrappers raise on failure.

Randomness: generators are Philox (counter-based, 64-bit keys) streams keyed
by ``SeedSequence(seed, spawn_key=keys)``, and normal variates are produced by
the inverse-CDF transform of 53-bit uniforms.  Both choices are fixed so a
(seed, keys) pair names the same stream on every platform.
"""

import math

import numpy as np
from numba import njit
from scipy.special import ndtri

from .errors import BadDimension, NotPositiveDefinite

DEFAULT_PD_TOL = 1e-12


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def nb_cholesky(a, out, tol):
    """Lower Cholesky factor of ``a`` into ``out``; False if not PD.

    Only the lower triangle of ``a`` is read.  A pivot at or below
    ``tol * max(diag(a))`` counts as a failure.
    """
    n = a.shape[0]
    dmax = 0.0
    for i in range(n):
        if a[i, i] > dmax:
            dmax = a[i, i]
    if not dmax > 0.0:
        return False
    thresh = tol * dmax
    for j in range(n):
        piv = a[j, j]
        for k in range(j):
            piv -= out[j, k] * out[j, k]
        if not piv > thresh:
            return False
        d = math.sqrt(piv)
        out[j, j] = d
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= out[i, k] * out[j, k]
            out[i, j] = t / d
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def nb_chol_solve(L, b, out):
    """Solve (L L^T) x = b for a vector b."""
    n = L.shape[0]
    for i in range(n):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * out[k]
        out[i] = t / L[i, i]
    for i in range(n - 1, -1, -1):
        t = out[i]
        for k in range(i + 1, n):
            t -= L[k, i] * out[k]
        out[i] = t / L[i, i]


@njit(cache=True)
def nb_chol_inverse(L, out):
    """Inverse of L L^T, symmetric, written into ``out``."""
    n = L.shape[0]
    # W = L^{-1}, lower triangular, built column by column
    W = np.zeros((n, n))
    for j in range(n):
        W[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            t = 0.0
            for k in range(j, i):
                t -= L[i, k] * W[k, j]
            W[i, j] = t / L[i, i]
    for i in range(n):
        for j in range(i + 1):
            t = 0.0
            for k in range(i, n):
                t += W[k, i] * W[k, j]
            out[i, j] = t
            out[j, i] = t


@njit(cache=True)
def nb_chol_logdet(L):
    n = L.shape[0]
    t = 0.0
    for i in range(n):
        t += math.log(L[i, i])
    return 2.0 * t


# ---------------------------------------------------------------------------
# public wrappers
# ---------------------------------------------------------------------------


def sym_matrix(entries):
    """Square float array with the lower triangle mirrored onto the upper.

    The result is read-only so it can be shared freely.
    """
    a = np.array(entries, dtype=float, ndmin=2)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise BadDimension(f"expected a square matrix, got shape {a.shape}")
    a = np.tril(a) + np.tril(a, -1).T
    a.setflags(write=False)
    return a


def _square(M):
    a = np.asarray(M, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise BadDimension(f"expected a square matrix, got shape {a.shape}")
    return np.ascontiguousarray(a)


def cholesky(M, tol=DEFAULT_PD_TOL):
    """Lower-triangular L with positive diagonal and L @ L.T == M.

    Raises NotPositiveDefinite when a pivot falls to ``tol * max(diag(M))``
    or below.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    a = _square(M)
    L = np.zeros_like(a)
    if not nb_cholesky(a, L, tol):
        raise NotPositiveDefinite("matrix is not positive definite")
    return L


def inverse_spd(M, tol=DEFAULT_PD_TOL):
    L = cholesky(M, tol)
    out = np.empty_like(L)
    nb_chol_inverse(L, out)
    return out


def solve_spd(M, b, tol=DEFAULT_PD_TOL):
    L = cholesky(M, tol)
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        out = np.empty_like(b)
        nb_chol_solve(L, np.ascontiguousarray(b), out)
        return out
    cols = [solve_spd_factored(L, b[:, j]) for j in range(b.shape[1])]
    return np.column_stack(cols)


def solve_spd_factored(L, b):
    out = np.empty(L.shape[0])
    nb_chol_solve(L, np.ascontiguousarray(b, dtype=float), out)
    return out


def log_det_spd(M, tol=DEFAULT_PD_TOL):
    """log|M| as twice the summed log-diagonal of the Cholesky factor."""
    return float(nb_chol_logdet(cholesky(M, tol)))


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


def make_rng(seed, *keys):
    """Philox generator for the stream named by (seed, *keys).

    Distinct key tuples give statistically independent streams, which is how
    bootstrap replicates and simulation repetitions get their own generators
    regardless of execution order.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *keys):
    """A 63-bit integer seed for the sub-stream (seed, *keys)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def standard_normal(rng, size):
    """Standard normal draws by inverse-CDF of uniforms on [2^-1022, 1)."""
    u = rng.random(size)
    np.maximum(u, np.finfo(float).tiny, out=u)
    return ndtri(u)


def sample_mvn(mean, cov, rng):
    """One draw of N(mean, cov) as mean + L z."""
    mean = np.asarray(mean, dtype=float)
    L = cholesky(cov)
    if L.shape[0] != mean.shape[0]:
        raise BadDimension("mean and covariance dimensions differ")
    z = standard_normal(rng, mean.shape[0])
    return mean + L @ z

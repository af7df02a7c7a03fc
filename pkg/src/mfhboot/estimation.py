"""Maximum-likelihood fitting of (beta, psi).

The log-likelihood, with the additive -ms/2 log(2 pi) dropped, is

    l(beta, psi) = -1/2 sum_i log|A + D_i|
                   -1/2 sum_i (y_i - X_i beta)^T (A + D_i)^{-1} (y_i - X_i beta).

Unstructured A is fitted by EM with the random effects v_i as missing data;
structured (time-series) families by Nelder-Mead on the profile likelihood,
with beta replaced by its GLS value at every candidate psi.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.optimize import minimize

from .errors import (BadDimension, DegenerateVariance, InfeasiblePsi, NotPositiveDefinite,
                     RankDeficientDesign)
from .linalg import (DEFAULT_PD_TOL, nb_chol_inverse, nb_chol_logdet,
                     nb_chol_solve, nb_cholesky, solve_spd)
from .model import (CovarianceKind, Dataset, ParamVector, covariance_matrix,
                    psi_from_covariance)

# relative eigenvalue level below which a fitted A counts as singular
DEGENERATE_REL_EIG = 1e-8
_DESIGN_TOL = 1e-12
# eigenvalue floor, relative to the largest, for A on the singular boundary
_BOUNDARY_FLOOR = 1e-10
_FACE_CHECK_EVERY = 50
_MAX_SCORING_STEPS = 20
_SCORING_RTOL = 1e-13
_NEAR_SINGULAR = 1e-3  # lambda_min / lambda_max below which EM gets scoring help

_OK, _NOT_PD, _RANK = 0, 1, 2


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    max_iter: int = 1000
    init: ParamVector = None
    n_starts: int = 5
    accelerate: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")


@dataclass(frozen=True)
class FittedModel:
    params: ParamVector
    loglik: float
    iterations: int
    converged: bool
    loglik_trace: tuple
    A_hat: np.ndarray
    boundary_flag: bool
    method: str = "em"
    kind: CovarianceKind = CovarianceKind.UNSTRUCTURED
    notes: tuple = field(default=())

    @property
    def beta(self):
        return self.params.beta

    @property
    def psi(self):
        return self.params.psi


# ---------------------------------------------------------------------------
# numba kernels over stacked arrays
# ---------------------------------------------------------------------------


@njit(cache=True)
def _residual(y_i, X_i, beta, out):
    s, p = X_i.shape
    for a in range(s):
        t = y_i[a]
        for k in range(p):
            t -= X_i[a, k] * beta[k]
        out[a] = t


@njit(cache=True)
def _add_into(A, B, out):
    s = A.shape[0]
    for a in range(s):
        for b in range(s):
            out[a, b] = A[a, b] + B[a, b]


@njit(cache=True)
def _loglik_kernel(y, X, D, beta, A):
    m, s = y.shape
    S = np.empty((s, s))
    L = np.empty((s, s))
    r = np.empty(s)
    w = np.empty(s)
    ll = 0.0
    for i in range(m):
        _add_into(A, D[i], S)
        if not nb_cholesky(S, L, DEFAULT_PD_TOL):
            return -np.inf, _NOT_PD
        _residual(y[i], X[i], beta, r)
        nb_chol_solve(L, r, w)
        q = 0.0
        for a in range(s):
            q += r[a] * w[a]
        ll -= 0.5 * (nb_chol_logdet(L) + q)
    return ll, _OK


@njit(cache=True)
def _direction_kernel(y, X, D, beta, A, u):
    """d l / dt at t = 0 along A + t u u^T, or nan if some A + D_i is not PD."""
    m, s = y.shape
    S = np.empty((s, s))
    L = np.empty((s, s))
    r = np.empty(s)
    w = np.empty(s)
    g = 0.0
    for i in range(m):
        _add_into(A, D[i], S)
        if not nb_cholesky(S, L, DEFAULT_PD_TOL):
            return np.nan
        _residual(y[i], X[i], beta, r)
        nb_chol_solve(L, r, w)
        ur = 0.0
        for a in range(s):
            ur += u[a] * w[a]
        nb_chol_solve(L, u, w)
        uu = 0.0
        for a in range(s):
            uu += u[a] * w[a]
        g += 0.5 * (ur * ur - uu)
    return g


@njit(cache=True)
def _scoring_kernel(y, X, D, beta, A, M, G):
    """Fisher-scoring system for A at (beta, A).

    G = sum_i (w_i w_i^T - S_i^-1) with w_i = S_i^-1 r_i is twice the score in
    A, and M = sum_i S_i^-1 (x) S_i^-1 its expected information, so the
    scoring step Delta solves M vec(Delta) = vec(G).
    """
    m, s = y.shape
    S = np.empty((s, s))
    L = np.empty((s, s))
    Si = np.empty((s, s))
    r = np.empty(s)
    w = np.empty(s)
    M[:, :] = 0.0
    G[:, :] = 0.0
    for i in range(m):
        _add_into(A, D[i], S)
        if not nb_cholesky(S, L, DEFAULT_PD_TOL):
            return False
        _residual(y[i], X[i], beta, r)
        nb_chol_solve(L, r, w)
        nb_chol_inverse(L, Si)
        for a in range(s):
            for b in range(s):
                G[a, b] += w[a] * w[b] - Si[a, b]
                for c in range(s):
                    for d in range(s):
                        M[a * s + b, c * s + d] += Si[a, c] * Si[b, d]
    return True


@njit(cache=True)
def _gls_kernel(y, X, D, A, beta_out):
    m, s = y.shape
    p = X.shape[2]
    S = np.empty((s, s))
    L = np.empty((s, s))
    Sinv = np.empty((s, s))
    XtS = np.empty((p, s))
    XtSX = np.zeros((p, p))
    XtSy = np.zeros(p)
    for i in range(m):
        _add_into(A, D[i], S)
        if not nb_cholesky(S, L, DEFAULT_PD_TOL):
            return _NOT_PD
        nb_chol_inverse(L, Sinv)
        Xi = X[i]
        for k in range(p):
            for b in range(s):
                t = 0.0
                for a in range(s):
                    t += Xi[a, k] * Sinv[a, b]
                XtS[k, b] = t
        for k in range(p):
            t = 0.0
            for b in range(s):
                t += XtS[k, b] * y[i, b]
            XtSy[k] += t
            for l in range(k + 1):
                t = 0.0
                for b in range(s):
                    t += XtS[k, b] * Xi[b, l]
                XtSX[k, l] += t
    for k in range(p):
        for l in range(k):
            XtSX[l, k] = XtSX[k, l]
    Lp = np.empty((p, p))
    if not nb_cholesky(XtSX, Lp, _DESIGN_TOL):
        return _RANK
    nb_chol_solve(Lp, XtSy, beta_out)
    return _OK


@njit(cache=True)
def _em_map(y, X, D, Dinv, LxDx, beta, A, beta_out, A_out):
    """One EM update (beta, A) -> (beta_out, A_out).

    Returns (log-likelihood at the input, ok).  E-step: v_i | y_i has mean
    A S_i^-1 r_i and covariance A - A S_i^-1 A with S_i = A + D_i.  M-step:
    A <- mean of (vt vt^T + V), beta <- weighted least squares of y - vt on X
    with weights D_i^-1.
    """
    m, s = y.shape
    p = X.shape[2]
    S = np.empty((s, s))
    L = np.empty((s, s))
    r = np.empty(s)
    w = np.empty(s)
    col = np.empty(s)
    SinvA = np.empty((s, s))
    vt = np.empty(s)
    z = np.empty(s)
    Dz = np.empty(s)
    rhs = np.zeros(p)
    A_out[:, :] = 0.0
    ll = 0.0
    for i in range(m):
        _add_into(A, D[i], S)
        if not nb_cholesky(S, L, DEFAULT_PD_TOL):
            return -np.inf, False
        _residual(y[i], X[i], beta, r)
        nb_chol_solve(L, r, w)
        q = 0.0
        for a in range(s):
            q += r[a] * w[a]
        ll -= 0.5 * (nb_chol_logdet(L) + q)
        for c in range(s):
            nb_chol_solve(L, A[c], col)  # A symmetric: row c == column c
            for a in range(s):
                SinvA[a, c] = col[a]
        for a in range(s):
            t = 0.0
            for b in range(s):
                t += A[a, b] * w[b]
            vt[a] = t
        for a in range(s):
            for b in range(a + 1):
                t = 0.0
                for k in range(s):
                    t += A[a, k] * SinvA[k, b]
                A_out[a, b] += A[a, b] - t + vt[a] * vt[b]
        for a in range(s):
            z[a] = y[i, a] - vt[a]
        for a in range(s):
            t = 0.0
            for b in range(s):
                t += Dinv[i, a, b] * z[b]
            Dz[a] = t
        for k in range(p):
            t = 0.0
            for a in range(s):
                t += X[i, a, k] * Dz[a]
            rhs[k] += t
    for a in range(s):
        for b in range(a + 1):
            A_out[a, b] = A_out[a, b] / m
            A_out[b, a] = A_out[a, b]
    nb_chol_solve(LxDx, rhs, beta_out)
    return ll, True


@njit(cache=True)
def _em_kernel(y, X, D, Dinv, LxDx, beta, A, tol, max_iter, trace, accelerate):
    """EM iterations in place on (beta, A).

    trace[t] receives the log-likelihood at the t-th accepted iterate.  With
    ``accelerate`` each cycle applies the SQUAREM extrapolation (step length
    -|r|/|v|, clamped to at most -1) to two EM updates and falls back to the
    second plain update whenever the extrapolated point is not positive
    definite or has lower likelihood than the cycle start, so the trace never
    decreases.  Returns (n_trace, EM map evaluations, converged, status).
    """
    s = A.shape[0]
    p = beta.shape[0]
    b1 = np.empty(p)
    A1 = np.empty((s, s))
    b2 = np.empty(p)
    A2 = np.empty((s, s))
    bx = np.empty(p)
    Ax = np.empty((s, s))
    Lx = np.empty((s, s))
    m = y.shape[0]
    n_eval = 0
    n_trace = 0
    ll_prev = 0.0
    while True:
        ll0, ok = _em_map(y, X, D, Dinv, LxDx, beta, A, b1, A1)
        n_eval += 1
        if not ok:
            return n_trace, n_eval, False, _NOT_PD
        trace[n_trace] = ll0
        n_trace += 1
        if n_trace > 1 and abs(ll0 - ll_prev) <= tol * m:
            return n_trace, n_eval, True, _OK
        if n_eval > max_iter or n_trace >= trace.shape[0]:
            return n_trace, n_eval, False, _OK
        ll_prev = ll0
        if not accelerate:
            beta[:] = b1
            A[:, :] = A1
            continue
        ll1, ok = _em_map(y, X, D, Dinv, LxDx, b1, A1, b2, A2)
        n_eval += 1
        if not ok:
            return n_trace, n_eval, False, _NOT_PD
        # r = theta1 - theta0, v = theta2 - 2 theta1 + theta0
        rr = 0.0
        vv = 0.0
        for k in range(p):
            rk = b1[k] - beta[k]
            vk = b2[k] - 2.0 * b1[k] + beta[k]
            rr += rk * rk
            vv += vk * vk
        for a in range(s):
            for b in range(a + 1):
                rk = A1[a, b] - A[a, b]
                vk = A2[a, b] - 2.0 * A1[a, b] + A[a, b]
                rr += rk * rk
                vv += vk * vk
        accepted = False
        if vv > 0.0:
            alpha = -math.sqrt(rr / vv)
            if alpha > -1.0:
                alpha = -1.0
            for k in range(p):
                bx[k] = beta[k] - 2.0 * alpha * (b1[k] - beta[k]) \
                    + alpha * alpha * (b2[k] - 2.0 * b1[k] + beta[k])
            for a in range(s):
                for b in range(a + 1):
                    Ax[a, b] = A[a, b] - 2.0 * alpha * (A1[a, b] - A[a, b]) \
                        + alpha * alpha * (A2[a, b] - 2.0 * A1[a, b] + A[a, b])
                    Ax[b, a] = Ax[a, b]
            if nb_cholesky(Ax, Lx, DEFAULT_PD_TOL):
                llx, ok = _em_map(y, X, D, Dinv, LxDx, bx, Ax, beta, A)
                n_eval += 1
                # on success (beta, A) now holds F(theta'), whose likelihood
                # is at least llx
                accepted = ok and llx >= ll0
        if not accepted:
            beta[:] = b2
            A[:, :] = A2


@njit(cache=True)
def _dinv_kernel(D, X, Dinv, XtDinvX):
    m, s, _ = D.shape
    p = X.shape[2]
    L = np.empty((s, s))
    XtDinvX[:, :] = 0.0
    for i in range(m):
        if not nb_cholesky(D[i], L, DEFAULT_PD_TOL):
            return i
        nb_chol_inverse(L, Dinv[i])
        for k in range(p):
            for l in range(p):
                t = 0.0
                for a in range(s):
                    for b in range(s):
                        t += X[i, a, k] * Dinv[i, a, b] * X[i, b, l]
                XtDinvX[k, l] += t
    return -1


# ---------------------------------------------------------------------------
# array helpers
# ---------------------------------------------------------------------------


def _as_sym(A):
    A = np.array(A, dtype=float)
    return np.ascontiguousarray(0.5 * (A + A.T))


def _loglik_arrays(ds, beta, A):
    ll, status = _loglik_kernel(ds.y, ds.X, ds.D, np.ascontiguousarray(beta, float),
                                _as_sym(A))
    if status != _OK:
        raise NotPositiveDefinite("A + D_i is not positive definite")
    return ll


def _gls_arrays(ds, A):
    beta = np.empty(ds.p)
    status = _gls_kernel(ds.y, ds.X, ds.D, _as_sym(A), beta)
    if status == _NOT_PD:
        raise NotPositiveDefinite("A + D_i is not positive definite")
    if status == _RANK:
        raise RankDeficientDesign("X^T Sigma^{-1} X is singular: design is rank deficient")
    return beta


def _em_precompute(ds):
    cache = ds._cache
    if "em" not in cache:
        Dinv = np.empty_like(ds.D)
        XtDinvX = np.zeros((ds.p, ds.p))
        bad = _dinv_kernel(ds.D, ds.X, Dinv, XtDinvX)
        if bad >= 0:
            raise NotPositiveDefinite(
                f"sampling covariance of area {ds.area_ids[bad]!r} is not positive definite")
        L = np.zeros((ds.p, ds.p))
        if not nb_cholesky(XtDinvX, L, _DESIGN_TOL):
            raise RankDeficientDesign("stacked X is rank deficient")
        cache["em"] = (Dinv, L)
    return cache["em"]


def _normalized(ds):
    """(kappa, ds / kappa) with kappa^2 the mean sampling variance.

    Fitting in these units makes the iterates, and so the stopping decisions,
    the same whatever units y is measured in.  The rescaled design is cached
    and shared by every dataset derived through ``with_y``.
    """
    cache = ds._cache
    if "normalized" not in cache:
        kappa = math.sqrt(float(np.mean(np.trace(ds.D, axis1=1, axis2=2))) / ds.s)
        cache["normalized"] = (kappa, Dataset(ds.area_ids, ds.y / kappa, ds.D / kappa ** 2,
                                              ds.X))
    kappa, base = cache["normalized"]
    return kappa, base.with_y(ds.y / kappa)


def _profile_loglik(ds, A):
    beta = _gls_arrays(ds, A)
    return _loglik_arrays(ds, beta, A), beta


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def log_likelihood(ds, cm, phi):
    """Log-likelihood at phi = (beta, psi), additive constant omitted."""
    A = covariance_matrix(cm, phi.psi)
    beta = np.asarray(phi.beta, dtype=float)
    if beta.shape != (ds.p,) or cm.s != ds.s:
        raise BadDimension("parameter dimensions do not match the dataset")
    return float(_loglik_arrays(ds, beta, A))


def gls_beta(ds, A):
    """GLS estimate of beta with Sigma = diag(A + D_1, ..., A + D_m)."""
    return _gls_arrays(ds, A)


def e_step(A, D_i, residual):
    """Conditional mean and covariance of v_i given y_i.

    Returns (A (A + D_i)^{-1} r, A - A (A + D_i)^{-1} A).  A may sit on the
    singular boundary; only A + D_i has to be positive definite.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = A + np.atleast_2d(D_i)
    SinvA = solve_spd(S, A)
    v = A @ solve_spd(S, np.atleast_1d(np.asarray(residual, float)))
    V = A - A @ SinvA
    return v, 0.5 * (V + V.T)


def _default_start(ds):
    X = ds.stacked_X()
    beta, *_ = np.linalg.lstsq(X, ds.y.ravel(), rcond=None)
    r = ds.y - ds.X @ beta
    M = r.T @ r / ds.m - ds.D.mean(axis=0)
    eps = 1e-6 * np.mean(np.diag(ds.D.mean(axis=0)))
    lam, Q = np.linalg.eigh(0.5 * (M + M.T))
    A = (Q * np.maximum(lam, eps)) @ Q.T
    return beta, _as_sym(A)


def _boundary_projection(ds, A, ll):
    """Face point of the singular boundary that beats (A, ll), or None.

    Drops the smallest eigen-component of A, giving A0, and re-solves beta by
    GLS.  The face point is returned as (A0, beta0, ll0) when its profile
    likelihood is at least ``ll`` and the likelihood does not increase when
    stepping back into the interior along u u^T (u the dropped eigenvector):
    the first-order condition for a maximum on the boundary.
    """
    lam, Q = np.linalg.eigh(A)
    u = Q[:, 0]
    A0 = _as_sym(A - lam[0] * np.outer(u, u))
    try:
        ll0, beta0 = _profile_loglik(ds, A0)
    except (NotPositiveDefinite, RankDeficientDesign):
        return None
    if not ll0 >= ll:
        return None
    grad = _direction_kernel(ds.y, ds.X, ds.D, beta0, A0, np.ascontiguousarray(u))
    if not grad <= 0.0:
        return None
    return A0, beta0, ll0


def _boundary_is_optimal(ds, A, ll):
    return _boundary_projection(ds, A, ll) is not None


def _clip_to_floor(A):
    lam, Q = np.linalg.eigh(A)
    floor = _BOUNDARY_FLOOR * max(lam[-1], 1e-300)
    return _as_sym((Q * np.maximum(lam, floor)) @ Q.T)


def _scoring_refine(ds, beta, A, ll, trace, project=False):
    """Fisher-scoring steps in A, with beta at its GLS value.

    EM's likelihood-based stopping leaves parameters accurate only to about
    the square root of the tolerance where the likelihood is flat; a few
    scoring steps bring them to working precision.  Steps are halved until
    the likelihood does not decrease beyond rounding; the trace only records
    non-decreasing values.  With ``project`` a step leaving the PD cone is
    clipped back to the boundary floor instead, which lets the null direction
    of a near-singular A rotate (EM keeps it fixed).
    """
    s = ds.s
    M = np.empty((s * s, s * s))
    G = np.empty((s, s))
    for _ in range(_MAX_SCORING_STEPS):
        if not _scoring_kernel(ds.y, ds.X, ds.D, beta, A, M, G):
            break
        try:
            delta = solve_spd(M, G.ravel()).reshape(s, s)
        except NotPositiveDefinite:
            break
        delta = 0.5 * (delta + delta.T)
        step, accepted = 1.0, False
        while step >= 1e-3:
            A_new = _as_sym(A + step * delta)
            pd = nb_cholesky(A_new, np.empty((s, s)), DEFAULT_PD_TOL)
            if project and not pd:
                A_new, pd = _clip_to_floor(A_new), True
            if pd:
                try:
                    ll_new, beta_new = _profile_loglik(ds, A_new)
                except NotPositiveDefinite:
                    ll_new = -np.inf
                # a full step may lose a rounding-level amount of likelihood
                slack = 1e-13 * (abs(ll) + 1.0) if step == 1.0 else 0.0
                if ll_new >= ll - slack:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            break
        change = np.abs(A_new - A).max() / np.abs(A).max()
        A, beta, ll = A_new, beta_new, ll_new
        if ll >= trace[-1]:
            trace.append(ll)
        if change <= _SCORING_RTOL:
            break
    return beta, A, ll


def is_degenerate(A):
    lam = np.linalg.eigvalsh(A)
    scale = np.trace(A) / A.shape[0]
    return not lam[0] > DEGENERATE_REL_EIG * scale


def em_fit(ds, cm, opts=None):
    """ML fit of the unstructured model by EM.

    Iterates until the log-likelihood changes by at most ``tol * m`` between
    recorded iterates or ``max_iter`` EM updates have been made (SQUAREM
    extrapolated unless ``opts.accelerate`` is off), then re-solves beta by
    GLS at the final A.  A fit whose maximum lies on the singular boundary is
    returned with ``boundary_flag`` set rather than raised.
    """
    opts = opts or FitOptions()
    if cm.kind is not CovarianceKind.UNSTRUCTURED:
        raise ValueError("EM is only defined for the unstructured model")
    if cm.s != ds.s:
        raise BadDimension(f"model has s={cm.s}, data has s={ds.s}")
    kappa, dsn = _normalized(ds)
    Dinv, LxDx = _em_precompute(dsn)
    if opts.init is not None:
        beta = np.array(opts.init.beta, dtype=float) / kappa
        A = _as_sym(covariance_matrix(cm, opts.init.psi)) / kappa ** 2
    else:
        beta, A = _default_start(dsn)
    buf = np.empty(opts.max_iter + 2)
    trace, n_iter, converged = [], 0, False
    while True:
        chunk = max(1, min(opts.max_iter - n_iter, _FACE_CHECK_EVERY))
        n_trace, n_eval, converged, status = _em_kernel(
            dsn.y, dsn.X, dsn.D, Dinv, LxDx, beta, A, opts.tol, chunk, buf, opts.accelerate)
        if status != _OK:
            raise NotPositiveDefinite("A + D_i lost positive definiteness during EM")
        new = buf[:n_trace]
        if trace and n_trace and new[0] == trace[-1]:
            new = new[1:]  # a resumed run re-evaluates its starting point
        trace.extend(new)
        n_iter += n_eval
        if converged or n_iter >= opts.max_iter:
            break
        # EM approaches a maximum on the singular boundary only harmonically;
        # jump to the face when that is where the likelihood is heading
        face = _boundary_projection(dsn, A, trace[-1])
        if face is not None:
            A[:, :], beta[:] = face[0], face[1]
            trace.append(face[2])
        else:
            lam = np.linalg.eigvalsh(A)
            if lam[0] < _NEAR_SINGULAR * lam[-1]:
                # EM's steps shrink with the small eigenvalue and never rotate
                # its eigenvector; projected scoring steps do both
                b_s, A_s, _ = _scoring_refine(dsn, beta.copy(), _as_sym(A), trace[-1], trace,
                                              project=True)
                A[:, :], beta[:] = A_s, b_s

    A = _as_sym(A)
    if converged and nb_cholesky(A, np.empty_like(A), DEFAULT_PD_TOL) \
            and not is_degenerate(A):
        ll_em, beta = _profile_loglik(dsn, A)
        if ll_em >= trace[-1]:
            trace.append(ll_em)
        beta, A, _ = _scoring_refine(dsn, beta, A, ll_em, trace)
    A = _as_sym(A * kappa ** 2)
    shift = ds.m * ds.s * math.log(kappa)  # log-likelihood offset between units
    trace = [t - shift for t in trace]
    notes = []
    try:
        psi = psi_from_covariance(A)
    except NotPositiveDefinite:
        # on the boundary: represent A by a PD matrix within 1e-10 relative
        lam, Q = np.linalg.eigh(A)
        floor = _BOUNDARY_FLOOR * max(lam[-1], 1e-300)
        psi = psi_from_covariance(_as_sym((Q * np.maximum(lam, floor)) @ Q.T))
        notes.append("A floored to stay positive definite")
    A_hat = covariance_matrix(cm, psi)
    ll, beta = _profile_loglik(ds, A_hat)
    if ll >= trace[-1]:
        trace.append(ll)
    boundary = is_degenerate(A_hat) or _boundary_is_optimal(ds, A_hat, ll)
    if not converged:
        notes.append(f"EM stopped after {n_iter} iterations without converging")
    return FittedModel(ParamVector(beta, psi), float(ll), int(n_iter), bool(converged),
                       tuple(float(t) for t in trace), A_hat, bool(boundary), "em",
                       cm.kind, tuple(notes))


# ---------------------------------------------------------------------------
# structured families
# ---------------------------------------------------------------------------


def _to_free(cm, psi):
    psi = np.asarray(psi, dtype=float)
    if cm.kind is CovarianceKind.STATIONARY_TS:
        return np.array([np.log(psi[0]), np.arctanh(psi[1]), np.log(psi[2])])
    return np.log(psi)


def _from_free(cm, u):
    if cm.kind is CovarianceKind.STATIONARY_TS:
        return np.array([np.exp(u[0]), np.tanh(u[1]), np.exp(u[2])])
    return np.exp(u)


def _scale_psi(cm, psi, factor):
    """Structured psi for A multiplied by ``factor`` (variances scale, rho does not)."""
    psi = np.array(psi, dtype=float)
    if cm.kind is CovarianceKind.STATIONARY_TS:
        psi[[0, 2]] *= factor
    else:
        psi *= factor
    return psi


def _structured_starts(ds, cm, n):
    _, A0 = _default_start(ds)
    c = max(float(np.mean(np.diag(A0))), 0.1 * float(np.mean(np.diagonal(ds.D, axis1=1, axis2=2))))
    s = cm.s
    if cm.kind is CovarianceKind.STATIONARY_TS:
        grid = [(0.5, 0.0, 0.5), (0.2, 0.5, 0.6), (0.8, -0.3, 0.2), (0.1, 0.8, 0.3),
                (0.5, -0.7, 0.25), (0.05, 0.3, 0.9), (0.9, 0.6, 0.05)]
        starts = [np.array([a * c, rho, b * c * (1 - rho ** 2)]) for a, rho, b in grid]
    else:
        grid = [(0.5, 0.5), (0.9, 0.1), (0.1, 0.9), (0.3, 2.0), (0.01, 1.0),
                (1.0, 0.01), (0.5, 4.0)]
        starts = [np.array([a * c, b * c / s]) for a, b in grid]
    return starts[:n]


def fit_structured(ds, cm, opts=None):
    """ML fit of a time-series covariance family by profile-likelihood simplex search.

    Variances are searched on the log scale and rho on the atanh scale.  The
    search is run from ``n_starts`` fixed starting points (plus ``opts.init``
    when given) and the best end point wins.
    """
    opts = opts or FitOptions()
    if not cm.structured:
        raise ValueError("use em_fit for the unstructured model")
    if cm.s != ds.s:
        raise BadDimension(f"model has s={cm.s}, data has s={ds.s}")
    kappa, dsn = _normalized(ds)
    _em_precompute(dsn)  # surfaces rank and D problems up front

    def objective(u):
        try:
            A = covariance_matrix(cm, _from_free(cm, u))
            ll, _ = _profile_loglik(dsn, A)
        except (InfeasiblePsi, NotPositiveDefinite):
            return np.inf
        return -ll if np.isfinite(ll) else np.inf

    starts = _structured_starts(dsn, cm, opts.n_starts)
    trace = []
    if opts.init is not None:
        starts = [_scale_psi(cm, opts.init.psi, kappa ** -2)] + starts
        trace.append(log_likelihood(ds, cm, opts.init))
    fatol = opts.tol * ds.m
    best, iterations, converged = None, 0, False
    for psi0 in starts:
        u = _to_free(cm, psi0)
        for _ in range(2):  # a restart guards against a collapsed simplex
            res = minimize(objective, u, method="Nelder-Mead",
                           options={"xatol": 1e-9, "fatol": fatol,
                                    "maxiter": opts.max_iter, "maxfev": 4 * opts.max_iter})
            iterations += int(res.nit)
            u = res.x
        if best is None or res.fun < best.fun:
            best, converged = res, bool(res.success)
    psi = _scale_psi(cm, _from_free(cm, best.x), kappa ** 2)
    A_hat = covariance_matrix(cm, psi)
    ll, beta = _profile_loglik(ds, A_hat)
    trace.append(ll)
    notes = () if converged else ("simplex search hit its iteration limit",)
    return FittedModel(ParamVector(beta, psi), float(ll), iterations, converged,
                       tuple(float(t) for t in trace), A_hat, is_degenerate(A_hat),
                       "simplex", cm.kind, notes)


def fit_model(ds, cm, opts=None, init=None):
    """Fit with the method appropriate to the covariance family.

    ``init`` (a ParamVector) overrides ``opts.init``; the bootstrap uses it to
    warm-start refits from the original estimate.
    """
    opts = opts or FitOptions()
    if init is not None:
        opts = replace(opts, init=init)
    if cm.structured:
        return fit_structured(ds, cm, opts)
    return em_fit(ds, cm, opts)


def require_nondegenerate(fitted, what="random-effects covariance"):
    if fitted.boundary_flag:
        raise DegenerateVariance(
            f"estimated {what} is on the singular boundary; "
            "no interval can be built from this fit")
    if not fitted.converged:
        warnings.warn("fit did not converge; proceeding with the last iterate",
                      RuntimeWarning, stacklevel=2)

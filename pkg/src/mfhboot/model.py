"""Data containers, covariance families and dataset checks.

The model for area i = 1..m is

    y_i = theta_i + e_i,   theta_i = X_i beta + v_i,
    e_i ~ N(0, D_i) with D_i known,  v_i ~ N(0, A(psi)),

with y_i, theta_i of length s and X_i of shape (s, p).
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import BadDimension, InfeasiblePsi
from .linalg import cholesky, sym_matrix


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AreaData:
    area_id: str
    y: np.ndarray
    D: np.ndarray
    X: np.ndarray


class Dataset:
    """Stacked per-area data: y (m, s), D (m, s, s), X (m, s, p).

    Arrays are read-only.  Quantities that depend only on D and X (D_i^{-1},
    X_i^T D_i^{-1} X_i) are computed once and shared with datasets derived
    through :meth:`with_y`, which is how bootstrap replicates are built.
    """

    __slots__ = ("area_ids", "y", "D", "X", "_cache", "validation")

    def __init__(self, area_ids, y, D, X):
        y = np.asarray(y, dtype=float)
        D = np.asarray(D, dtype=float)
        X = np.asarray(X, dtype=float)
        if y.ndim != 2:
            raise BadDimension(f"y must be (m, s), got {y.shape}")
        m, s = y.shape
        if D.shape != (m, s, s):
            raise BadDimension(f"D must be ({m}, {s}, {s}), got {D.shape}")
        if X.ndim != 3 or X.shape[:2] != (m, s):
            raise BadDimension(f"X must be ({m}, {s}, p), got {X.shape}")
        if area_ids is None:
            area_ids = [str(i + 1) for i in range(m)]
        area_ids = tuple(str(a) for a in area_ids)
        if len(area_ids) != m:
            raise BadDimension("one area id per area required")
        # symmetry imposed structurally from the lower triangle
        low = np.tril(D)
        D = low + np.swapaxes(np.tril(D, -1), 1, 2)
        self.area_ids = area_ids
        self.y = _frozen(y)
        self.D = _frozen(D)
        self.X = _frozen(X)
        self._cache = {}
        self.validation = None

    @classmethod
    def from_areas(cls, areas):
        areas = list(areas)
        if not areas:
            raise BadDimension("dataset needs at least one area")
        y = np.array([np.atleast_1d(np.asarray(a.y, float)) for a in areas])
        D = np.array([np.atleast_2d(np.asarray(a.D, float)) for a in areas])
        X = np.array([np.atleast_2d(np.asarray(a.X, float)) for a in areas])
        return cls([a.area_id for a in areas], y, D, X)

    @property
    def m(self):
        return self.y.shape[0]

    @property
    def s(self):
        return self.y.shape[1]

    @property
    def p(self):
        return self.X.shape[2]

    @property
    def areas(self):
        return [AreaData(a, self.y[i], self.D[i], self.X[i])
                for i, a in enumerate(self.area_ids)]

    def with_y(self, y):
        """Same areas, D and X with new survey estimates."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise BadDimension(f"y must have shape {self.y.shape}")
        new = object.__new__(Dataset)
        new.area_ids = self.area_ids
        new.y = _frozen(y)
        new.D = self.D
        new.X = self.X
        new._cache = self._cache
        new.validation = self.validation
        return new

    def scaled(self, gamma):
        """Units of the measured variable changed by ``gamma``: y -> gamma y, D -> gamma^2 D.

        X is unchanged, so beta scales by gamma and A by gamma^2.
        """
        return Dataset(self.area_ids, gamma * self.y, gamma ** 2 * self.D, self.X)

    def stacked_X(self):
        return self.X.reshape(self.m * self.s, self.p)

    def __repr__(self):
        return f"Dataset(m={self.m}, s={self.s}, p={self.p})"


class CovarianceKind(enum.Enum):
    UNSTRUCTURED = "unstructured"
    STATIONARY_TS = "stationary"
    RANDOM_WALK_TS = "randomwalk"


@dataclass(frozen=True)
class CovarianceModel:
    kind: CovarianceKind
    s: int

    def __post_init__(self):
        object.__setattr__(self, "kind", CovarianceKind(self.kind))
        if self.s < 1:
            raise BadDimension("s must be positive")

    @property
    def k(self):
        if self.kind is CovarianceKind.UNSTRUCTURED:
            return self.s * (self.s + 1) // 2
        if self.kind is CovarianceKind.STATIONARY_TS:
            return 3
        return 2

    @property
    def structured(self):
        return self.kind is not CovarianceKind.UNSTRUCTURED


@dataclass(frozen=True)
class ParamVector:
    beta: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(np.atleast_1d(self.beta)))
        object.__setattr__(self, "psi", _frozen(np.atleast_1d(self.psi)))


@dataclass(frozen=True)
class LinearTarget:
    """Weights c of length m*s defining T = c^T theta (area-major order)."""

    c: np.ndarray

    def __post_init__(self):
        c = _frozen(np.ravel(self.c))
        if not np.any(c != 0):
            raise BadDimension("target weights must not all be zero")
        object.__setattr__(self, "c", c)

    @classmethod
    def from_triples(cls, m, s, triples):
        """Build from (area index, component index, weight), 0-based."""
        c = np.zeros(m * s)
        for i, j, w in triples:
            if not (0 <= i < m and 0 <= j < s):
                raise BadDimension(f"target entry ({i}, {j}) outside {m}x{s}")
            c[i * s + j] += w
        return cls(c)

    @classmethod
    def unit(cls, m, s, area, component):
        return cls.from_triples(m, s, [(area, component, 1.0)])

    def blocks(self, s):
        return self.c.reshape(-1, s)

    def unit_index(self, s):
        """(area, component) if this is a single unit selector, else None."""
        nz = np.flatnonzero(self.c)
        if len(nz) == 1 and self.c[nz[0]] == 1.0:
            return divmod(int(nz[0]), s)
        return None


# ---------------------------------------------------------------------------
# covariance families
# ---------------------------------------------------------------------------


def _tril_indices_rowmajor(s):
    return [(i, j) for i in range(s) for j in range(i + 1)]


def covariance_matrix(cm, psi):
    """A(psi) for the given family.

    Unstructured: psi walks the lower triangle of a Cholesky factor row by
    row, (0,0), (1,0), (1,1), (2,0), ...; diagonal entries are stored as
    logs.  Stationary: psi = (sigma_v^2, rho, sigma_u^2) giving
    sigma_v^2 + sigma_u^2 rho^|t-t'| / (1 - rho^2).  Random walk:
    psi = (sigma_v^2, sigma_u^2) giving sigma_v^2 + sigma_u^2 min(t, t')
    with 1-based times.
    """
    psi = np.asarray(psi, dtype=float).ravel()
    if psi.shape[0] != cm.k:
        raise BadDimension(f"{cm.kind.value} model needs {cm.k} parameters, "
                           f"got {psi.shape[0]}")
    if not np.all(np.isfinite(psi)):
        raise InfeasiblePsi("psi must be finite")
    s = cm.s
    if cm.kind is CovarianceKind.UNSTRUCTURED:
        L = np.zeros((s, s))
        for value, (i, j) in zip(psi, _tril_indices_rowmajor(s)):
            L[i, j] = np.exp(value) if i == j else value
        return sym_matrix(L @ L.T)
    t = np.arange(1, s + 1)
    if cm.kind is CovarianceKind.STATIONARY_TS:
        sv, rho, su = psi
        if not (sv > 0 and su > 0 and -1 < rho < 1):
            raise InfeasiblePsi(f"stationary model needs sigma_v^2 > 0, |rho| < 1, "
                                f"sigma_u^2 > 0; got {tuple(psi)}")
        lag = np.abs(t[:, None] - t[None, :])
        return sym_matrix(sv + su * rho ** lag / (1.0 - rho ** 2))
    sv, su = psi
    if not (sv > 0 and su > 0):
        raise InfeasiblePsi(f"random-walk model needs positive variances; got {tuple(psi)}")
    return sym_matrix(sv + su * np.minimum(t[:, None], t[None, :]))


def psi_from_covariance(A):
    """Log-Cholesky coordinates of a PD matrix (inverse of the unstructured map)."""
    L = cholesky(A)
    s = L.shape[0]
    return np.array([np.log(L[i, j]) if i == j else L[i, j]
                     for i, j in _tril_indices_rowmajor(s)])


def marginal_variance(A, D_i):
    A = np.asarray(A, dtype=float)
    D_i = np.asarray(D_i, dtype=float)
    if A.shape != D_i.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise BadDimension(f"shapes {A.shape} and {D_i.shape} do not match")
    return sym_matrix(A + D_i)


def correlation_matrix(A):
    sd = np.sqrt(np.diag(A))
    R = A / np.outer(sd, sd)
    np.fill_diagonal(R, 1.0)
    return np.clip(R, -1.0, 1.0)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    level: str  # "pass", "warn" or "fail"
    check: str
    message: str


@dataclass
class ValidationReport:
    findings: list = field(default_factory=list)
    rank: int = 0
    d_min_eig: float = float("nan")
    d_max_eig: float = float("nan")
    d_ratio: float = float("nan")

    @property
    def ok(self):
        return all(f.level != "fail" for f in self.findings)

    @property
    def warnings(self):
        return [f for f in self.findings if f.level == "warn"]

    @property
    def failures(self):
        return [f for f in self.findings if f.level == "fail"]

    def add(self, level, check, message):
        self.findings.append(Finding(level, check, message))

    def format(self):
        lines = [f"{f.level.upper():5s} {f.check}: {f.message}" for f in self.findings]
        return "\n".join(lines)


def validate_dataset(ds, cm=None, ratio_threshold=1e6):
    """Check the regularity conditions the interval theory relies on.

    Never raises; every problem becomes a finding.
    """
    rep = ValidationReport()
    m, s, p = ds.m, ds.s, ds.p

    dims_ok = True
    if cm is not None and cm.s != s:
        rep.add("fail", "dimensions", f"covariance model has s={cm.s}, data has s={s}")
        dims_ok = False
    if m < p + 1:
        rep.add("fail", "dimensions", f"need m >= p + 1 areas, got m={m}, p={p}")
        dims_ok = False
    if dims_ok:
        rep.add("pass", "dimensions", f"m={m}, s={s}, p={p}")

    rep.rank = int(np.linalg.matrix_rank(ds.stacked_X()))
    if rep.rank < p:
        rep.add("fail", "design", f"stacked X is rank deficient (rank {rep.rank} < p={p})")
    else:
        rep.add("pass", "design", f"stacked X has full column rank {p}")

    eigs = np.linalg.eigvalsh(ds.D)
    lo, hi = eigs[:, 0], eigs[:, -1]
    bad = [ds.area_ids[i] for i in np.flatnonzero(lo <= 0)]
    rep.d_min_eig = float(lo.min())
    rep.d_max_eig = float(hi.max())
    if bad:
        rep.add("fail", "sampling covariance",
                f"not positive definite for areas {', '.join(bad)}")
    else:
        rep.d_ratio = rep.d_max_eig / rep.d_min_eig
        level = "warn" if rep.d_ratio > ratio_threshold else "pass"
        rep.add(level, "sampling covariance",
                f"eigenvalues in [{rep.d_min_eig:.6g}, {rep.d_max_eig:.6g}], "
                f"ratio {rep.d_ratio:.6g}")
    return rep

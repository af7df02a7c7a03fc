"""Dataset files, flat key=value configs and target specifications.

Dataset CSV layout, one row per area:

    area_id, y_1..y_s, d_1_1, d_1_2, .., d_s_s, x_1_1, .., x_s_p

with d_j_k the upper triangle of D_i (j <= k) and x_r_c the entries of X_i
row by row.  Floats are written with 17 significant digits so a write/parse
round trip is exact.
"""

import csv
import re

import numpy as np

from .errors import ConfigError, NotPositiveDefinite, ParseError, ValidationFailure
from .linalg import cholesky
from .model import Dataset, LinearTarget, validate_dataset


def dataset_header(s, p):
    cols = ["area_id"] + [f"y_{j}" for j in range(1, s + 1)]
    cols += [f"d_{j}_{k}" for j in range(1, s + 1) for k in range(j, s + 1)]
    cols += [f"x_{r}_{c}" for r in range(1, s + 1) for c in range(1, p + 1)]
    return cols


def _infer_dims(header):
    s = sum(1 for h in header if re.fullmatch(r"y_\d+", h))
    p = sum(1 for h in header if re.fullmatch(r"x_1_\d+", h))
    return s, p


def parse_dataset(path, s=None, p=None, validate=True):
    """Read a dataset CSV; (s, p) are inferred from the header unless given.

    The validation report is attached as ``ds.validation``.  Raises ParseError
    (with line and column) for malformed content and ValidationFailure when
    some D_i is not positive definite.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(n, r) for n, r in enumerate(rows, start=1) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty dataset file", line=1)
    line, header = rows[0]
    header = [h.strip() for h in header]
    s_in, p_in = _infer_dims(header)
    s = s_in if s is None else s
    p = p_in if p is None else p
    if s < 1 or p < 1:
        raise ParseError("header must contain y_j and x_r_c columns", line=line)
    expected = dataset_header(s, p)
    if header != expected:
        bad = next((k for k, (a, b) in enumerate(zip(header, expected)) if a != b),
                   min(len(header), len(expected)))
        raise ParseError(f"header does not match s={s}, p={p}: expected "
                         f"{','.join(expected)}", line=line, column=bad + 1)
    n_d = s * (s + 1) // 2
    ids, ys, Ds, Xs = [], [], [], []
    iu = np.triu_indices(s)
    for line, row in rows[1:]:
        if len(row) != len(expected):
            raise ParseError(f"expected {len(expected)} fields, got {len(row)}", line=line)
        vals = []
        for col, text in enumerate(row[1:], start=2):
            try:
                v = float(text)
            except ValueError:
                raise ParseError(f"not a number: {text.strip()!r}", line=line,
                                 column=col) from None
            if not np.isfinite(v):
                raise ParseError(f"not a finite number: {text.strip()!r}", line=line,
                                 column=col)
            vals.append(v)
        area = row[0].strip()
        y = np.array(vals[:s])
        D = np.zeros((s, s))
        D[iu] = vals[s:s + n_d]
        D = D + np.triu(D, 1).T
        try:
            cholesky(D)
        except NotPositiveDefinite:
            raise ValidationFailure(
                f"sampling covariance of area {area!r} (line {line}) is not "
                "positive definite") from None
        ids.append(area)
        ys.append(y)
        Ds.append(D)
        Xs.append(np.array(vals[s + n_d:]).reshape(s, p))
    if not ids:
        raise ParseError("dataset has no areas", line=line + 1)
    if len(set(ids)) != len(ids):
        raise ParseError("area ids must be unique")
    ds = Dataset(ids, np.array(ys), np.array(Ds), np.array(Xs))
    if validate:
        ds.validation = validate_dataset(ds)
    return ds


def format_float(x):
    return format(float(x), ".17g")


def write_dataset(ds, path):
    iu = np.triu_indices(ds.s)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_header(ds.s, ds.p))
        for i, area in enumerate(ds.area_ids):
            vals = [*ds.y[i], *ds.D[i][iu], *ds.X[i].ravel()]
            w.writerow([area, *(format_float(v) for v in vals)])


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


def read_config(path):
    """Flat ``key = value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    with open(path) as fh:
        for line, text in enumerate(fh, start=1):
            text = text.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError("expected key = value", line=line)
            key, value = (t.strip() for t in text.split("=", 1))
            if not key:
                raise ParseError("empty key", line=line)
            out[key.lower().replace("-", "_")] = value
    return out


def parse_vector(text):
    try:
        return np.array([float(t) for t in re.split(r"[,\s]+", text.strip()) if t])
    except ValueError:
        raise ConfigError(f"not a list of numbers: {text!r}") from None


def parse_matrix(text):
    """Rows separated by ';', entries by ',' or whitespace."""
    rows = [parse_vector(r) for r in text.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError(f"not a rectangular matrix: {text!r}")
    return np.array(rows)


def parse_target(spec, area_ids, s):
    """LinearTarget from ``area:component[:weight]`` terms joined by ','.

    Areas are named by area_id and components are 1-based, so
    ``CA:2,NY:2:-1`` is the difference of component 2 between two areas.
    """
    index = {a: i for i, a in enumerate(area_ids)}
    triples = []
    for term in spec.split(","):
        term = term.strip()
        if not term:
            continue
        parts = term.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"target term {term!r} is not area:component[:weight]")
        area, comp = parts[0].strip(), parts[1].strip()
        if area not in index:
            raise ConfigError(f"unknown area {area!r} in target")
        try:
            j = int(comp)
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError:
            raise ConfigError(f"bad component or weight in target term {term!r}") from None
        if not 1 <= j <= s:
            raise ConfigError(f"component {j} outside 1..{s}")
        triples.append((index[area], j - 1, w))
    if not triples:
        raise ConfigError("empty target specification")
    try:
        return LinearTarget.from_triples(len(area_ids), s, triples)
    except Exception as exc:
        raise ConfigError(str(exc)) from None


def parse_targets(text, area_ids, s):
    """Several targets separated by ';'."""
    return [parse_target(t, area_ids, s) for t in text.split(";") if t.strip()]


def target_label(target, area_ids, s):
    parts = []
    for k in np.flatnonzero(target.c):
        i, j = divmod(int(k), s)
        w = target.c[k]
        parts.append(f"{area_ids[i]}:{j + 1}" if w == 1.0 else f"{area_ids[i]}:{j + 1}:{w:g}")
    return ",".join(parts)


def write_intervals(results, labels, path_or_file):
    fields = ["target", "lower", "upper", "q1", "q2", "mu_hat", "sigma_hat", "method",
              "alpha", "B_effective", "n_failed"]

    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for label, r in zip(labels, results):
            w.writerow([label, *(format_float(v) for v in
                                 (r.lower, r.upper, r.q1, r.q2, r.mu_hat, r.sigma_hat)),
                        r.method, format_float(r.alpha), r.B_effective, r.n_failed])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            emit(fh)

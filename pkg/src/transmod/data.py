"""Columnar datasets with sampling weights, strata and shift designs."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "Column",
    "Dataset",
    "DataError",
    "StratumIndex",
    "ShiftTerm",
    "ShiftDesign",
    "load_csv",
    "write_csv",
    "stratify",
    "shift_design",
    "trim_by_quantile",
    "weighted_ecdf",
]


class DataError(ValueError):
    """Malformed input data (bad entry, unknown column, negative weight)."""


@dataclass(frozen=True)
class Column:
    """Numeric (float, NaN = missing) or categorical (labels, None = missing) column."""

    name: str
    values: np.ndarray
    levels: tuple | None = None

    @property
    def is_categorical(self) -> bool:
        return self.levels is not None

    @property
    def reference(self):
        return self.levels[0] if self.levels else None

    def missing(self) -> np.ndarray:
        if self.is_categorical:
            return np.array([v is None for v in self.values], dtype=bool)
        return ~np.isfinite(self.values)

    def codes(self) -> np.ndarray:
        """Integer level codes (-1 for missing); categorical columns only."""
        lookup = {lev: i for i, lev in enumerate(self.levels)}
        return np.array([lookup.get(v, -1) if v is not None else -1 for v in self.values], dtype=np.int64)

    def take(self, idx) -> "Column":
        return Column(self.name, self.values[idx], self.levels)


@dataclass(frozen=True)
class Dataset:
    """Observations: one numeric response, named covariates, non-negative weights."""

    response: np.ndarray
    covariates: Mapping[str, Column]
    weights: np.ndarray
    response_name: str = "y"
    weight_name: str | None = None

    def __post_init__(self):
        y = np.asarray(self.response, dtype=float)
        n = y.size
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (n,):
            raise DataError("weights must have one entry per observation")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("weights must be finite and non-negative")
        if n and not np.any(w > 0):
            raise DataError("weights must not all be zero")
        for c in self.covariates.values():
            if len(c.values) != n:
                raise DataError(f"column {c.name!r} has {len(c.values)} rows, expected {n}")
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "covariates", dict(self.covariates))

    @property
    def n(self) -> int:
        return self.response.size

    def __len__(self):
        return self.n

    def __getitem__(self, name):
        """Column values by name (the response name maps to the response)."""
        if name == self.response_name:
            return self.response
        try:
            return self.covariates[name].values
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def __contains__(self, name):
        return name == self.response_name or name in self.covariates

    def column(self, name) -> Column:
        try:
            return self.covariates[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.response[idx],
            {k: c.take(idx) for k, c in self.covariates.items()},
            self.weights[idx],
            self.response_name,
            self.weight_name,
        )

    def with_weights(self, w) -> "Dataset":
        return Dataset(self.response, self.covariates, w, self.response_name, self.weight_name)

    def with_column(self, name, values) -> "Dataset":
        """Copy with covariate ``name`` replaced by ``values`` (same type/levels)."""
        old = self.column(name)
        vals = np.asarray(values, dtype=object if old.is_categorical else float)
        cov = dict(self.covariates)
        cov[name] = Column(name, vals, old.levels)
        return Dataset(self.response, cov, self.weights, self.response_name, self.weight_name)

    def complete_cases(self, names: Iterable[str]) -> "Dataset":
        """Drop rows with a missing value in any of ``names`` (the count is logged)."""
        keep = np.isfinite(self.response)
        for name in names:
            if name == self.response_name:
                continue
            keep &= ~self.column(name).missing()
        dropped = int(self.n - keep.sum())
        if dropped:
            log.info("dropped %d rows with missing model variables", dropped)
            return self.subset(np.flatnonzero(keep))
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.response.tobytes())
        h.update(self.weights.tobytes())
        return h.hexdigest()


def _parse_float(s):
    s = s.strip()
    if s == "" or s.upper() in ("NA", "NAN"):
        return np.nan
    return float(s)


def load_csv(
    path,
    response: str,
    weight: str | None = None,
    schema: Mapping[str, object] | None = None,
) -> Dataset:
    """Read a comma-separated file with a header row.

    Parameters
    ----------
    path : str or path-like
    response : str
        Name of the numeric response column.
    weight : str, optional
        Name of the sampling-weight column; weights default to 1.
    schema : mapping, optional
        Per-column hints: ``"numeric"``, ``"categorical"`` or an explicit
        level sequence (first entry is the reference level).  Columns
        without a hint are numeric when every non-empty entry parses as a
        number and categorical otherwise, with levels in order of first
        appearance.

    Lines starting with ``#`` are comments, except that a comment of the
    form ``# levels var: a,b,c; other: x,y`` declares level orders (used
    unless ``schema`` gives another hint for the column).  Empty entries
    and ``NA`` are missing values.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.readlines()
    hints = {}
    for line in lines:
        if line.startswith("# levels "):
            for part in line[len("# levels ") :].split(";"):
                if ":" in part:
                    var, levs = part.split(":", 1)
                    hints[var.strip()] = [v.strip() for v in levs.split(",") if v.strip()]
    hints.update(schema or {})
    schema = hints
    rows = list(csv.reader(line for line in lines if not line.startswith("#")))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    for name in [response, weight, *(schema or {})]:
        if name is not None and name not in header:
            raise DataError(f"{path}: unknown column {name!r}")
    cols = {h: [] for h in header}
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(r)} fields, expected {len(header)}")
        for h, v in zip(header, r):
            cols[h].append(v.strip())

    def numeric(name):
        out = np.empty(len(cols[name]))
        for i, v in enumerate(cols[name]):
            try:
                out[i] = _parse_float(v)
            except ValueError:
                raise DataError(f"{path}: non-numeric entry {v!r} in column {name!r}, row {i + 2}") from None
        return out

    y = numeric(response)
    if weight is not None:
        w = numeric(weight)
        bad = np.flatnonzero(~(w >= 0))
        if bad.size:
            raise DataError(f"{path}: invalid weight {cols[weight][bad[0]]!r} in row {bad[0] + 2}")
    else:
        w = np.ones(y.size)

    covariates = {}
    for name in header:
        if name in (response, weight):
            continue
        hint = schema.get(name)
        raw = cols[name]
        if hint == "numeric":
            covariates[name] = Column(name, numeric(name))
            continue
        if hint is None:
            try:
                covariates[name] = Column(name, np.array([_parse_float(v) for v in raw]))
                continue
            except ValueError:
                pass
        vals = np.array([v if v not in ("", "NA") else None for v in raw], dtype=object)
        if hint is None or hint == "categorical":
            levels = tuple(dict.fromkeys(v for v in vals if v is not None))
        else:
            levels = tuple(str(v) for v in hint)
            unknown = {v for v in vals if v is not None} - set(levels)
            if unknown:
                raise DataError(f"{path}: column {name!r} has values {sorted(unknown)} outside the declared levels")
        covariates[name] = Column(name, vals, levels)
    return Dataset(y, covariates, w, response, weight)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if not np.isfinite(v) else repr(float(v))
    return str(v)


def write_csv(d: Dataset, path, header_lines: Sequence[str] = ()) -> None:
    """Write ``d`` so that :func:`load_csv` reads back identical values and level orders."""
    names = [d.response_name, *d.covariates]
    if d.weight_name is not None:
        names.append(d.weight_name)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        cats = [f"{c.name}: {','.join(c.levels)}" for c in d.covariates.values() if c.is_categorical]
        if cats:
            fh.write(f"# levels {'; '.join(cats)}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(names)
        cols = [d.response, *(c.values for c in d.covariates.values())]
        if d.weight_name is not None:
            cols.append(d.weights)
        for row in zip(*cols):
            wr.writerow([_fmt(v) for v in row])


def trim_by_quantile(d: Dataset, lower=0.01, upper=0.99, by: str | None = None) -> Dataset:
    """Drop observations whose response lies outside the weighted ``[lower, upper]`` quantiles.

    With ``by`` (a categorical column) the quantiles are computed within
    each level.
    """
    groups = [np.arange(d.n)] if by is None else [np.flatnonzero(d.column(by).codes() == k) for k in range(len(d.column(by).levels))]
    keep = np.zeros(d.n, dtype=bool)
    for g in groups:
        if g.size == 0:
            continue
        y, w = d.response[g], d.weights[g]
        o = np.argsort(y, kind="stable")
        cw = np.cumsum(w[o]) / w.sum()
        lo = y[o][np.searchsorted(cw, lower)]
        hi = y[o][min(np.searchsorted(cw, upper), g.size - 1)]
        keep[g] = (y >= lo) & (y <= hi)
    return d.subset(np.flatnonzero(keep))


@dataclass(frozen=True)
class StratumIndex:
    """Occupied cells of a cross-classification of categorical variables."""

    variables: tuple
    levels: tuple  # per variable
    cells: tuple  # tuples of labels, lexicographic in level order
    cell_id: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_names(self):
        return [":".join(f"{v}={lab}" for v, lab in zip(self.variables, cell)) for cell in self.cells]

    def lookup(self, data) -> np.ndarray:
        """Cell id for each row of ``data`` (a Dataset or mapping of label arrays)."""
        table = {cell: i for i, cell in enumerate(self.cells)}
        cols = [np.atleast_1d(np.asarray(data[v], dtype=object)) for v in self.variables]
        n = max(len(c) for c in cols)
        cols = [np.repeat(c, n) if len(c) == 1 else c for c in cols]
        out = np.empty(n, dtype=np.int64)
        for i, key in enumerate(zip(*cols)):
            try:
                out[i] = table[tuple(key)]
            except KeyError:
                raise DataError(f"no stratum cell for {dict(zip(self.variables, key))}") from None
        return out


def stratify(d: Dataset, variables: Sequence[str]) -> StratumIndex:
    """Map every row to a dense cell id over the occupied level combinations."""
    variables = tuple(variables)
    cols = [d.column(v) for v in variables]
    for c in cols:
        if not c.is_categorical:
            raise TypeError(f"stratum variable {c.name!r} is numeric")
    codes = np.column_stack([c.codes() for c in cols]) if cols else np.zeros((d.n, 0), dtype=np.int64)
    if np.any(codes < 0):
        raise DataError("missing values in stratum variables")
    occupied = sorted(set(map(tuple, codes.tolist())))
    index = {key: i for i, key in enumerate(occupied)}
    cell_id = np.array([index[tuple(r)] for r in codes.tolist()], dtype=np.int64)
    cells = tuple(tuple(cols[j].levels[k] for j, k in enumerate(key)) for key in occupied)
    return StratumIndex(variables, tuple(c.levels for c in cols), cells, cell_id)


@dataclass(frozen=True)
class ShiftTerm:
    """One shift term.

    ``op`` is ``None`` for a main effect, ``":"`` for within-level cells
    (one column per non-reference level of the second variable within
    every level of the first) and ``"*"`` for product-of-contrasts
    interaction columns (``v1*v2`` also expands to both main effects).
    """

    variables: tuple
    op: str | None = None

    def __str__(self):
        return self.variables[0] if self.op is None else self.op.join(self.variables)


@dataclass(frozen=True)
class _Encoder:
    name: str
    levels: tuple | None  # None = numeric

    def contrasts(self, values):
        """(column labels, matrix) of treatment contrasts or the raw numeric column."""
        if self.levels is None:
            v = np.asarray(values, dtype=float)
            return [self.name], v[:, None]
        vals = np.asarray(values, dtype=object)
        unknown = set(vals.tolist()) - set(self.levels)
        if unknown:
            raise DataError(f"unseen level(s) {sorted(map(str, unknown))} of {self.name!r}")
        labels = [f"{self.name}={lev}" for lev in self.levels[1:]]
        return labels, np.column_stack([(vals == lev).astype(float) for lev in self.levels[1:]]) if labels else np.zeros((len(vals), 0))

    def indicators(self, values):
        vals = np.asarray(values, dtype=object)
        return [f"{self.name}={lev}" for lev in self.levels], np.column_stack([(vals == lev).astype(float) for lev in self.levels])


@dataclass(frozen=True)
class ShiftDesign:
    """Encoder for the linear shift predictor ``s(x)``.

    Holds the expanded term list with the level sets observed at
    construction so that new data is encoded with identical columns.
    """

    terms: tuple
    encoders: Mapping[str, _Encoder]
    columns: tuple

    @property
    def dim(self) -> int:
        return len(self.columns)

    @property
    def variables(self) -> tuple:
        return tuple(dict.fromkeys(v for t in self.terms for v in t.variables))

    def _term_columns(self, term: ShiftTerm, data, n):
        def col(v):
            x = np.atleast_1d(np.asarray(data[v], dtype=object if self.encoders[v].levels else float))
            return np.repeat(x, n) if x.size == 1 and n > 1 else x

        if term.op is None:
            return self.encoders[term.variables[0]].contrasts(col(term.variables[0]))
        a, b = (self.encoders[v] for v in term.variables)
        if term.op == "*":
            la, ma = a.contrasts(col(a.name))
            lb, mb = b.contrasts(col(b.name))
            labels = [f"{x}:{y}" for x in la for y in lb]
            mat = (ma[:, :, None] * mb[:, None, :]).reshape(ma.shape[0], -1)
            return labels, mat
        # within-level cells: all levels of the categorical outer variable
        if a.levels is None and b.levels is not None:
            a, b = b, a
        if a.levels is None:
            la, ma = a.contrasts(col(a.name))
        else:
            la, ma = a.indicators(col(a.name))
        lb, mb = b.contrasts(col(b.name))
        labels = [f"{x}:{y}" for x in la for y in lb]
        mat = (ma[:, :, None] * mb[:, None, :]).reshape(ma.shape[0], -1)
        return labels, mat

    def matrix(self, data, n: int | None = None) -> np.ndarray:
        """Shift design matrix ``s(x)`` for ``data`` (Dataset or mapping)."""
        if n is None:
            n = max(np.size(data[v]) for v in self.variables) if self.variables else 0
        seen, cols = set(), []
        for term in self.terms:
            labels, mat = self._term_columns(term, data, n)
            for j, lab in enumerate(labels):
                if lab not in seen:
                    seen.add(lab)
                    cols.append(mat[:, j])
        return np.column_stack(cols) if cols else np.zeros((n, 0))

    def to_dict(self):
        return {
            "terms": [{"variables": list(t.variables), "op": t.op} for t in self.terms],
            "encoders": {k: (list(e.levels) if e.levels is not None else None) for k, e in self.encoders.items()},
            "columns": list(self.columns),
        }

    @classmethod
    def from_dict(cls, d):
        terms = tuple(ShiftTerm(tuple(t["variables"]), t["op"]) for t in d["terms"])
        enc = {k: _Encoder(k, tuple(v) if v is not None else None) for k, v in d["encoders"].items()}
        return cls(terms, enc, tuple(d["columns"]))


def expand_terms(terms: Iterable[ShiftTerm]) -> tuple:
    out = []
    for t in terms:
        if len(t.variables) > 2:
            raise ValueError(f"only two-way interactions are supported: {t}")
        if t.op == "*":
            out += [ShiftTerm((t.variables[0],)), ShiftTerm((t.variables[1],)), t]
        else:
            out.append(t)
    return tuple(dict.fromkeys(out))


def shift_design(d: Dataset, terms: Iterable[ShiftTerm | str]) -> ShiftDesign:
    """Build the shift encoder for ``terms`` on ``d``.

    Terms may be given as strings: ``"smoking"``, ``"sex:smoking"`` or
    ``"sex*smoking"``.
    """
    parsed = []
    for t in terms:
        if isinstance(t, str):
            if "*" in t:
                t = ShiftTerm(tuple(s.strip() for s in t.split("*")), "*")
            elif ":" in t:
                t = ShiftTerm(tuple(s.strip() for s in t.split(":")), ":")
            else:
                t = ShiftTerm((t.strip(),))
        parsed.append(t)
    terms = expand_terms(parsed)
    enc = {}
    for t in terms:
        for v in t.variables:
            c = d.column(v)
            enc[v] = _Encoder(v, c.levels)
    design = ShiftDesign(terms, enc, ())
    seen, columns = set(), []
    for t in terms:
        labels, _ = design._term_columns(t, _first_row(d, design.variables), 1)
        for lab in labels:
            if lab not in seen:
                seen.add(lab)
                columns.append(lab)
    return ShiftDesign(terms, enc, tuple(columns))


def _first_row(d: Dataset, names):
    # any valid row works: only the column labels are needed
    row = {}
    for v in names:
        c = d.column(v)
        row[v] = np.array([c.reference], dtype=object) if c.is_categorical else np.zeros(1)
    return row


def weighted_ecdf(y, w=None):
    """Right-continuous weighted empirical CDF with ties merged.

    Returns the sorted unique values and the cumulative probability at
    each of them (jumps ``w_i / sum(w)``).
    """
    y = np.asarray(y, dtype=float)
    w = np.ones(y.size) if w is None else np.asarray(w, dtype=float)
    o = np.argsort(y, kind="stable")
    ys, ws = y[o], w[o]
    uniq, start = np.unique(ys, return_index=True)
    cw = np.cumsum(ws)
    ends = np.append(start[1:], ys.size) - 1
    return uniq, cw[ends] / cw[-1]

"""Conditional distribution functionals of a fitted model.

All functions take a fitted model (anything with ``spec`` and ``theta``
attributes) and a covariate profile ``x``: a mapping from covariate name
to a scalar or to an array broadcastable against ``y``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, StratumIndex, stratify, weighted_ecdf

__all__ = [
    "TailOverflowWarning",
    "DistributionCurves",
    "OverlayCell",
    "h",
    "cdf",
    "density",
    "quantile",
    "odds",
    "hazard",
    "cum_hazard",
    "distribution_curves",
    "decile_curves",
    "ecdf_overlay",
    "DECILES",
]

DECILES = tuple(np.round(np.arange(1, 10) / 10, 1))


class TailOverflowWarning(RuntimeWarning):
    """A tail functional was evaluated where ``1 - F`` is numerically zero."""


def _hh(fm, y, x):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    des = fm.spec.design(y, x)
    return des.X @ fm.theta, des.Xd @ fm.theta


def h(fm, y, x: Mapping | None = None) -> np.ndarray:
    """Transformation function ``h(y | x)`` including shift terms."""
    return _hh(fm, y, x)[0]


def cdf(fm, y, x: Mapping | None = None) -> np.ndarray:
    """``F(h(y | x))``."""
    return fm.spec.link.cdf(h(fm, y, x))


def density(fm, y, x: Mapping | None = None) -> np.ndarray:
    """``F'(h(y | x)) h'(y | x)``."""
    hv, hd = _hh(fm, y, x)
    return fm.spec.link.pdf(hv) * hd


def _flag(values, what):
    if np.any(np.isposinf(values)):
        warnings.warn(f"{what} overflowed to +inf where the CDF is numerically 1", TailOverflowWarning, stacklevel=3)
    return values


def odds(fm, y, x: Mapping | None = None) -> np.ndarray:
    """``F / (1 - F)``; equals ``exp(h)`` exactly under the logit link."""
    hv = h(fm, y, x)
    link = fm.spec.link
    with np.errstate(over="ignore", divide="ignore"):
        out = np.exp(hv) if link.kind == "logit" else link.cdf(hv) / link.sf(hv)
    return _flag(out, "odds")


def hazard(fm, y, x: Mapping | None = None) -> np.ndarray:
    """``f / (1 - F)``."""
    hv, hd = _hh(fm, y, x)
    link = fm.spec.link
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out = np.exp(link.logpdf(hv) - np.log(link.sf(hv))) * hd
    return _flag(out, "hazard")


def cum_hazard(fm, y, x: Mapping | None = None) -> np.ndarray:
    """``-log(1 - F)``."""
    hv = h(fm, y, x)
    with np.errstate(divide="ignore"):
        out = -np.log(fm.spec.link.sf(hv))
    return _flag(out, "cumulative hazard")


def _broadcast_profile(x, n):
    if x is None:
        return None
    out = {}
    for k, v in x.items():
        a = np.atleast_1d(np.asarray(v))
        if a.dtype.kind in "USO":
            a = a.astype(object)
        out[k] = np.repeat(a, n) if a.size == 1 else a
    return out


def quantile(fm, p, x: Mapping | None = None, max_expand: int = 60) -> np.ndarray:
    """Solve ``F(h(y | x)) = p`` for ``y`` by bracketing and bisection.

    ``p`` may be an array; ``x`` values are broadcast against it.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("probabilities must lie strictly between 0 and 1")
    n = p.size
    xb = _broadcast_profile(x, n)
    target = fm.spec.link.ppf(p)
    sup = _response_support(fm.spec.trafo)
    lo = np.full(n, sup.lower)
    hi = np.full(n, sup.upper)
    step = sup.width
    for _ in range(max_expand):
        low_bad = h(fm, lo, xb) > target
        high_bad = h(fm, hi, xb) < target
        if not (low_bad.any() or high_bad.any()):
            break
        lo = np.where(low_bad, lo - step, lo)
        hi = np.where(high_bad, hi + step, hi)
        step *= 2.0
    else:
        raise ArithmeticError("quantile bracket could not be established; transformation is bounded")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        done = (mid <= lo) | (mid >= hi)
        if done.all():
            break
        below = h(fm, mid, xb) < target
        lo = np.where(below & ~done, mid, lo)
        hi = np.where(~below & ~done, mid, hi)
    # pick the bracket end with the smaller residual in h
    rl = np.abs(h(fm, lo, xb) - target)
    rh = np.abs(h(fm, hi, xb) - target)
    return np.where(rl <= rh, lo, hi)


def _response_support(trafo):
    if hasattr(trafo, "support"):
        return trafo.support
    if hasattr(trafo, "response_basis"):
        return trafo.response_basis.support
    return trafo.base.support


@dataclass(frozen=True)
class DistributionCurves:
    profile: dict
    y: np.ndarray
    cdf: np.ndarray
    density: np.ndarray
    probs: tuple = ()
    quantiles: np.ndarray | None = None


def distribution_curves(fm, profiles: Sequence[Mapping], y=None, n_grid: int = 100, probs: Sequence[float] = ()) -> list:
    """CDF and density on a common grid (and optional quantiles) for each profile."""
    if y is None:
        sup = _response_support(fm.spec.trafo)
        y = np.linspace(sup.lower, sup.upper, n_grid)
    y = np.asarray(y, dtype=float)
    if y.size > 1 and np.any(np.diff(y) <= 0):
        raise ValueError("grid must be strictly increasing")
    out = []
    for prof in profiles:
        q = quantile(fm, probs, prof) if len(probs) else None
        out.append(DistributionCurves(dict(prof), y, cdf(fm, y, prof), density(fm, y, prof), tuple(probs), q))
    return out


def decile_curves(fm, var: str, profiles: Sequence[Mapping], grid, probs: Sequence[float] = DECILES) -> list:
    """Quantiles as a function of the numeric covariate ``var``.

    Returns long-format rows ``(profile, var value, p, quantile)`` as dicts.
    """
    if var not in fm.spec.covariates:
        raise ValueError(f"{var!r} is not a covariate of the model")
    grid = np.asarray(grid, dtype=float)
    probs = np.asarray(probs, dtype=float)
    rows = []
    for k, prof in enumerate(profiles):
        pp = np.tile(probs, grid.size)
        xx = dict(prof)
        xx[var] = np.repeat(grid, probs.size)
        q = quantile(fm, pp, xx).reshape(grid.size, probs.size)
        for i, g in enumerate(grid):
            for j, pr in enumerate(probs):
                rows.append({"profile": k, var: float(g), "p": float(pr), "quantile": float(q[i, j])})
    return rows


@dataclass(frozen=True)
class OverlayCell:
    cell: str
    y: np.ndarray
    ecdf: np.ndarray
    model_cdf: np.ndarray
    sup_distance: float


def ecdf_overlay(fm, d: Dataset, strata: Sequence[str], max_rows: int = 500) -> list:
    """Weighted empirical and model CDF per cell of ``strata``.

    With no ``strata`` the whole sample forms a single cell ``"all"``.

    The model CDF of a cell is the weighted average of ``F(h(y | x_i))``
    over the cell's rows (at most ``max_rows`` evenly spaced rows), which
    is exact when the model depends only on the cell.  The grid is the set
    of distinct responses; the sup-distance accounts for both sides of
    every ECDF jump.
    """
    strata = tuple(strata)
    idx: StratumIndex = stratify(d, strata)
    cells = idx.cell_names() if strata else ["all"]
    out = []
    model_vars = set(fm.spec.covariates)
    cell_only = model_vars <= set(strata)
    for c in range(len(cells)):
        rows = np.flatnonzero((idx.cell_id == c) & (d.weights > 0))
        if rows.size == 0:
            warnings.warn(f"cell {cells[c]} has no observations; skipped", RuntimeWarning, stacklevel=2)
            continue
        sub = d.subset(rows)
        grid, ec = weighted_ecdf(sub.response, sub.weights)
        use = [0] if cell_only else np.unique(np.linspace(0, rows.size - 1, min(max_rows, rows.size)).astype(int))
        wsel = sub.weights[use]
        mc = np.zeros(grid.size)
        for i, wi in zip(use, wsel):
            prof = {v: sub[v][i] for v in model_vars}
            mc += wi * cdf(fm, grid, prof)
        mc /= wsel.sum()
        left = np.concatenate([[0.0], ec[:-1]])
        sup = float(max(np.max(np.abs(mc - ec)), np.max(np.abs(mc - left))))
        out.append(OverlayCell(cells[c], grid, ec, mc, sup))
    return out

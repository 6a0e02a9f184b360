"""Constrained maximum-likelihood estimation and Wald inference.

Each theta block is written as ``theta = A @ z`` through the working map
of its basis, where monotonicity amounts to ``z_j >= 0`` for a subset of
components.  These are kept at or above ``eps_mono`` so that ``h`` stays
strictly increasing, also along the extrapolated tails.  The log-likelihood is maximised over ``z`` by a projected
Newton method: constraints that are at the bound and pushed outward are
held fixed, the remaining components take an eigenvalue-clipped Newton
step, and an Armijo search runs along the projected path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats

from .data import Dataset, weighted_ecdf
from .model import Design, ModelSpec, NonMonotoneError

log = logging.getLogger(__name__)

__all__ = [
    "FitOptions",
    "FitError",
    "SpecificationError",
    "ConvergenceReport",
    "FittedModel",
    "Interval",
    "LRReport",
    "mle",
    "mle_design",
    "confint",
    "format_or",
    "lr_compare",
]


class FitError(RuntimeError):
    """The optimiser did not converge; ``trajectory`` holds the log-likelihood path."""

    def __init__(self, message, trajectory=()):
        super().__init__(message)
        self.trajectory = list(trajectory)


class SpecificationError(ValueError):
    """The model cannot be fitted to the data as specified."""


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 500
    gtol: float = 1e-8
    eps_mono: float = 1e-8
    start: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.max_iterations < 1 or self.gtol <= 0 or self.eps_mono <= 0:
            raise ValueError("iteration limit and tolerances must be positive")


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    grad_norm: float
    active: tuple = ()
    converged: bool = True

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "active": list(self.active),
            "converged": self.converged,
        }


@dataclass(frozen=True)
class FittedModel:
    """A model specification with its maximum-likelihood estimate."""

    spec: ModelSpec
    theta: np.ndarray
    loglik: float
    vcov: np.ndarray
    report: ConvergenceReport
    n_obs: int = 0
    weight_sum: float = 0.0
    fingerprint: str = ""

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def names(self) -> list:
        return self.spec.param_names()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "names": self.names,
            "theta": self.theta.tolist(),
            "loglik": self.loglik,
            "vcov": self.vcov.tolist(),
            "report": self.report.to_dict(),
            "n_obs": self.n_obs,
            "weight_sum": self.weight_sum,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d):
        r = d["report"]
        return cls(
            ModelSpec.from_dict(d["spec"]),
            np.asarray(d["theta"], dtype=float),
            float(d["loglik"]),
            np.asarray(d["vcov"], dtype=float).reshape(len(d["theta"]), len(d["theta"])),
            ConvergenceReport(r["iterations"], r["grad_norm"], tuple(r["active"]), r["converged"]),
            d.get("n_obs", 0),
            d.get("weight_sum", 0.0),
            d.get("fingerprint", ""),
        )


class _WorkingMap:
    """``theta = A @ z`` with ``z >= floor`` on the positive components."""

    def __init__(self, spec: ModelSpec, floor: float = 0.0):
        self.floor = floor
        a, pos = spec.trafo.working_map()
        d = spec.trafo.monotonicity_rows()
        blocks = [a] * spec.n_cells
        dblocks = [d] * spec.n_cells
        if spec.n_beta:
            blocks.append(np.eye(spec.n_beta))
            dblocks.append(np.zeros((0, spec.n_beta)))
        self.A = linalg.block_diag(*blocks)
        self.D = linalg.block_diag(*dblocks)
        self.pos = np.concatenate([np.tile(pos, spec.n_cells), np.zeros(spec.n_beta, dtype=bool)])

    def theta(self, z):
        return self.A @ z

    def project(self, z):
        return np.where(self.pos, np.maximum(z, self.floor), z)

    def z_from_theta(self, theta):
        return self.project(np.linalg.solve(self.A, theta))

    def active_params(self, z, rel):
        """Parameter indices involved in monotonicity constraints at the boundary."""
        zp = z[self.pos]
        scale = max(1.0, float(np.max(np.abs(zp)))) if zp.size else 1.0
        rows = np.flatnonzero(zp <= rel * scale)
        idx = set()
        for r in rows:
            idx.update(np.flatnonzero(self.D[r]).tolist())
        return tuple(sorted(idx)), rows


def _start_values(spec: ModelSpec, d: Dataset, wmap: _WorkingMap, weights) -> np.ndarray:
    """Least-squares fit of ``h`` to the link-transformed weighted ECDF per cell."""
    m = spec.trafo.dim
    cells = np.zeros(d.n, dtype=np.int64) if spec.strata is None else spec.strata.lookup(d)
    a, pos = spec.trafo.working_map()
    z = np.zeros(spec.n_params)
    for c in range(spec.n_cells):
        idx = np.flatnonzero((cells == c) & (weights > 0))
        sub = d.subset(idx)
        w = weights[idx]
        uniq, cum = weighted_ecdf(sub.response, w)
        # midpoint of each jump keeps the target inside (0, 1)
        mid = cum - 0.5 * np.diff(np.concatenate([[0.0], cum]))
        target = spec.link.ppf(mid[np.searchsorted(uniq, sub.response)])
        B = spec.trafo.eval(sub.response, sub) @ a
        sw = np.sqrt(w / w.sum())
        scale = max(float(np.ptp(target)), 1.0)
        lb = np.where(pos, 1e-3 * scale / m, -np.inf)
        res = optimize.lsq_linear(B * sw[:, None], target * sw, bounds=(lb, np.full(m, np.inf)), method="bvls")
        z[c * m : (c + 1) * m] = res.x
    return z


def _check_cells(spec: ModelSpec, d: Dataset, weights):
    cells = np.zeros(d.n, dtype=np.int64) if spec.strata is None else spec.strata.lookup(d)
    for c in range(spec.n_cells):
        sel = (cells == c) & (weights > 0)
        name = "data" if spec.strata is None else f"stratum cell {spec.strata.cell_names()[c]}"
        if not np.any(sel):
            raise SpecificationError(f"{name} has no observations")
        if np.unique(d.response[sel]).size < 2:
            raise SpecificationError(f"{name} has fewer than 2 distinct response values")
    if np.count_nonzero(weights > 0) < spec.n_params:
        raise SpecificationError(f"{np.count_nonzero(weights > 0)} observations for {spec.n_params} parameters")


def _reduced_step(Hz, r, z, pos, bound, floor=0.0):
    """Newton step with the components in ``bound``, and those the step would
    push below ``floor`` against their gradient, moved exactly onto the boundary."""
    bound = bound.copy()
    step = np.zeros_like(z)
    for _ in range(z.size + 1):
        free = np.flatnonzero(~bound)
        step[:] = 0.0
        step[bound] = floor - z[bound]
        if free.size:
            rhs = r[free] + Hz[np.ix_(free, np.flatnonzero(bound))] @ step[bound]
            M = -Hz[np.ix_(free, free)]
            lam, V = np.linalg.eigh(0.5 * (M + M.T))
            lam = np.maximum(lam, 1e-10 * max(float(np.max(np.abs(lam))), 1e-300))
            step[free] = V @ ((V.T @ rhs) / lam)
        crossing = pos & ~bound & (z + step < floor) & (r < 0)
        if not crossing.any():
            break
        bound |= crossing
    return step


def _line_search(des, wmap, z, ll, r, step):
    """Armijo backtracking along the projected path; ``(z, ll)`` or ``None``."""
    t = 1.0
    while t > 1e-12:
        zn = wmap.project(z + t * step)
        try:
            lln = des.loglik(wmap.theta(zn))
        except NonMonotoneError:
            lln = -np.inf
        if np.isfinite(lln) and lln > ll and lln >= ll + 1e-4 * float(r @ (zn - z)):
            return zn, lln
        t *= 0.5
    return None


def _newton(des: Design, wmap: _WorkingMap, z, opts: FitOptions):
    """Projected Newton ascent over ``z``; returns ``(z, ll, iterations, grad_norm, trajectory)``."""
    wsum = float(np.sum(des.weights))
    A = wmap.A
    pos = wmap.pos
    ll, g, H = des.all(wmap.theta(z))
    trajectory = [ll]
    grad_norm = np.inf
    for it in range(1, opts.max_iterations + 1):
        r = A.T @ g
        zpos = z[pos]
        scale = max(1.0, float(np.max(zpos))) if zpos.size else 1.0
        bound = pos & (z <= opts.eps_mono * scale) & (r < 0)
        grad_norm = float(np.max(np.abs(np.where(bound, 0.0, r)))) / wsum if r.size else 0.0
        if grad_norm <= opts.gtol:
            return z, ll, it - 1, grad_norm, trajectory
        Hz = A.T @ H @ A
        step = _reduced_step(Hz, r, z, pos, bound, wmap.floor)
        found = _line_search(des, wmap, z, ll, r, step)
        if found is None:
            # scaled projected gradient as a fallback direction
            scale_diag = np.maximum(-np.diag(Hz), 1e-12 * max(float(np.max(np.abs(np.diag(Hz)))), 1e-300))
            found = _line_search(des, wmap, z, ll, r, np.where(bound, 0.0, r / scale_diag))
        if found is None:
            if grad_norm <= 1e3 * opts.gtol:
                # no further ascent at working precision
                return z, ll, it, grad_norm, trajectory
            raise FitError(f"line search failed at iteration {it} (gradient {grad_norm:.3g})", trajectory)
        zn, lln = found
        z = zn
        ll, g, H = des.all(wmap.theta(z))
        trajectory.append(ll)
    raise FitError(f"no convergence in {opts.max_iterations} iterations (gradient {grad_norm:.3g})", trajectory)


def mle_design(spec: ModelSpec, des: Design, d: Dataset, opts: FitOptions | None = None, fingerprint="") -> FittedModel:
    """Fit ``spec`` using a precomputed design (weights taken from ``des``)."""
    opts = opts or FitOptions()
    wmap = _WorkingMap(spec, opts.eps_mono)
    weights = des.weights
    _check_cells(spec, d, weights)
    z = None
    if opts.start is not None:
        z = wmap.z_from_theta(spec.check(opts.start))
        try:
            if not np.isfinite(des.loglik(wmap.theta(z))):
                z = None
        except NonMonotoneError:
            z = None
    if z is None:
        z = _start_values(spec, d, wmap, weights)
    z, ll, iters, gnorm, _ = _newton(des, wmap, z, opts)
    theta = wmap.theta(z)
    ll, _, H = des.all(theta)
    vcov = _vcov(H)
    active, _ = wmap.active_params(z, opts.eps_mono)
    report = ConvergenceReport(iters, gnorm, active, True)
    return FittedModel(spec, theta, ll, vcov, report, int(np.count_nonzero(weights > 0)), float(np.sum(weights)), fingerprint)


def _vcov(H):
    info = -H
    try:
        v = np.linalg.inv(info)
        if not np.all(np.isfinite(v)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        v = np.linalg.pinv(info)
    return 0.5 * (v + v.T)


def mle(spec: ModelSpec, d: Dataset, opts: FitOptions | None = None, weights=None) -> FittedModel:
    """Maximum-likelihood fit of ``spec`` to ``d``.

    Parameters
    ----------
    spec : ModelSpec
    d : Dataset
    opts : FitOptions, optional
    weights : array, optional
        Case weights replacing ``d.weights`` (used for local fits).

    Raises
    ------
    SpecificationError
        Empty stratum cell, constant response in a cell or too few
        observations.
    FitError
        The optimiser failed to converge.
    """
    w = d.weights if weights is None else np.asarray(weights, dtype=float)
    keep = np.flatnonzero(w > 0)
    if keep.size < d.n:
        d = d.subset(keep)
        w = w[keep]
    des = spec.dataset_design(d, w)
    fp = d.fingerprint() if weights is None else ""
    return mle_design(spec, des, d, opts, fp)


@dataclass(frozen=True)
class Interval:
    name: str
    estimate: float
    se: float
    lower: float
    upper: float
    odds_ratio: tuple | None = None  # (OR, lower, upper)
    reliable: bool = True


def confint(fm: FittedModel, level: float = 0.95) -> list:
    """Wald intervals; shift parameters of logit models also as odds ratios."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    q = stats.norm.ppf(0.5 * (1.0 + level))
    se = fm.se
    out = []
    for j, name in enumerate(fm.names):
        est = float(fm.theta[j])
        lo, hi = est - q * se[j], est + q * se[j]
        orr = None
        if fm.spec.link.kind == "logit" and j >= fm.spec.n_theta:
            orr = (float(np.exp(est)), float(np.exp(lo)), float(np.exp(hi)))
        out.append(Interval(name, est, float(se[j]), float(lo), float(hi), orr, j not in fm.report.active))
    return out


def format_or(estimate: float, se: float, level: float = 0.95, digits: int = 2) -> str:
    """Odds ratio with Wald interval, e.g. ``1.19 (1.08–1.31)``."""
    q = stats.norm.ppf(0.5 * (1.0 + level))
    o, lo, hi = np.exp([estimate, estimate - q * se, estimate + q * se])
    return f"{o:.{digits}f} ({lo:.{digits}f}–{hi:.{digits}f})"


@dataclass(frozen=True)
class LRReport:
    loglik_a: float
    loglik_b: float
    difference: float
    n_params_a: int
    n_params_b: int


def lr_compare(fm_a: FittedModel, fm_b: FittedModel) -> LRReport:
    """Log-likelihood difference ``loglik_b - loglik_a`` of two fits to the same data."""
    if fm_a.fingerprint != fm_b.fingerprint or fm_a.spec.response != fm_b.spec.response:
        raise ValueError("models were fitted to different data")
    return LRReport(fm_a.loglik, fm_b.loglik, fm_b.loglik - fm_a.loglik, fm_a.n_params, fm_b.n_params)

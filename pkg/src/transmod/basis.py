"""Transformation bases in the response.

Every basis maps a response value ``y`` (and, for the tensor and
varying-coefficient bases, a covariate value ``x``) to a row vector
``a(y, x)``; the transformation function is ``h = a(y, x) @ theta``.
Alongside evaluation each basis provides the exact derivative in ``y``,
the linear inequality rows that make ``h`` non-decreasing in ``y``, and a
*working map* ``theta = A @ z`` in which monotonicity reduces to
positivity of selected components of ``z``.

Bernstein polynomials are evaluated on the rescaled argument
``t = (y - lower) / (upper - lower)``.  Outside the support the response
basis is continued linearly with the boundary slope, so a monotone ``h``
stays monotone and unbounded.  Covariate Bernstein bases are instead
clamped to their support: linear continuation in the covariate could
produce negative basis values and destroy monotonicity in ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = [
    "Support",
    "BernsteinBasis",
    "LinearBasis",
    "TensorBasis",
    "VaryingCoefBasis",
    "CompositeBasis",
    "MissingCovariateError",
    "bernstein_matrix",
    "bernstein_deriv_matrix",
    "elevate_degree",
    "eval_basis",
    "eval_basis_deriv",
    "monotonicity_rows",
    "basis_from_dict",
]


class MissingCovariateError(KeyError):
    """A covariate required by a basis is absent from the covariate row."""


@dataclass(frozen=True)
class Support:
    """Closed interval ``[lower, upper]`` in response (or covariate) units."""

    lower: float
    upper: float

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("support bounds must be finite")
        if not lo < hi:
            raise ValueError(f"support requires lower < upper, got [{lo}, {hi}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @classmethod
    def from_data(cls, values, pad: float = 0.1) -> "Support":
        """Range of ``values`` widened by ``pad`` times the range on each side."""
        v = np.asarray(values, dtype=float)
        v = v[np.isfinite(v)]
        if v.size == 0:
            raise ValueError("cannot derive a support from no finite values")
        lo, hi = float(v.min()), float(v.max())
        if lo == hi:
            # degenerate sample; any positive width keeps the basis defined
            lo, hi = lo - 0.5, hi + 0.5
        r = hi - lo
        return cls(lo - pad * r, hi + pad * r)

    def rescale(self, y):
        return (np.asarray(y, dtype=float) - self.lower) / self.width

    def to_dict(self):
        return {"lower": self.lower, "upper": self.upper}


def bernstein_matrix(t, order: int) -> np.ndarray:
    """Bernstein basis of ``order`` at ``t`` in [0, 1], shape ``(len(t), order + 1)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))[:, None]
    k = np.arange(order + 1)
    coef = np.array([math.comb(order, j) for j in k], dtype=float)
    return coef * t**k * (1.0 - t) ** (order - k)


def bernstein_deriv_matrix(t, order: int) -> np.ndarray:
    """Derivative of :func:`bernstein_matrix` with respect to ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((t.size, order + 1))
    if order == 0:
        return out
    low = bernstein_matrix(t, order - 1)
    out[:, 1:] += low
    out[:, :-1] -= low
    return order * out


def elevate_degree(theta) -> np.ndarray:
    """Coefficients of the same polynomial in the Bernstein basis of one higher order.

    ``theta`` has length ``M + 1``; the result has length ``M + 2`` and
    defines an identical function.  Non-decreasing input stays
    non-decreasing, so order-``M`` models are nested in order ``M + 1``.
    """
    theta = np.asarray(theta, dtype=float)
    m1 = theta.size  # M + 1
    out = np.empty(m1 + 1)
    out[0] = theta[0]
    out[-1] = theta[-1]
    k = np.arange(1, m1)
    out[1:-1] = (k / m1) * theta[k - 1] + (1.0 - k / m1) * theta[k]
    return out


def _difference_rows(n: int) -> np.ndarray:
    d = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    d[idx, idx] = -1.0
    d[idx, idx + 1] = 1.0
    return d


def _cumsum_matrix(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def _column(x, name):
    if x is None:
        raise MissingCovariateError(name)
    try:
        v = x[name]
    except (KeyError, IndexError, TypeError, ValueError):
        raise MissingCovariateError(name) from None
    return np.atleast_1d(np.asarray(v, dtype=float))


@dataclass(frozen=True)
class BernsteinBasis:
    """Bernstein polynomial basis of order ``M`` on a bounded support."""

    order: int
    support: Support

    def __post_init__(self):
        if int(self.order) < 1:
            raise ValueError("Bernstein order must be >= 1")
        object.__setattr__(self, "order", int(self.order))

    kind = "bernstein"
    covariates = ()

    @property
    def dim(self) -> int:
        return self.order + 1

    def eval(self, y, x=None) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        t = self.support.rescale(y)
        tc = np.clip(t, 0.0, 1.0)
        out = bernstein_matrix(tc, self.order)
        outside = t != tc
        if np.any(outside):
            slope = bernstein_deriv_matrix(tc[outside], self.order)
            out[outside] += (t[outside] - tc[outside])[:, None] * slope
        return out

    def deriv(self, y, x=None) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        tc = np.clip(self.support.rescale(y), 0.0, 1.0)
        return bernstein_deriv_matrix(tc, self.order) / self.support.width

    def eval_clamped(self, x) -> np.ndarray:
        """Evaluation with the argument clamped to the support (covariate use)."""
        t = np.clip(self.support.rescale(np.atleast_1d(x)), 0.0, 1.0)
        return bernstein_matrix(t, self.order)

    def monotonicity_rows(self) -> np.ndarray:
        return _difference_rows(self.dim)

    def working_map(self):
        pos = np.ones(self.dim, dtype=bool)
        pos[0] = False
        return _cumsum_matrix(self.dim), pos

    def to_dict(self):
        return {"kind": "bernstein", "order": self.order, "support": self.support.to_dict()}


@dataclass(frozen=True)
class LinearBasis:
    """Linear basis ``(1, y)``.

    The support is kept for grids and plotting only; evaluation is not
    rescaled, so ``theta = (-mu / sigma, 1 / sigma)`` reproduces the
    standardisation of a normal model.
    """

    support: Support

    kind = "linear"
    covariates = ()
    dim = 2

    def eval(self, y, x=None) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return np.column_stack([np.ones_like(y), y])

    def deriv(self, y, x=None) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return np.column_stack([np.zeros_like(y), np.ones_like(y)])

    def monotonicity_rows(self) -> np.ndarray:
        return np.array([[0.0, 1.0]])

    def working_map(self):
        return np.eye(2), np.array([False, True])

    def to_dict(self):
        return {"kind": "linear", "support": self.support.to_dict()}


@dataclass(frozen=True)
class TensorBasis:
    """Kronecker product of a response and a covariate Bernstein basis.

    Column ``jy * (Mx + 1) + jx`` multiplies response basis function ``jy``
    with covariate basis function ``jx``.
    """

    response_basis: BernsteinBasis
    covariate_basis: BernsteinBasis
    covariate: str

    kind = "tensor"

    @property
    def covariates(self):
        return (self.covariate,)

    @property
    def dim(self) -> int:
        return self.response_basis.dim * self.covariate_basis.dim

    def _kron(self, by, bx):
        return (by[:, :, None] * bx[:, None, :]).reshape(by.shape[0], -1)

    def _cov(self, y, x):
        xv = _column(x, self.covariate)
        if xv.size == 1 and np.size(y) > 1:
            xv = np.full(np.size(y), xv[0])
        return self.covariate_basis.eval_clamped(xv)

    def eval(self, y, x=None) -> np.ndarray:
        return self._kron(self.response_basis.eval(y), self._cov(y, x))

    def deriv(self, y, x=None) -> np.ndarray:
        return self._kron(self.response_basis.deriv(y), self._cov(y, x))

    def monotonicity_rows(self) -> np.ndarray:
        my, mx = self.response_basis.dim, self.covariate_basis.dim
        rows = []
        for jx in range(mx):
            for k in range(my - 1):
                r = np.zeros(self.dim)
                r[k * mx + jx] = -1.0
                r[(k + 1) * mx + jx] = 1.0
                rows.append(r)
        return np.array(rows)

    def working_map(self):
        my, mx = self.response_basis.dim, self.covariate_basis.dim
        a = np.zeros((self.dim, self.dim))
        pos = np.zeros(self.dim, dtype=bool)
        for jx in range(mx):
            for k in range(my):
                zi = jx * my + k
                pos[zi] = k > 0
                for jy in range(k, my):
                    a[jy * mx + jx, zi] = 1.0
        return a, pos

    def to_dict(self):
        return {
            "kind": "tensor",
            "response": self.response_basis.to_dict(),
            "covariate_basis": self.covariate_basis.to_dict(),
            "covariate": self.covariate,
        }


@dataclass(frozen=True)
class VaryingCoefBasis:
    """Response basis scaled by a numeric covariate: ``a(y) * x``.

    ``covariate_support`` is the covariate range over which the combined
    transformation must stay monotone (see :class:`CompositeBasis`);
    covariate values outside it are clamped to the nearest bound.
    """

    response_basis: BernsteinBasis
    covariate: str
    covariate_support: Support

    kind = "varying"

    @property
    def covariates(self):
        return (self.covariate,)

    @property
    def dim(self) -> int:
        return self.response_basis.dim

    def _x(self, y, x):
        xv = _column(x, self.covariate)
        if xv.size == 1 and np.size(y) > 1:
            xv = np.full(np.size(y), xv[0])
        # clamped so that monotonicity on the support carries over
        return np.clip(xv, self.covariate_support.lower, self.covariate_support.upper)[:, None]

    def eval(self, y, x=None) -> np.ndarray:
        return self.response_basis.eval(y) * self._x(y, x)

    def deriv(self, y, x=None) -> np.ndarray:
        return self.response_basis.deriv(y) * self._x(y, x)

    def to_dict(self):
        return {
            "kind": "varying",
            "response": self.response_basis.to_dict(),
            "covariate": self.covariate,
            "covariate_support": self.covariate_support.to_dict(),
        }


@dataclass(frozen=True)
class CompositeBasis:
    """Bernstein basis followed by a varying-coefficient term in the same response basis.

    ``h(y, x) = a(y) @ theta + x * a(y) @ gamma``.  Since ``h`` is linear in
    ``x``, it is monotone in ``y`` on the covariate support whenever the
    two corner polynomials ``theta + lo * gamma`` and ``theta + hi * gamma``
    have non-decreasing coefficients; those are the monotonicity rows and
    the positive components of the working map.
    """

    base: BernsteinBasis
    varying: VaryingCoefBasis

    kind = "composite"

    def __post_init__(self):
        if self.varying.response_basis != self.base:
            raise ValueError("varying term must share the response basis")

    @property
    def covariates(self):
        return self.varying.covariates

    @property
    def dim(self) -> int:
        return self.base.dim + self.varying.dim

    def eval(self, y, x=None) -> np.ndarray:
        return np.hstack([self.base.eval(y), self.varying.eval(y, x)])

    def deriv(self, y, x=None) -> np.ndarray:
        return np.hstack([self.base.deriv(y), self.varying.deriv(y, x)])

    def monotonicity_rows(self) -> np.ndarray:
        d = _difference_rows(self.base.dim)
        sup = self.varying.covariate_support
        return np.vstack([np.hstack([d, c * d]) for c in (sup.lower, sup.upper)])

    def working_map(self):
        m = self.base.dim
        lo, hi = self.varying.covariate_support.lower, self.varying.covariate_support.upper
        L = _cumsum_matrix(m)
        r = hi - lo
        a = np.block([[hi / r * L, -lo / r * L], [-L / r, L / r]])
        pos = np.ones(2 * m, dtype=bool)
        pos[[0, m]] = False
        return a, pos

    def to_dict(self):
        return {"kind": "composite", "base": self.base.to_dict(), "varying": self.varying.to_dict()}


def eval_basis(basis, y, x: Mapping | None = None) -> np.ndarray:
    """Row vectors ``a(y)`` (or ``a(y, x)``), one row per response value."""
    return basis.eval(y, x)


def eval_basis_deriv(basis, y, x: Mapping | None = None) -> np.ndarray:
    """Exact derivative of :func:`eval_basis` in the response."""
    return basis.deriv(y, x)


def monotonicity_rows(basis) -> np.ndarray:
    """Difference matrix ``D`` with ``D @ theta >= 0`` implying monotone ``h``."""
    return basis.monotonicity_rows()


def _support(d):
    return Support(d["lower"], d["upper"])


def basis_from_dict(d):
    kind = d["kind"]
    if kind == "bernstein":
        return BernsteinBasis(d["order"], _support(d["support"]))
    if kind == "linear":
        return LinearBasis(_support(d["support"]))
    if kind == "tensor":
        return TensorBasis(basis_from_dict(d["response"]), basis_from_dict(d["covariate_basis"]), d["covariate"])
    if kind == "varying":
        return VaryingCoefBasis(basis_from_dict(d["response"]), d["covariate"], _support(d["covariate_support"]))
    if kind == "composite":
        return CompositeBasis(basis_from_dict(d["base"]), basis_from_dict(d["varying"]))
    raise ValueError(f"unknown basis kind {kind!r}")

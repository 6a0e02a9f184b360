"""Model specification and the weighted log-likelihood.

A model is ``P(Y <= y | x) = F(h(y | x))`` with

    h(y | x) = a(y, x) @ theta[cell(x)] - s(x) @ beta

where ``a`` is a transformation basis, ``cell(x)`` the stratum cell and
``s(x)`` the shift design row.  Parameters are laid out as the theta
blocks in stratum-cell order followed by ``beta`` in design-column order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import special

from .basis import BernsteinBasis, CompositeBasis, LinearBasis, TensorBasis, basis_from_dict
from .data import Dataset, ShiftDesign, StratumIndex

__all__ = [
    "Link",
    "PROBIT",
    "LOGIT",
    "get_link",
    "ModelSpec",
    "Design",
    "NonMonotoneError",
    "h_eval",
    "h_deriv",
    "loglik",
    "loglik_obs",
    "score",
    "score_obs",
    "hessian",
]

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class NonMonotoneError(ValueError):
    """The transformation function is not increasing at some observation."""


@dataclass(frozen=True)
class Link:
    """Inverse link ``F``: a continuous distribution function on the real line."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("probit", "logit"):
            raise ValueError(f"unknown link {self.kind!r}")

    def cdf(self, z):
        z = np.asarray(z, dtype=float)
        return special.ndtr(z) if self.kind == "probit" else special.expit(z)

    def sf(self, z):
        """``1 - F(z)`` computed without cancellation."""
        z = np.asarray(z, dtype=float)
        return special.ndtr(-z) if self.kind == "probit" else special.expit(-z)

    def ppf(self, p):
        p = np.asarray(p, dtype=float)
        return special.ndtri(p) if self.kind == "probit" else special.logit(p)

    def logpdf(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "probit":
            return -0.5 * z * z - _HALF_LOG_2PI
        return -np.abs(z) - 2.0 * np.log1p(np.exp(-np.abs(z)))

    def pdf(self, z):
        return np.exp(self.logpdf(z))

    def dpdf(self, z):
        """``F''(z)``."""
        return self.pdf(z) * self.dlogpdf(z)

    def dlogpdf(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "probit":
            return -z
        return 1.0 - 2.0 * special.expit(z)

    def d2logpdf(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "probit":
            return -np.ones_like(z)
        p = special.expit(z)
        return -2.0 * p * (1.0 - p)


PROBIT = Link("probit")
LOGIT = Link("logit")


def get_link(kind) -> Link:
    return kind if isinstance(kind, Link) else Link(str(kind))


def _basis_labels(trafo) -> list:
    if isinstance(trafo, LinearBasis):
        return ["0", "1"]
    if isinstance(trafo, BernsteinBasis):
        return [str(k) for k in range(trafo.dim)]
    if isinstance(trafo, TensorBasis):
        mx = trafo.covariate_basis.dim
        return [f"{j // mx},{trafo.covariate}:{j % mx}" for j in range(trafo.dim)]
    if isinstance(trafo, CompositeBasis):
        m = trafo.base.dim
        return [str(k) for k in range(m)] + [f"{trafo.varying.covariate}:{k}" for k in range(m)]
    return [str(k) for k in range(trafo.dim)]


@dataclass(frozen=True)
class ModelSpec:
    """Link, transformation basis, optional strata and optional shift terms."""

    link: Link
    trafo: object
    strata: StratumIndex | None = None
    shifts: ShiftDesign | None = None
    response: str = "y"
    formula: str | None = field(default=None, compare=False)

    @property
    def n_cells(self) -> int:
        return 1 if self.strata is None else self.strata.n_cells

    @property
    def n_theta(self) -> int:
        return self.n_cells * self.trafo.dim

    @property
    def n_beta(self) -> int:
        return 0 if self.shifts is None else self.shifts.dim

    @property
    def n_params(self) -> int:
        return self.n_theta + self.n_beta

    @property
    def covariates(self) -> tuple:
        names = list(self.trafo.covariates)
        if self.strata is not None:
            names += list(self.strata.variables)
        if self.shifts is not None:
            names += list(self.shifts.variables)
        return tuple(dict.fromkeys(names))

    def param_names(self) -> list:
        labels = _basis_labels(self.trafo)
        if self.strata is None:
            names = [f"theta[{lab}]" for lab in labels]
        else:
            names = [f"theta[{cell}][{lab}]" for cell in self.strata.cell_names() for lab in labels]
        if self.shifts is not None:
            names += [f"beta[{c}]" for c in self.shifts.columns]
        return names

    def unconditional(self) -> "ModelSpec":
        """Same link and basis with strata and shift terms removed."""
        return ModelSpec(self.link, self.trafo, None, None, self.response)

    def design(self, y, x=None) -> "Design":
        """Design matrices for ``h`` and ``h'`` at responses ``y`` and covariates ``x``."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        n = y.size
        a = self.trafo.eval(y, x)
        ad = self.trafo.deriv(y, x)
        m = self.trafo.dim
        X = np.zeros((n, self.n_params))
        Xd = np.zeros((n, self.n_params))
        if self.n_cells == 1:
            X[:, :m] = a
            Xd[:, :m] = ad
        else:
            cell = self.strata.lookup(x)
            if cell.size == 1 and n > 1:
                cell = np.repeat(cell, n)
            rows = np.arange(n)[:, None]
            cols = cell[:, None] * m + np.arange(m)[None, :]
            X[rows, cols] = a
            Xd[rows, cols] = ad
        if self.n_beta:
            X[:, self.n_theta :] = -self.shifts.matrix(x, n)
        return Design(self.link, X, Xd)

    def dataset_design(self, d: Dataset, weights=None) -> "Design":
        des = self.design(d.response, d)
        des.weights = d.weights if weights is None else np.asarray(weights, dtype=float)
        return des

    def check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"parameter vector has shape {theta.shape}, expected ({self.n_params},)")
        return theta

    def to_dict(self):
        out = {
            "response": self.response,
            "link": self.link.kind,
            "trafo": self.trafo.to_dict(),
            "strata": None,
            "shifts": None if self.shifts is None else self.shifts.to_dict(),
        }
        if self.formula is not None:
            out["formula"] = self.formula
        if self.strata is not None:
            out["strata"] = {
                "variables": list(self.strata.variables),
                "levels": [list(lv) for lv in self.strata.levels],
                "cells": [list(c) for c in self.strata.cells],
            }
        return out

    @classmethod
    def from_dict(cls, d):
        strata = None
        if d.get("strata") is not None:
            s = d["strata"]
            strata = StratumIndex(
                tuple(s["variables"]),
                tuple(tuple(lv) for lv in s["levels"]),
                tuple(tuple(c) for c in s["cells"]),
                np.zeros(0, dtype=np.int64),
            )
        shifts = None if d.get("shifts") is None else ShiftDesign.from_dict(d["shifts"])
        return cls(get_link(d["link"]), basis_from_dict(d["trafo"]), strata, shifts, d["response"], d.get("formula"))


@dataclass
class Design:
    """Precomputed ``h = X @ theta`` and ``h' = Xd @ theta`` with case weights."""

    link: Link
    X: np.ndarray
    Xd: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(self.X.shape[0])

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, idx, weights=None) -> "Design":
        w = self.weights[idx] if weights is None else weights
        return Design(self.link, self.X[idx], self.Xd[idx], w)

    def _eval(self, theta):
        h = self.X @ theta
        hd = self.Xd @ theta
        if np.any(hd[self.weights > 0] <= 0) or not np.all(np.isfinite(hd)):
            bad = int(np.flatnonzero(~(hd > 0))[0])
            raise NonMonotoneError(f"transformation not increasing at observation {bad} (h' = {hd[bad]:.3g})")
        return h, hd

    def loglik_obs(self, theta) -> np.ndarray:
        h, hd = self._eval(theta)
        with np.errstate(divide="ignore"):
            return self.weights * (self.link.logpdf(h) + np.log(hd))

    def loglik(self, theta) -> float:
        return float(np.sum(self.loglik_obs(theta)))

    def score_obs(self, theta) -> np.ndarray:
        h, hd = self._eval(theta)
        w = self.weights
        return (w * self.link.dlogpdf(h))[:, None] * self.X + (w / hd)[:, None] * self.Xd

    def score(self, theta) -> np.ndarray:
        h, hd = self._eval(theta)
        w = self.weights
        return self.X.T @ (w * self.link.dlogpdf(h)) + self.Xd.T @ (w / hd)

    def hessian(self, theta) -> np.ndarray:
        h, hd = self._eval(theta)
        w = self.weights
        H = (self.X.T * (w * self.link.d2logpdf(h))) @ self.X - (self.Xd.T * (w / hd**2)) @ self.Xd
        return 0.5 * (H + H.T)

    def all(self, theta):
        """(loglik, score, hessian) from a single evaluation of ``h``."""
        h, hd = self._eval(theta)
        w = self.weights
        with np.errstate(divide="ignore"):
            ll = float(np.sum(w * (self.link.logpdf(h) + np.log(hd))))
        g = self.X.T @ (w * self.link.dlogpdf(h)) + self.Xd.T @ (w / hd)
        H = (self.X.T * (w * self.link.d2logpdf(h))) @ self.X - (self.Xd.T * (w / hd**2)) @ self.Xd
        return ll, g, 0.5 * (H + H.T)


def _as_design(spec: ModelSpec, d, weights=None) -> Design:
    if isinstance(d, Design):
        return d if weights is None else d.subset(slice(None), np.asarray(weights, dtype=float))
    return spec.dataset_design(d, weights)


def h_eval(spec: ModelSpec, theta, y, x: Mapping | None = None) -> np.ndarray:
    """Transformation function ``h(y | x)`` including the shift term."""
    theta = spec.check(theta)
    return spec.design(y, x).X @ theta


def h_deriv(spec: ModelSpec, theta, y, x: Mapping | None = None) -> np.ndarray:
    """Derivative of ``h(y | x)`` in ``y``."""
    theta = spec.check(theta)
    return spec.design(y, x).Xd @ theta


def loglik(spec: ModelSpec, theta, d, weights=None) -> float:
    """Weighted log-likelihood ``sum_i w_i [log F'(h_i) + log h'_i]``."""
    return _as_design(spec, d, weights).loglik(spec.check(theta))


def loglik_obs(spec: ModelSpec, theta, d, weights=None) -> np.ndarray:
    return _as_design(spec, d, weights).loglik_obs(spec.check(theta))


def score(spec: ModelSpec, theta, d, weights=None) -> np.ndarray:
    return _as_design(spec, d, weights).score(spec.check(theta))


def score_obs(spec: ModelSpec, theta, d, weights=None) -> np.ndarray:
    """Weighted per-observation score contributions (``n x p``)."""
    return _as_design(spec, d, weights).score_obs(spec.check(theta))


def hessian(spec: ModelSpec, theta, d, weights=None) -> np.ndarray:
    return _as_design(spec, d, weights).hessian(spec.check(theta))

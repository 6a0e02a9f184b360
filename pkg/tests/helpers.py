"""Shared data generators and closed-form oracles for the test-suite."""

from __future__ import annotations

import numpy as np

from transmod.basis import LinearBasis, Support
from transmod.data import Column, Dataset
from transmod.model import PROBIT, ModelSpec


def normal_sample(n, mu, sigma, seed, weighted=True):
    """Normal responses with optional log-normal case weights."""
    rng = np.random.default_rng(seed)
    y = rng.normal(mu, sigma, size=n)
    w = rng.lognormal(0.0, 0.5, size=n) if weighted else np.ones(n)
    return Dataset(y, {}, w)


def normal_oracle(y, w):
    """Closed-form weighted normal MLE ``(mu, sigma, loglik)``."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    mu = np.sum(w * y) / np.sum(w)
    s2 = np.sum(w * (y - mu) ** 2) / np.sum(w)
    ll = np.sum(w * (-0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - mu) ** 2 / s2))
    return mu, np.sqrt(s2), ll


def normal_loglik(y, w, mu, sigma):
    return float(np.sum(w * (-0.5 * np.log(2 * np.pi * sigma**2) - 0.5 * ((y - mu) / sigma) ** 2)))


def linear_probit(d: Dataset) -> ModelSpec:
    return ModelSpec(PROBIT, LinearBasis(Support.from_data(d.response)), response=d.response_name)


def theta_from_normal(mu, sigma):
    return np.array([-mu / sigma, 1.0 / sigma])


def grouped_sample(n, seed, shift=0.0, scale=1.0, groups=("a", "b")):
    """Two groups; the second has mean ``shift`` and standard deviation ``scale``."""
    rng = np.random.default_rng(seed)
    g = rng.choice(np.array(groups, dtype=object), size=n)
    second = g == groups[1]
    y = rng.normal(size=n) * np.where(second, scale, 1.0) + np.where(second, shift, 0.0)
    return Dataset(y, {"g": Column("g", g, tuple(groups))}, None)


def noise_covariates(d: Dataset, k, seed, prefix="z"):
    """``d`` with ``k`` additional independent covariates (numeric and categorical, alternating)."""
    rng = np.random.default_rng(seed)
    cols = dict(d.covariates)
    for j in range(k):
        name = f"{prefix}{j + 1}"
        if j % 2 == 0:
            cols[name] = Column(name, rng.normal(size=d.n))
        else:
            levels = ("p", "q", "r")
            cols[name] = Column(name, rng.choice(np.array(levels, dtype=object), size=d.n), levels)
    return Dataset(d.response, cols, d.weights, d.response_name, d.weight_name)


def random_feasible_theta(spec: ModelSpec, rng, spread=1.0):
    """Random parameters whose theta blocks satisfy the monotonicity rows strictly."""
    a, pos = spec.trafo.working_map()
    blocks = []
    for _ in range(spec.n_cells):
        z = rng.normal(0.0, spread, size=a.shape[1])
        z[pos] = rng.uniform(0.2, 1.5, size=int(pos.sum())) * spread
        blocks.append(a @ z)
    beta = rng.normal(0.0, 0.3, size=spec.n_beta)
    return np.concatenate(blocks + [beta])


def central_difference(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps * max(1.0, abs(x[j]))
        g[j] = (f(x + e) - f(x - e)) / (2 * e[j])
    return g

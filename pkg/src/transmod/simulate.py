"""Synthetic health-survey data.

The generator draws covariates with the survey schema (sex, smoking, age
and six lifestyle variables) and BMI from a known logit transformation
model by inverse-CDF sampling:

    P(BMI <= y | x) = expit(c(x) * a(y) @ theta[sex] - s(x))

``a`` is a Bernstein basis of order 5 on ``[12, 40]``, ``theta[sex]`` a
sex-specific monotone coefficient vector, ``c(x) > 0`` an age-dependent
scale for males (variance grows with age) and ``s(x)`` a shift collecting
sex-specific smoking effects, age slopes, a bump for females around age
30 and lifestyle main effects.  ``effects`` scales every covariate effect;
with ``effects=0`` all rows share the baseline distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .basis import BernsteinBasis, Support
from .data import Column, Dataset

__all__ = ["LEVELS", "SurveyGenerator", "simulate_survey"]

LEVELS = {
    "sex": ("female", "male"),
    "smoking": ("never", "former", "light", "medium", "heavy"),
    "fv": ("high", "low"),
    "activity": ("high", "moderate", "low"),
    "edu": ("mandatory", "secondary", "tertiary"),
    "nat": ("swiss", "foreign"),
    "region": ("german", "french", "italian"),
}

_PROBS = {
    "sex": (0.5, 0.5),
    "smoking": (0.5, 0.2, 0.12, 0.1, 0.08),
    "fv": (0.6, 0.4),
    "activity": (0.35, 0.4, 0.25),
    "edu": (0.2, 0.55, 0.25),
    "nat": (0.8, 0.2),
    "region": (0.65, 0.27, 0.08),
}

_THETA0 = np.array([-8.0, -4.0, -1.0, 1.5, 4.0, 8.0])
_MALE_DELTA = np.array([0.6, 0.2, -0.5, -0.6, -0.4, 0.3])
_SMOKING = {"female": (0.0, 0.15, -0.1, 0.05, 0.2), "male": (0.0, 0.3, -0.05, 0.1, 0.15)}
_LIFESTYLE = {
    "fv": (0.0, 0.1),
    "activity": (0.0, 0.15, 0.35),
    "edu": (0.0, -0.15, -0.4),
    "nat": (0.0, 0.1),
    "region": (0.0, -0.2, -0.05),
}


@dataclass(frozen=True)
class SurveyGenerator:
    """Known conditional BMI distribution of the synthetic survey."""

    effects: float = 1.0
    support: Support = Support(12.0, 40.0)

    def __post_init__(self):
        if self.effects < 0:
            raise ValueError("effects must be non-negative")

    @property
    def basis(self) -> BernsteinBasis:
        return BernsteinBasis(5, self.support)

    def _parts(self, x):
        e = self.effects
        sex = np.asarray(x["sex"], dtype=object)
        male = sex == "male"
        n = sex.size
        theta = np.tile(_THETA0, (n, 1)) + e * male[:, None] * _MALE_DELTA
        age = np.asarray(x["age"], dtype=float)
        scale = np.where(male, 1.0 - 0.25 * min(e, 1.0) * (age - 18.0) / 56.0, 1.0)
        smk = np.asarray(x["smoking"], dtype=object)
        s = np.zeros(n)
        for k, lev in enumerate(LEVELS["smoking"]):
            s += np.where(male, _SMOKING["male"][k], _SMOKING["female"][k]) * (smk == lev)
        s += np.where(male, 0.3, 0.35) * (age - 45.0) / 10.0
        s += np.where(male, 0.0, 0.8 * np.exp(-(((age - 30.0) / 6.0) ** 2)))
        s += 0.01 * np.asarray(x["alcohol"], dtype=float)
        for var, eff in _LIFESTYLE.items():
            v = np.asarray(x[var], dtype=object)
            for k, lev in enumerate(LEVELS[var]):
                s += eff[k] * (v == lev)
        return theta, scale, e * s

    def h(self, y, x) -> np.ndarray:
        theta, scale, s = self._parts(x)
        a = self.basis.eval(np.asarray(y, dtype=float))
        return scale * np.sum(a * theta, axis=1) - s

    def cdf(self, y, x) -> np.ndarray:
        return special.expit(self.h(y, x))

    def quantile(self, p, x) -> np.ndarray:
        target = special.logit(np.asarray(p, dtype=float))
        theta, scale, s = self._parts(x)
        lo = np.full(target.size, self.support.lower)
        hi = np.full(target.size, self.support.upper)
        basis = self.basis

        def hv(y):
            return scale * np.sum(basis.eval(y) * theta, axis=1) - s

        w = self.support.width
        while True:
            bad_lo, bad_hi = hv(lo) > target, hv(hi) < target
            if not (bad_lo.any() or bad_hi.any()):
                break
            lo, hi, w = np.where(bad_lo, lo - w, lo), np.where(bad_hi, hi + w, hi), 2 * w
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            below = hv(mid) < target
            lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def sample_covariates(self, n: int, rng) -> dict:
        x = {}
        for var in ("sex", "smoking"):
            x[var] = rng.choice(np.array(LEVELS[var], dtype=object), size=n, p=_PROBS[var])
        x["age"] = rng.integers(18, 75, size=n).astype(float)
        x["alcohol"] = np.round(rng.gamma(0.8, 12.0, size=n), 1)
        for var in ("fv", "activity", "edu", "nat", "region"):
            x[var] = rng.choice(np.array(LEVELS[var], dtype=object), size=n, p=_PROBS[var])
        return x


def simulate_survey(n: int, seed: int = 1, effects: float = 1.0, weighted: bool = False, digits: int = 2) -> Dataset:
    """Draw ``n`` synthetic survey participants.

    Parameters
    ----------
    n : int
        Sample size (positive).
    seed : int
    effects : float
        Multiplier for every covariate effect; 0 gives identically
        distributed BMI values.
    weighted : bool
        Draw log-normal sampling weights with mean one instead of unit
        weights.
    digits : int
        BMI is rounded to this many decimals.
    """
    if int(n) <= 0:
        raise ValueError("n must be positive")
    n = int(n)
    rng = np.random.default_rng(seed)
    gen = SurveyGenerator(effects)
    x = gen.sample_covariates(n, rng)
    u = rng.uniform(size=n)
    bmi = np.round(gen.quantile(u, x), digits)
    if weighted:
        w = rng.lognormal(0.0, 0.5, size=n)
        w = np.round(w / w.mean(), 6)
    else:
        w = np.ones(n)
    cols = {}
    for k, v in x.items():
        cols[k] = Column(k, v, LEVELS.get(k))
    return Dataset(bmi, cols, w, "bmi", "weight")

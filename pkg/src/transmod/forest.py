"""Transformation forests.

Trees are grown on subsamples drawn without replacement with a random
subset of candidate covariates in every node.  Parameters for a covariate
profile ``x`` are obtained by refitting the base model with
nearest-neighbour weights: observation ``i`` receives ``1 / n_leaf`` from
every tree in whose subsample it lies in the same leaf as ``x``.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .fit import FitError, FitOptions, FittedModel, SpecificationError, mle
from .model import ModelSpec
from .predict import DECILES, quantile
from .tree import LeafModel, TransformationTree, TreeControl, _variable_types, grow_tree

log = logging.getLogger(__name__)

__all__ = [
    "ForestControl",
    "TransformationForest",
    "ForestError",
    "LocalModel",
    "fit_forest",
    "nn_weights",
    "forest_params",
    "forest_loglik",
    "var_importance",
    "partial_dependence",
]

FOREST_FORMAT = 1
_SUBSAMPLE_TAG = 2**31 - 1


class ForestError(RuntimeError):
    """Growing one of the trees failed."""


def _forest_tree_control():
    return TreeControl(alpha=1.0, min_split=40.0, min_leaf=20.0, test="asymptotic")


@dataclass(frozen=True)
class ForestControl:
    """Ensemble settings.

    ``mtry`` is the number of covariates tried per node (``None`` for
    ``ceil(sqrt(V))``, ``"all"`` for every covariate).  ``tree`` holds the
    per-tree stopping rules; by default there is no significance gate and
    trees grow until the size limits bind.
    """

    n_trees: int = 100
    fraction: float = 0.632
    mtry: int | str | None = None
    tree: TreeControl = field(default_factory=_forest_tree_control)
    seed: int = 1
    threads: int = field(default=1, compare=False)

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.mtry is not None and self.mtry != "all" and int(self.mtry) < 1:
            raise ValueError("mtry must be positive")

    def resolve_mtry(self, n_vars: int) -> int:
        if self.mtry is None:
            return max(1, math.ceil(math.sqrt(n_vars)))
        if self.mtry == "all":
            return n_vars
        return min(int(self.mtry), n_vars)

    def to_dict(self):
        return {
            "n_trees": self.n_trees,
            "fraction": self.fraction,
            "mtry": self.mtry,
            "tree": self.tree.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_trees"], d["fraction"], d["mtry"], TreeControl.from_dict(d["tree"]), d["seed"])


def _map(func, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(func, items))
    return [func(it) for it in items]


@dataclass(frozen=True)
class LocalModel:
    """Locally adaptive parameters; ``widened`` marks the ancestor-node fallback."""

    spec: ModelSpec
    theta: np.ndarray
    widened: bool = False
    failed: bool = False


@dataclass
class TransformationForest:
    spec: ModelSpec
    trees: list
    subsamples: list
    control: ForestControl
    data: Dataset
    variables: dict
    base_fit: FittedModel
    _members: list = field(default=None, repr=False)
    _parents: list = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._members = []
        self._parents = []
        for t, rows in zip(self.trees, self.subsamples):
            m = t.members(self.data.subset(rows))
            self._members.append({k: rows[v] for k, v in m.items()})
            self._parents.append(t.parents())

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def leaf_ids(self, x, n=None) -> np.ndarray:
        """Terminal node ids, one column per tree."""
        return np.column_stack([t.route(x, n) for t in self.trees])

    def _weights(self, signature):
        w = np.zeros(self.data.n)
        for b, node in enumerate(signature):
            rows = self._members[b][node]
            if rows.size:
                w[rows] += 1.0 / rows.size
        return w

    def _degenerate(self, nn):
        w = nn * self.data.weights
        pos = w > 0
        return np.count_nonzero(pos) < self.spec.n_params or np.unique(self.data.response[pos]).size < 2

    def _widen(self, signature):
        return tuple(self._parents[b].get(node, node) for b, node in enumerate(signature))

    def _fit_signature(self, signature) -> LocalModel:
        if signature in self._cache:
            return self._cache[signature]
        sig = tuple(signature)
        nn = self._weights(sig)
        widened = False
        while self._degenerate(nn):
            wider = self._widen(sig)
            if wider == sig:
                break
            sig, widened = wider, True
            nn = self._weights(sig)
        try:
            fm = mle(self.spec, self.data, FitOptions(start=self.base_fit.theta), weights=nn * self.data.weights)
            out = LocalModel(self.spec, fm.theta, widened)
        except (SpecificationError, FitError) as e:
            log.warning("local fit failed (%s); using the unconditional estimate", e)
            out = LocalModel(self.spec, self.base_fit.theta, widened, True)
        self._cache[signature] = out
        return out

    def params(self, x, n=None, threads=None) -> list:
        """Local models for every row of ``x`` (fits shared across equal leaf signatures)."""
        ids = self.leaf_ids(x, n)
        sigs = [tuple(int(v) for v in row) for row in ids]
        uniq = list(dict.fromkeys(s for s in sigs if s not in self._cache))
        fitted = _map(self._fit_uncached, uniq, threads or self.control.threads)
        for s, m in zip(uniq, fitted):
            self._cache[s] = m
        return [self._cache[s] for s in sigs]

    def _fit_uncached(self, signature):
        return self._fit_signature(signature)

    def to_dict(self):
        return {
            "format": FOREST_FORMAT,
            "spec": self.spec.to_dict(),
            "control": self.control.to_dict(),
            "variables": {k: (list(v) if v is not None else None) for k, v in self.variables.items()},
            "base_theta": self.base_fit.theta.tolist(),
            "trees": [{"subsample": rows.tolist(), "tree": t.to_dict()} for t, rows in zip(self.trees, self.subsamples)],
        }

    @classmethod
    def from_dict(cls, doc, d: Dataset):
        spec = ModelSpec.from_dict(doc["spec"])
        trees = [TransformationTree.from_dict(t["tree"]) for t in doc["trees"]]
        subs = [np.asarray(t["subsample"], dtype=np.int64) for t in doc["trees"]]
        variables = {k: (tuple(v) if v is not None else None) for k, v in doc["variables"].items()}
        base = mle(spec, d, FitOptions(start=np.asarray(doc["base_theta"])))
        return cls(spec, trees, subs, ForestControl.from_dict(doc["control"]), d, variables, base)


def _subsample(n, fraction, seed):
    m = max(1, int(round(fraction * n)))
    if m >= n:
        return np.arange(n)
    rng = np.random.default_rng([int(seed), _SUBSAMPLE_TAG])
    return np.sort(rng.choice(n, size=m, replace=False))


def fit_forest(d: Dataset, base: ModelSpec, ctrl: ForestControl | None = None, variables=None) -> TransformationForest:
    """Grow ``ctrl.n_trees`` transformation trees; tree ``b`` uses seed ``ctrl.seed + b``."""
    ctrl = ctrl or ForestControl()
    types = _variable_types(d, variables)
    mtry = ctrl.resolve_mtry(len(types))
    tctrl = replace(ctrl.tree, mtry=mtry if mtry < len(types) else None)
    base_fit = mle(base, d)

    def grow(b):
        seed = ctrl.seed + b
        rows = _subsample(d.n, ctrl.fraction, seed)
        try:
            return rows, grow_tree(d, base, replace(tctrl, seed=seed), rows, types, seed)
        except Exception as e:
            raise ForestError(f"tree {b}: {e}") from e

    grown = _map(grow, range(ctrl.n_trees), ctrl.threads)
    return TransformationForest(base, [t for _, t in grown], [r for r, _ in grown], ctrl, d, types, base_fit)


def nn_weights(f: TransformationForest, x) -> np.ndarray:
    """Nearest-neighbour weights of the training rows for a single profile ``x``."""
    sig = tuple(int(v) for v in f.leaf_ids(x, 1)[0])
    return f._weights(sig)


def forest_params(f: TransformationForest, x) -> LocalModel:
    """Locally adaptive maximum-likelihood parameters for a single profile ``x``."""
    return f.params(x, 1)[0]


def forest_loglik(f: TransformationForest, d: Dataset | None = None) -> float:
    """``sum_i w_i log f(y_i | theta(x_i))`` with forest parameters per row."""
    d = f.data if d is None else d
    models = f.params(d, d.n)
    des = f.spec.dataset_design(d)
    out = np.empty(d.n)
    groups = {}
    for i, m in enumerate(models):
        groups.setdefault(id(m), (m, []))[1].append(i)
    for m, rows in groups.values():
        rows = np.asarray(rows)
        out[rows] = des.subset(rows).loglik_obs(m.theta)
    return float(np.sum(out))


def var_importance(f, d: Dataset | None = None, repeats: int = 5, seed: int | None = None, oob: bool = False) -> dict:
    """Mean decrease of the per-tree log-likelihood after permuting each covariate.

    ``f`` is a forest or a single tree (``d`` is then required).  Every
    tree is evaluated on its own subsample (or on the rows outside it with
    ``oob=True``); the permutation is applied to the full data before
    routing.  Covariates never used for splitting route every row exactly
    as before and get importance 0.
    """
    if isinstance(f, TransformationTree):
        if d is None:
            raise ValueError("data are required for the importance of a tree")
        trees, subsamples = [f], [np.arange(d.n)]
        seed = f.control.seed if seed is None else seed
    else:
        d = f.data if d is None else d
        trees, subsamples = f.trees, f.subsamples
        seed = f.control.seed if seed is None else seed
    des = f.spec.dataset_design(d)
    rows_b = []
    for rows in subsamples:
        if oob:
            mask = np.ones(d.n, dtype=bool)
            mask[rows] = False
            rows = np.flatnonzero(mask)
        rows_b.append(rows)
    base = [float(np.sum(t.loglik_rows(d.subset(r), design=des.subset(r)))) if r.size else 0.0 for t, r in zip(trees, rows_b)]
    out = {}
    for j, v in enumerate(f.variables):
        total = 0.0
        used = [v in t.split_variables() for t in trees]
        if not any(used):
            out[v] = 0.0
            continue
        for k in range(repeats):
            rng = np.random.default_rng([int(seed), j, k])
            perm = rng.permutation(d.n)
            dp = d.with_column(v, d[v][perm])
            dec = 0.0
            for b, (t, r) in enumerate(zip(trees, rows_b)):
                if not used[b] or r.size == 0:
                    continue
                ll = float(np.sum(t.loglik_rows(d.subset(r), x=dp.subset(r), design=des.subset(r))))
                dec += base[b] - ll
            total += dec / len(trees)
        out[v] = total / repeats
    return out


def _default_grid(d: Dataset, v, size=10):
    c = d.column(v)
    if c.is_categorical:
        present = set(c.values.tolist())
        return [lev for lev in c.levels if lev in present]
    lo, hi = np.quantile(c.values, [0.05, 0.95])
    return np.unique(np.round(np.linspace(lo, hi, size), 6)).tolist()


def partial_dependence(f, variables, grid: dict | None = None, max_rows: int = 50, probs=DECILES, data: Dataset | None = None) -> list:
    """Decile table of the partial dependence on ``variables``.

    For every grid point the model parameters are averaged over up to
    ``max_rows`` evenly spaced rows of ``data`` (the training data of a
    forest by default) with ``variables`` set to the grid values;
    conditional deciles of the averaged model are reported in long format
    (one row per grid point and probability).  ``f`` is a forest or a tree.
    """
    d = getattr(f, "data", None) if data is None else data
    if d is None:
        raise ValueError("data are required for the partial dependence of a tree")
    variables = list(variables)
    grid = dict(grid or {})
    for v in variables:
        if v not in f.variables:
            raise ValueError(f"{v!r} is not a partitioning covariate")
        grid.setdefault(v, _default_grid(d, v))
    rows = np.unique(np.linspace(0, d.n - 1, min(max_rows, d.n)).astype(int))
    sub = d.subset(rows)
    out = []
    for point in itertools.product(*(grid[v] for v in variables)):
        xs = {v: sub[v] for v in f.variables}
        for v, val in zip(variables, point):
            xs[v] = np.repeat(np.asarray([val], dtype=object if f.variables[v] is not None else float), rows.size)
        models = f.params(xs, rows.size)
        theta = np.mean([m.theta for m in models], axis=0)
        q = quantile(LeafModel(f.spec, theta), probs)
        for p, qq in zip(probs, q):
            rec = dict(zip(variables, point))
            rec["p"] = float(p)
            rec["quantile"] = float(qq)
            out.append(rec)
    return out

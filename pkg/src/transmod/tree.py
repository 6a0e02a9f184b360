"""Transformation trees.

Every node fits the unconditional model, correlates the per-observation
score contributions with each candidate covariate through a linear
permutation statistic and splits on the most significant covariate at the
cutpoint maximising a two-sample score statistic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
from scipy import stats

from .data import Dataset
from .fit import FitError, FitOptions, SpecificationError, mle_design
from .model import ModelSpec, NonMonotoneError

log = logging.getLogger(__name__)

__all__ = [
    "TreeControl",
    "Split",
    "TreeNode",
    "TransformationTree",
    "RoutingError",
    "LeafModel",
    "fit_tree",
    "tree_loglik",
    "predict_tree",
    "independence_test",
]

TREE_FORMAT = 1


class RoutingError(ValueError):
    """An observation cannot be routed through a split (unknown level or missing value)."""


@dataclass(frozen=True)
class TreeControl:
    """Stopping rules and test settings.

    ``test`` is ``"permutation"`` (Monte-Carlo p-values of the max-type
    statistic) or ``"asymptotic"`` (chi-squared p-values of the quadratic
    statistic).  ``mtry`` limits the covariates tested per node to a
    random subset of that size.
    """

    alpha: float = 0.05
    min_split: float = 200.0
    min_leaf: float = 70.0
    max_depth: int | None = None
    seed: int = 1
    n_perm: int = 9999
    test: str = "permutation"
    mtry: int | None = None
    split_range: tuple = (0.1, 0.9)
    max_levels: int = 10

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.min_leaf > self.min_split:
            raise ValueError("min_leaf must not exceed min_split")
        if self.test not in ("permutation", "asymptotic"):
            raise ValueError(f"unknown test {self.test!r}")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "min_split": self.min_split,
            "min_leaf": self.min_leaf,
            "max_depth": self.max_depth,
            "seed": self.seed,
            "n_perm": self.n_perm,
            "test": self.test,
            "mtry": self.mtry,
            "split_range": list(self.split_range),
            "max_levels": self.max_levels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["split_range"] = tuple(d["split_range"])
        return cls(**d)


@dataclass(frozen=True)
class Split:
    """``x <= cutpoint`` (numeric) or ``x in left_levels`` (categorical) goes left."""

    variable: str
    cutpoint: float | None = None
    left_levels: tuple | None = None
    levels: tuple | None = None  # all levels known to the model

    @property
    def is_categorical(self) -> bool:
        return self.left_levels is not None

    def goes_left(self, values) -> np.ndarray:
        if self.is_categorical:
            vals = np.atleast_1d(np.asarray(values, dtype=object))
            known = set(self.levels)
            for v in vals:
                if v not in known:
                    raise RoutingError(f"level {v!r} of {self.variable!r} was not seen during training")
            left = set(self.left_levels)
            return np.array([v in left for v in vals], dtype=bool)
        x = np.atleast_1d(np.asarray(values, dtype=float))
        if np.any(np.isnan(x)):
            raise RoutingError(f"missing value in {self.variable!r}")
        return x <= self.cutpoint

    def __str__(self):
        if self.is_categorical:
            return f"{self.variable} in {{{', '.join(map(str, self.left_levels))}}}"
        return f"{self.variable} <= {self.cutpoint:g}"

    def to_dict(self):
        if self.is_categorical:
            return {"variable": self.variable, "left_levels": list(self.left_levels), "levels": list(self.levels)}
        return {"variable": self.variable, "cutpoint": self.cutpoint}

    @classmethod
    def from_dict(cls, d):
        if "left_levels" in d:
            return cls(d["variable"], None, tuple(d["left_levels"]), tuple(d["levels"]))
        return cls(d["variable"], float(d["cutpoint"]))


@dataclass
class TreeNode:
    id: int
    path: tuple
    n_obs: int
    weight: float
    theta: np.ndarray
    loglik: float
    split: Split | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    p_value: float | None = None
    statistic: float | None = None
    flag: str | None = None
    members: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    @property
    def depth(self) -> int:
        return len(self.path)

    def walk(self):
        yield self
        if not self.is_leaf:
            yield from self.left.walk()
            yield from self.right.walk()

    def to_dict(self):
        return {
            "id": self.id,
            "path": list(self.path),
            "n_obs": self.n_obs,
            "weight": self.weight,
            "theta": self.theta.tolist(),
            "loglik": self.loglik,
            "p_value": self.p_value,
            "statistic": self.statistic,
            "flag": self.flag,
            "split": None if self.split is None else self.split.to_dict(),
            "left": None if self.left is None else self.left.id,
            "right": None if self.right is None else self.right.id,
        }


@dataclass(frozen=True)
class LeafModel:
    """Parameters of the base model in one region of the covariate space."""

    spec: ModelSpec
    theta: np.ndarray


@dataclass
class TransformationTree:
    spec: ModelSpec
    root: TreeNode
    control: TreeControl
    variables: dict  # name -> levels (categorical) or None (numeric)

    @property
    def nodes(self) -> list:
        return list(self.root.walk())

    @property
    def leaves(self) -> list:
        return [n for n in self.root.walk() if n.is_leaf]

    def node(self, node_id) -> TreeNode:
        for n in self.root.walk():
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def split_variables(self) -> set:
        return {n.split.variable for n in self.root.walk() if not n.is_leaf}

    def route(self, x, n: int | None = None, depth: int | None = None) -> np.ndarray:
        """Terminal node id for each row of ``x`` (optionally stopping at ``depth``)."""
        if n is None:
            if isinstance(x, Dataset):
                n = x.n
            else:
                sizes = [np.size(x[v]) for v in self.variables if v in x]
                n = max(sizes, default=1)
        out = np.empty(n, dtype=np.int64)

        def col(v, idx):
            try:
                a = np.atleast_1d(np.asarray(x[v], dtype=object if self.variables[v] is not None else float))
            except (KeyError, ValueError):
                raise RoutingError(f"covariate {v!r} is required for routing") from None
            return a[idx] if a.size > 1 else np.repeat(a, idx.size)

        stack = [(self.root, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf or (depth is not None and node.depth >= depth) or idx.size == 0:
                out[idx] = node.id
                continue
            left = node.split.goes_left(col(node.split.variable, idx))
            stack.append((node.right, idx[~left]))
            stack.append((node.left, idx[left]))
        return out

    def leaf_models(self, x) -> list:
        return self.params(x)

    def params(self, x, n: int | None = None, threads=None) -> list:
        """Leaf model for every row of ``x``."""
        ids = self.route(x, n)
        by_id = {node.id: LeafModel(self.spec, node.theta) for node in self.root.walk()}
        return [by_id[i] for i in ids]

    def members(self, x, n: int | None = None) -> dict:
        """Row indices of ``x`` reaching every node (node id -> index array)."""
        leaf = self.route(x, n)
        out = {}
        for node in reversed(self.nodes):
            if node.is_leaf:
                out[node.id] = np.flatnonzero(leaf == node.id)
            else:
                out[node.id] = np.sort(np.concatenate([out[node.left.id], out[node.right.id]]))
        return out

    def parents(self) -> dict:
        out = {}
        for node in self.root.walk():
            if not node.is_leaf:
                out[node.left.id] = node.id
                out[node.right.id] = node.id
        return out

    def loglik_rows(self, d: Dataset, x=None, design=None) -> np.ndarray:
        """Per-row weighted log-likelihood contributions under the leaf models.

        ``x`` (defaults to ``d``) provides the covariates used for routing;
        ``design`` optionally supplies the precomputed design of ``d``.
        """
        ids = self.route(d if x is None else x, d.n)
        out = np.empty(d.n)
        des = design if design is not None else self.spec.dataset_design(d)
        by_id = {n.id: n for n in self.root.walk()}
        for i in np.unique(ids):
            rows = np.flatnonzero(ids == i)
            out[rows] = des.subset(rows).loglik_obs(by_id[i].theta)
        return out

    def loglik(self, d: Dataset) -> float:
        return float(np.sum(self.loglik_rows(d)))

    def to_dict(self):
        return {
            "format": TREE_FORMAT,
            "spec": self.spec.to_dict(),
            "control": self.control.to_dict(),
            "variables": {k: (list(v) if v is not None else None) for k, v in self.variables.items()},
            "nodes": [n.to_dict() for n in self.root.walk()],
        }

    @classmethod
    def from_dict(cls, d):
        nodes = {}
        for nd in d["nodes"]:
            nodes[nd["id"]] = TreeNode(
                nd["id"], tuple(nd["path"]), nd["n_obs"], nd["weight"], np.asarray(nd["theta"], dtype=float),
                nd["loglik"], None if nd["split"] is None else Split.from_dict(nd["split"]),
                None, None, nd["p_value"], nd["statistic"], nd["flag"],
            )
        for nd in d["nodes"]:
            if nd["left"] is not None:
                nodes[nd["id"]].left = nodes[nd["left"]]
                nodes[nd["id"]].right = nodes[nd["right"]]
        root = nodes[d["nodes"][0]["id"]]
        variables = {k: (tuple(v) if v is not None else None) for k, v in d["variables"].items()}
        return cls(ModelSpec.from_dict(d["spec"]), root, TreeControl.from_dict(d["control"]), variables)


# ---------------------------------------------------------------- tests


def _covariate_matrix(values, levels):
    """Numeric column or level indicators, constant columns removed."""
    if levels is None:
        g = np.asarray(values, dtype=float)[:, None]
    else:
        codes = _codes(values, levels)
        g = (codes[:, None] == np.arange(len(levels))[None, :]).astype(float)
    keep = np.ptp(g, axis=0) > 0 if g.shape[0] else np.zeros(g.shape[1], dtype=bool)
    return g[:, keep]


def _codes(values, levels):
    lookup = {lev: i for i, lev in enumerate(levels)}
    return np.array([lookup[v] for v in values], dtype=np.int64)


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    variable: str
    statistic: float  # max-type standardized statistic
    quadratic: float
    df: int
    p_value: float  # unadjusted
    log_p_asymptotic: float


def independence_test(S, covariates: dict, levels: dict, test="permutation", n_perm=9999, rng=None, batch=None) -> list:
    """Linear permutation tests of independence between scores and covariates.

    Parameters
    ----------
    S : (n, p) array
        Weighted score contributions.
    covariates : dict
        Name to value array (length n).
    levels : dict
        Name to level tuple (categorical) or None (numeric).
    test : {"permutation", "asymptotic"}
        Permutation p-values use the maximum absolute standardized
        statistic, shared permutations across covariates and
        ``(1 + #{T_b >= T}) / (1 + n_perm)``.  Asymptotic p-values use the
        chi-squared distribution of the quadratic statistic.
    """
    n, p = S.shape
    sumS = S.sum(axis=0)
    Sc = S - sumS / n
    VS = Sc.T @ Sc / n
    prep = {}
    results = {}
    for name, values in covariates.items():
        G = _covariate_matrix(values, levels[name])
        q = G.shape[1]
        if q == 0 or n < 2:
            results[name] = TestResult(name, 0.0, 0.0, 0, 1.0, 0.0)
            continue
        sumG = G.sum(axis=0)
        Gc = G - sumG / n
        VG = Gc.T @ Gc / n
        E = np.outer(sumG, sumS) / n
        T = G.T @ S
        cov = n * n / (n - 1.0) * np.kron(VG, VS)
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        valid = sd > 1e-10 * max(float(sd.max()), 1e-300)
        dev = (T - E).ravel()
        if not valid.any():
            results[name] = TestResult(name, 0.0, 0.0, 0, 1.0, 0.0)
            continue
        stat = float(np.max(np.abs(dev[valid] / sd[valid])))
        w, V = np.linalg.eigh(cov)
        pos = w > 1e-10 * max(float(w.max()), 1e-300)
        proj = V[:, pos].T @ dev
        quad = float(np.sum(proj**2 / w[pos]))
        df = int(pos.sum())
        logp = float(stats.chi2.logsf(quad, df))
        results[name] = TestResult(name, stat, quad, df, math.exp(logp), logp)
        prep[name] = (G, E.ravel(), sd, valid, stat, levels[name] is not None)
    if test == "permutation" and prep:
        rng = rng if rng is not None else np.random.default_rng(0)
        batch = batch or max(1, min(1000, 2_000_000 // max(n, 1)))
        counts = dict.fromkeys(prep, 0)
        done = 0
        base = np.arange(n)
        while done < n_perm:
            b = min(batch, n_perm - done)
            P = rng.permuted(np.tile(base, (b, 1)), axis=1)
            for name, (G, E, sd, valid, stat, indicators) in prep.items():
                q = G.shape[1]
                # level indicators sum to one, so the last column follows from the others
                cols = [G[:, j][P] @ S for j in range(q - 1 if indicators else q)]
                if indicators:
                    cols.append(sumS - sum(cols))
                Tb = np.stack(cols, axis=1).reshape(b, -1)
                sb = np.max(np.abs((Tb - E)[:, valid] / sd[valid]), axis=1)
                counts[name] += int(np.count_nonzero(sb >= stat * (1.0 - 1e-10)))
            done += b
        for name, c in counts.items():
            r = results[name]
            results[name] = replace(r, p_value=(1.0 + c) / (1.0 + n_perm))
    return [results[k] for k in covariates]


# ---------------------------------------------------------------- splits


def _weighted_quantile(x, w, q):
    o = np.argsort(x, kind="stable")
    cw = np.cumsum(w[o])
    return x[o][min(np.searchsorted(cw, q * cw[-1]), x.size - 1)]


def _numeric_split(x, S, w, VSp, ctrl):
    n = x.size
    o = np.argsort(x, kind="stable")
    xs = x[o]
    cumS = np.cumsum(S[o], axis=0)
    cumw = np.cumsum(w[o])
    cnt = np.arange(1, n + 1)
    lo = _weighted_quantile(x, w, ctrl.split_range[0])
    hi = _weighted_quantile(x, w, ctrl.split_range[1])
    i = np.flatnonzero((xs[:-1] < xs[1:]) & (xs[:-1] >= lo) & (xs[:-1] <= hi))
    wtot = cumw[-1]
    i = i[(cumw[i] >= ctrl.min_leaf) & (wtot - cumw[i] >= ctrl.min_leaf)]
    if i.size == 0:
        return None
    nL = cnt[i].astype(float)
    nR = n - nL
    d = cumS[i] - nL[:, None] * cumS[-1] / n
    Q = np.einsum("ij,jk,ik->i", d, VSp, d) * (n - 1.0) / (nL * nR)
    k = int(np.argmax(Q))
    return float(xs[i[k]]), float(Q[k])


def _categorical_split(codes, levels, S, w, VSp, ctrl):
    n = codes.size
    present = np.unique(codes)
    if present.size < 2:
        return None
    sums = np.array([S[codes == c].sum(axis=0) for c in present])
    cnts = np.array([np.count_nonzero(codes == c) for c in present], dtype=float)
    wts = np.array([w[codes == c].sum() for c in present])
    total = S.sum(axis=0)
    L = present.size
    if L <= ctrl.max_levels:
        candidates = []
        rest = list(range(1, L))
        for r in range(1, L):
            for right in combinations(rest, r):
                mask = np.ones(L, dtype=bool)
                mask[list(right)] = False
                candidates.append(mask)
    else:
        # order levels along the leading direction of their standardized mean scores
        means = sums / cnts[:, None] - total / n
        _, _, vt = np.linalg.svd(means * np.sqrt(cnts)[:, None], full_matrices=False)
        order = np.argsort(means @ vt[0], kind="stable")
        candidates = []
        for k in range(1, L):
            mask = np.zeros(L, dtype=bool)
            mask[order[:k]] = True
            candidates.append(mask)
    best = None
    for mask in candidates:
        wl = wts[mask].sum()
        if wl < ctrl.min_leaf or wts.sum() - wl < ctrl.min_leaf:
            continue
        nL = cnts[mask].sum()
        nR = n - nL
        d = sums[mask].sum(axis=0) - nL * total / n
        q = float(d @ VSp @ d * (n - 1.0) / (nL * nR))
        if best is None or q > best[1]:
            best = (tuple(levels[c] for c in present[mask]), q)
    return best


# ---------------------------------------------------------------- growing


def _node_rng(seed, path):
    return np.random.default_rng(np.random.SeedSequence([int(seed), len(path), *path]))


def _canonical_order(d: Dataset, rows, variables):
    keys = []
    for v, levels in reversed(list(variables.items())):
        vals = d[v][rows]
        keys.append(_codes(vals, levels) if levels is not None else np.asarray(vals, dtype=float))
    keys += [d.weights[rows], d.response[rows]]
    return rows[np.lexsort(keys)]


class _Grower:
    def __init__(self, d: Dataset, spec: ModelSpec, ctrl: TreeControl, variables: dict, seed: int):
        self.d = d
        self.spec = spec
        self.ctrl = ctrl
        self.variables = variables
        self.seed = seed
        self.des = spec.dataset_design(d)
        self.next_id = 0

    def fit(self, rows, start):
        sub = self.d.subset(rows)
        des = self.des.subset(rows)
        fm = mle_design(self.spec, des, sub, FitOptions(start=start))
        return fm, des

    def grow(self, rows, path=(), start=None, parent_theta=None) -> TreeNode:
        ctrl = self.ctrl
        node_id = self.next_id
        self.next_id += 1
        w = self.d.weights[rows]
        weight = float(w.sum())
        try:
            fm, des = self.fit(rows, start)
        except (SpecificationError, FitError, NonMonotoneError) as e:
            theta = parent_theta if parent_theta is not None else None
            if theta is None:
                raise
            log.debug("node %s forced to leaf: %s", path, e)
            des = self.des.subset(rows)
            try:
                ll = des.loglik(theta)
            except NonMonotoneError:
                ll = float("nan")
            return TreeNode(node_id, path, rows.size, weight, theta, ll, flag="fit_failed", members=rows)
        node = TreeNode(node_id, path, rows.size, weight, fm.theta, fm.loglik, members=rows)
        if rows.size < self.spec.n_params:
            node.flag = "too_small"
            return node
        if weight < ctrl.min_split or (ctrl.max_depth is not None and len(path) >= ctrl.max_depth):
            return node
        rng = _node_rng(self.seed, path)
        names = list(self.variables)
        if ctrl.mtry is not None and ctrl.mtry < len(names):
            pick = np.sort(rng.choice(len(names), size=ctrl.mtry, replace=False))
            names = [names[i] for i in pick]
        S = des.score_obs(fm.theta)
        covs = {v: self.d[v][rows] for v in names}
        results = independence_test(S, covs, self.variables, ctrl.test, ctrl.n_perm, rng)
        k = len(results)
        ranked = sorted(
            range(k),
            key=lambda i: (min(1.0, results[i].p_value * k), results[i].log_p_asymptotic, i),
        )
        best = results[ranked[0]]
        node.p_value = min(1.0, best.p_value * k)
        node.statistic = best.statistic
        if ctrl.alpha < 1.0 and node.p_value >= ctrl.alpha:
            return node
        Sc = S - S.mean(axis=0)
        VSp = np.linalg.pinv(Sc.T @ Sc / S.shape[0])
        for i in ranked:
            r = results[i]
            if ctrl.alpha < 1.0 and min(1.0, r.p_value * k) >= ctrl.alpha:
                break
            if r.df == 0:
                continue
            split = self.find_split(r.variable, rows, S, w, VSp)
            if split is None:
                continue
            left = split.goes_left(self.d[r.variable][rows])
            node.split = split
            node.p_value = min(1.0, r.p_value * k)
            node.statistic = r.statistic
            node.left = self.grow(rows[left], path + (0,), fm.theta, fm.theta)
            node.right = self.grow(rows[~left], path + (1,), fm.theta, fm.theta)
            return node
        return node

    def find_split(self, var, rows, S, w, VSp):
        levels = self.variables[var]
        vals = self.d[var][rows]
        if levels is None:
            res = _numeric_split(np.asarray(vals, dtype=float), S, w, VSp, self.ctrl)
            return None if res is None else Split(var, res[0])
        res = _categorical_split(_codes(vals, levels), levels, S, w, VSp, self.ctrl)
        return None if res is None else Split(var, None, res[0], tuple(levels))


def _variable_types(d: Dataset, variables) -> dict:
    if variables is None:
        variables = list(d.covariates)
    out = {}
    for v in variables:
        c = d.column(v)
        out[v] = c.levels if c.is_categorical else None
    return out


def _check_base(spec: ModelSpec):
    if spec.strata is not None or spec.shifts is not None or spec.trafo.covariates:
        raise ValueError("trees and forests require an unconditional base model")


def grow_tree(d: Dataset, base: ModelSpec, ctrl: TreeControl, rows, variables: dict, seed: int) -> TransformationTree:
    _check_base(base)
    rows = _canonical_order(d, np.asarray(rows), variables)
    root = _Grower(d, base, ctrl, variables, seed).grow(rows)
    return TransformationTree(base, root, ctrl, variables)


def fit_tree(d: Dataset, base: ModelSpec, ctrl: TreeControl | None = None, variables=None) -> TransformationTree:
    """Grow a transformation tree for the unconditional model ``base``.

    Parameters
    ----------
    d : Dataset
    base : ModelSpec
        Unconditional model (no strata, shifts or covariate-dependent basis).
    ctrl : TreeControl, optional
    variables : sequence of str, optional
        Candidate split covariates; all covariates of ``d`` by default.

    The result does not depend on the row order of ``d``.
    """
    ctrl = ctrl or TreeControl()
    return grow_tree(d, base, ctrl, np.arange(d.n), _variable_types(d, variables), ctrl.seed)


def tree_loglik(t: TransformationTree, d: Dataset) -> float:
    """Sum of leaf-model log-likelihood contributions of the rows of ``d``."""
    return t.loglik(d)


def predict_tree(t: TransformationTree, x) -> LeafModel:
    """Leaf model of the region containing the single profile ``x``."""
    return t.leaf_models(x)[0]

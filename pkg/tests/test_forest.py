import json

import numpy as np
import pytest

from helpers import grouped_sample, noise_covariates, normal_sample
from transmod.basis import BernsteinBasis, Support
from transmod.data import Column, Dataset
from transmod.fit import mle
from transmod.model import LOGIT, ModelSpec
from transmod.forest import (
    ForestControl,
    TransformationForest,
    fit_forest,
    forest_loglik,
    forest_params,
    nn_weights,
    partial_dependence,
    var_importance,
)
from transmod.tree import TreeControl, fit_tree


def _base(d, order=4):
    return ModelSpec(LOGIT, BernsteinBasis(order, Support.from_data(d.response)), response=d.response_name)


def heteroscedastic(n, seed):
    """Mean and spread both depend on ``x1``; ``x2`` is noise."""
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(0, 1, n)
    x2 = rng.uniform(0, 1, n)
    y = 2 * x1 + (0.5 + x1) * rng.normal(size=n)
    return Dataset(y, {"x1": Column("x1", x1), "x2": Column("x2", x2)}, None)


SMALL = TreeControl(alpha=1.0, min_split=60, min_leaf=30, test="asymptotic", max_depth=3)


@pytest.fixture(scope="module")
def hetero():
    return heteroscedastic(600, seed=3)


@pytest.fixture(scope="module")
def forest(hetero):
    return fit_forest(hetero, _base(hetero), ForestControl(n_trees=6, tree=SMALL, seed=11))


class TestControl:
    @pytest.mark.parametrize("kw", [{"n_trees": 0}, {"fraction": 0.0}, {"fraction": 1.2}, {"mtry": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ForestControl(**kw)

    def test_mtry(self):
        assert ForestControl().resolve_mtry(9) == 3
        assert ForestControl().resolve_mtry(10) == 4
        assert ForestControl(mtry="all").resolve_mtry(7) == 7
        assert ForestControl(mtry=20).resolve_mtry(7) == 7

    def test_default_trees_have_no_significance_gate(self):
        c = ForestControl()
        assert (c.tree.alpha, c.tree.min_split, c.tree.min_leaf) == (1.0, 40.0, 20.0)


class TestDegenerateEnsemble:
    def test_single_full_tree_equals_fit_tree(self):
        d = noise_covariates(grouped_sample(800, seed=2, shift=1.5), 2, seed=3)
        ctrl = TreeControl(n_perm=999)
        f = fit_forest(d, _base(d), ForestControl(n_trees=1, fraction=1.0, mtry="all", tree=ctrl, seed=ctrl.seed))
        t = fit_tree(d, _base(d), ctrl)
        assert json.dumps(f.trees[0].to_dict()) == json.dumps(t.to_dict())

    def test_root_only_forest_gives_uniform_weights(self, hetero):
        ctrl = ForestControl(n_trees=1, fraction=1.0, tree=TreeControl(max_depth=0))
        f = fit_forest(hetero, _base(hetero), ctrl)
        np.testing.assert_array_equal(nn_weights(f, {"x1": 0.3, "x2": 0.9}), np.full(hetero.n, 1 / hetero.n))
        np.testing.assert_allclose(forest_params(f, {"x1": 0.3, "x2": 0.9}).theta, mle(_base(hetero), hetero).theta, atol=1e-6)


class TestWeights:
    def test_weights_sum_to_number_of_trees(self, forest):
        w = nn_weights(forest, {"x1": 0.5, "x2": 0.5})
        assert w.sum() == pytest.approx(forest.n_trees)
        assert np.all(w >= 0)

    def test_weights_stay_inside_the_subsamples(self, forest):
        w = nn_weights(forest, {"x1": 0.1, "x2": 0.7})
        inside = np.unique(np.concatenate(forest.subsamples))
        assert np.all(w[np.setdiff1d(np.arange(forest.data.n), inside)] == 0)

    def test_pure_leaf_puts_all_weight_on_one_row(self):
        y = np.arange(40.0)
        x = np.arange(40.0)
        d = Dataset(y, {"x": Column("x", x)}, None)
        tc = TreeControl(alpha=1.0, min_split=2, min_leaf=1, test="asymptotic", split_range=(0.0, 1.0))
        f = fit_forest(d, _base(d, 1), ForestControl(n_trees=2, fraction=1.0, tree=tc))
        w = nn_weights(f, {"x": 0.0})
        assert w[0] == pytest.approx(2.0) and w[1:].sum() == 0

    def test_degenerate_weights_are_widened(self):
        y = np.arange(40.0)
        d = Dataset(y, {"x": Column("x", y.copy())}, None)
        tc = TreeControl(alpha=1.0, min_split=2, min_leaf=1, test="asymptotic", split_range=(0.0, 1.0))
        f = fit_forest(d, _base(d, 3), ForestControl(n_trees=1, fraction=1.0, tree=tc))
        m = forest_params(f, {"x": 0.0})
        assert m.widened
        assert np.all(np.diff(m.theta) >= 0)


class TestLocalFits:
    def test_concentrated_weights_recover_group_fit(self):
        d = grouped_sample(1200, seed=4, shift=6.0, scale=0.5)
        f = fit_forest(d, _base(d), ForestControl(n_trees=4, mtry="all", tree=SMALL))
        sub = d.subset(np.flatnonzero(d["g"] == "b"))
        local = forest_params(f, {"g": "b"})
        ref = mle(_base(d), sub)
        y = np.linspace(4, 8, 9)
        h_local = _base(d).design(y).X @ local.theta
        h_ref = _base(d).design(y).X @ ref.theta
        assert np.max(np.abs(h_local - h_ref)) < 0.3

    def test_forest_beats_unconditional_model(self, hetero, forest):
        ll0 = mle(_base(hetero), hetero).loglik
        assert forest_loglik(forest) > ll0 + 5 * np.sqrt(hetero.n) * 0.01

    def test_params_are_cached_by_signature(self, forest):
        a = forest.params({"x1": [0.2, 0.2], "x2": [0.4, 0.4]}, 2)
        assert a[0] is a[1]


class TestDeterminism:
    def test_same_seed_same_forest(self, hetero, forest):
        again = fit_forest(hetero, _base(hetero), ForestControl(n_trees=6, tree=SMALL, seed=11))
        assert json.dumps(again.to_dict()) == json.dumps(forest.to_dict())

    def test_threads_do_not_change_results(self, hetero, forest):
        par = fit_forest(hetero, _base(hetero), ForestControl(n_trees=6, tree=SMALL, seed=11, threads=4))
        assert json.dumps(par.to_dict()) == json.dumps(forest.to_dict())
        x = {"x1": hetero["x1"][:30], "x2": hetero["x2"][:30]}
        a = [m.theta.tobytes() for m in par.params(x, 30, threads=4)]
        b = [m.theta.tobytes() for m in forest.params(x, 30, threads=1)]
        assert a == b

    def test_different_seeds_differ(self, hetero, forest):
        other = fit_forest(hetero, _base(hetero), ForestControl(n_trees=6, tree=SMALL, seed=12))
        assert json.dumps(other.to_dict()) != json.dumps(forest.to_dict())

    def test_round_trip(self, hetero, forest):
        again = TransformationForest.from_dict(json.loads(json.dumps(forest.to_dict())), hetero)
        x = {"x1": 0.8, "x2": 0.1}
        np.testing.assert_allclose(forest_params(again, x).theta, forest_params(forest, x).theta, atol=1e-8)


class TestImportance:
    def test_dominant_variable_first(self, forest):
        imp = var_importance(forest, repeats=2)
        assert imp["x1"] > imp["x2"]
        assert imp["x1"] > 0

    def test_never_split_variable_is_zero(self, hetero):
        cols = dict(hetero.covariates, x3=Column("x3", np.zeros(hetero.n)))
        d = Dataset(hetero.response, cols, None)
        f = fit_forest(d, _base(d), ForestControl(n_trees=3, tree=SMALL))
        assert var_importance(f, repeats=1)["x3"] == 0.0

    def test_tree_importance_requires_data(self, hetero):
        t = fit_tree(hetero, _base(hetero), TreeControl(max_depth=1, n_perm=99))
        with pytest.raises(ValueError):
            var_importance(t)
        imp = var_importance(t, hetero, repeats=1)
        assert set(imp) == {"x1", "x2"}

    def test_out_of_bag(self, forest):
        imp = var_importance(forest, repeats=1, oob=True)
        assert imp["x1"] > 0


class TestPartialDependence:
    def test_table_layout(self, forest):
        rows = partial_dependence(forest, ["x1"], grid={"x1": [0.2, 0.8]}, max_rows=10)
        assert len(rows) == 2 * 9
        assert rows[0].keys() == {"x1", "p", "quantile"}

    def test_median_increases_with_signal(self, forest):
        rows = partial_dependence(forest, ["x1"], grid={"x1": [0.1, 0.9]}, probs=(0.5,), max_rows=20)
        assert rows[1]["quantile"] > rows[0]["quantile"]

    def test_deciles_never_cross(self, forest):
        rows = partial_dependence(forest, ["x1", "x2"], max_rows=5)
        q = np.array([r["quantile"] for r in rows]).reshape(-1, 9)
        assert np.all(np.diff(q, axis=1) > 0)

    def test_flat_for_constant_distribution(self):
        d = noise_covariates(normal_sample(400, 0, 1, seed=8, weighted=False), 2, seed=9)
        f = fit_forest(d, _base(d), ForestControl(n_trees=2, tree=TreeControl(max_depth=0)))
        rows = partial_dependence(f, ["z1"], max_rows=10)
        q = np.array([r["quantile"] for r in rows]).reshape(-1, 9)
        assert np.ptp(q, axis=0).max() <= 1e-12

    def test_unknown_variable(self, forest):
        with pytest.raises(ValueError, match="partitioning"):
            partial_dependence(forest, ["age"])

import csv
import json

import numpy as np
import pytest

from helpers import normal_oracle
from transmod.cli import main
from transmod.data import Column, Dataset, write_csv


def _run(*argv):
    return main([str(a) for a in argv])


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _manifest(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    assert first.startswith("# manifest ")
    return json.loads(first[len("# manifest ") :])


@pytest.fixture(scope="module")
def survey_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert _run("simulate", "--n", 600, "--seed", 4, "--weighted", "--out", out) == 0
    return out / "survey.csv"


@pytest.fixture(scope="module")
def groups_csv(tmp_path_factory):
    rng = np.random.default_rng(5)
    g = rng.choice(np.array(["a", "b"], dtype=object), size=400)
    y = rng.normal(size=400) * np.where(g == "b", 2.0, 1.0) + np.where(g == "b", 3.0, 0.0)
    w = np.round(rng.uniform(0.5, 2.0, 400), 4)
    p = tmp_path_factory.mktemp("groups") / "groups.csv"
    write_csv(Dataset(y, {"g": Column("g", g, ("a", "b"))}, w, "y", "w"), p)
    return p


class TestSimulate:
    def test_same_seed_same_file(self, tmp_path, survey_csv):
        assert _run("simulate", "--n", 600, "--seed", 4, "--weighted", "--out", tmp_path) == 0
        assert (tmp_path / "survey.csv").read_bytes() == survey_csv.read_bytes()

    def test_non_positive_n(self, tmp_path):
        assert _run("simulate", "--n", 0, "--out", tmp_path) == 2


class TestFit:
    def test_group_means_match_weighted_oracle(self, tmp_path, groups_csv):
        code = _run("fit", "--data", groups_csv, "--weights", "w", "--formula", "y ~ linear() | strata(g) @ probit", "--out", tmp_path)
        assert code == 0
        doc = json.loads((tmp_path / "params.json").read_text())
        rows = _rows(groups_csv)
        y = np.array([float(r["y"]) for r in rows])
        w = np.array([float(r["w"]) for r in rows])
        g = np.array([r["g"] for r in rows])
        for cell in doc["normal"]:
            sel = g == cell["cell"].split("=")[1]
            mu, sigma, _ = normal_oracle(y[sel], w[sel])
            assert cell["mean"] == pytest.approx(mu, abs=1e-6)
            assert cell["sd"] == pytest.approx(sigma, abs=1e-6)

    def test_lower_level_gives_narrower_intervals(self, tmp_path, survey_csv):
        f = "bmi ~ bernstein(3) | strata(sex) + shift(smoking) @ logit"
        for lvl, sub in ((0.95, "a"), (0.9, "b")):
            assert _run("fit", "--data", survey_csv, "--weights", "weight", "--formula", f, "--level", lvl, "--out", tmp_path / sub) == 0
        wide = json.loads((tmp_path / "a" / "params.json").read_text())["intervals"]["rows"]
        narrow = json.loads((tmp_path / "b" / "params.json").read_text())["intervals"]["rows"]
        for a, b in zip(wide, narrow):
            assert a["lower"] < b["lower"] and b["upper"] < a["upper"]

    def test_outputs_and_overlay(self, tmp_path, survey_csv):
        f = "bmi ~ bernstein(5) | strata(sex) @ logit"
        assert _run("fit", "--data", survey_csv, "--formula", f, "--overlay", "strata=sex", "--out", tmp_path) == 0
        summary = (tmp_path / "summary.txt").read_text()
        assert "log-likelihood" in summary and "theta[sex=male][0]" in summary
        cells = {r["cell"] for r in _rows(tmp_path / "curves.csv")}
        assert cells == {"sex=female", "sex=male"}
        m = _manifest(tmp_path / "curves.csv")
        assert m["command"] == "fit" and m["formula"] == f and len(m["data"]["sha256"]) == 64

    def test_odds_ratios_in_summary(self, tmp_path, survey_csv):
        f = "bmi ~ bernstein(4) | strata(sex) + shift(sex:smoking) @ logit"
        assert _run("fit", "--data", survey_csv, "--formula", f, "--out", tmp_path) == 0
        assert "OR lower" in (tmp_path / "summary.txt").read_text()

    def test_rerun_is_byte_identical(self, tmp_path, survey_csv):
        f = "bmi ~ bernstein(5) | strata(sex) + shift(smoking + alcohol)"
        for sub in ("a", "b"):
            assert _run("fit", "--data", survey_csv, "--formula", f, "--out", tmp_path / sub) == 0
        for name in ("params.json", "summary.txt", "curves.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestErrors:
    def test_parse_error(self, tmp_path, survey_csv, capsys):
        assert _run("fit", "--data", survey_csv, "--formula", "bmi ~", "--out", tmp_path) == 2
        assert "offset 6" in capsys.readouterr().err

    def test_unknown_column(self, tmp_path, survey_csv):
        assert _run("fit", "--data", survey_csv, "--formula", "bmi ~ bernstein(3) + shift(height)", "--out", tmp_path) == 2

    def test_missing_file(self, tmp_path):
        assert _run("fit", "--data", tmp_path / "nope.csv", "--formula", "y ~ linear()", "--out", tmp_path) == 2

    def test_bad_option(self):
        assert _run("fit", "--no-such-option") == 2

    def test_constant_cell_is_a_specification_error(self, tmp_path):
        p = tmp_path / "const.csv"
        p.write_text("y,g\n1,a\n1,a\n1,a\n2,b\n3,b\n", encoding="utf-8")
        code = _run("fit", "--data", p, "--formula", "y ~ bernstein(1) | strata(g)", "--out", tmp_path)
        assert code == 2

    def test_tree_needs_unconditional_formula(self, tmp_path, survey_csv):
        code = _run("tree", "--data", survey_csv, "--formula", "bmi ~ bernstein(3) | strata(sex)", "--out", tmp_path)
        assert code == 2


class TestPartitioning:
    def test_tree_outputs(self, tmp_path, survey_csv):
        argv = ["tree", "--data", survey_csv, "--weights", "weight", "--formula", "bmi ~ bernstein(4)", "--max-depth", 2,
                "--permutations", 199, "--pdp", "vars=sex,smoking", "--out", tmp_path]
        assert _run(*argv) == 0
        doc = json.loads((tmp_path / "model.json").read_text())
        assert doc["kind"] == "tree"
        imp = _rows(tmp_path / "importance.csv")
        values = [float(r["importance"]) for r in imp]
        assert values == sorted(values, reverse=True)
        assert {r["variable"] for r in imp} == {"sex", "smoking", "age", "alcohol", "fv", "activity", "edu", "nat", "region"}
        assert len(_rows(tmp_path / "pdp.csv")) == 2 * 5 * 9

    def test_forest_threads_are_bit_identical(self, tmp_path, survey_csv):
        base = ["forest", "--data", survey_csv, "--weights", "weight", "--formula", "bmi ~ bernstein(3)", "--trees", 3,
                "--min-split", 120, "--min-leaf", 60, "--repeats", 1, "--variables", "sex,age,smoking"]
        assert _run(*base, "--threads", 1, "--out", tmp_path / "s") == 0
        assert _run(*base, "--threads", 8, "--out", tmp_path / "p") == 0
        for name in ("model.json", "importance.csv"):
            assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()

    def test_predict_and_importance_from_saved_forest(self, tmp_path, survey_csv):
        fit = ["forest", "--data", survey_csv, "--formula", "bmi ~ bernstein(3)", "--trees", 2, "--min-split", 150,
               "--min-leaf", 75, "--repeats", 1, "--variables", "sex,age", "--out", tmp_path / "f"]
        assert _run(*fit) == 0
        model = tmp_path / "f" / "model.json"
        assert _run("predict", "--model", model, "--data", survey_csv, "--probs", "probs=0.25,0.75", "--out", tmp_path / "p") == 0
        rows = _rows(tmp_path / "p" / "predictions.csv")
        assert len(rows) == 600
        assert all(float(r["q0.25"]) < float(r["q0.75"]) for r in rows[:50])
        assert all(0.0 <= float(r["cdf"]) <= 1.0 for r in rows[:50])
        assert _run("importance", "--model", model, "--repeats", 1, "--out", tmp_path / "i") == 0
        assert {r["variable"] for r in _rows(tmp_path / "i" / "importance.csv")} == {"sex", "age"}

    def test_predict_from_fit(self, tmp_path, survey_csv):
        assert _run("fit", "--data", survey_csv, "--formula", "bmi ~ bernstein(4) + shift(sex)", "--out", tmp_path / "f") == 0
        assert _run("predict", "--model", tmp_path / "f" / "params.json", "--data", survey_csv, "--out", tmp_path / "p") == 0
        rows = _rows(tmp_path / "p" / "predictions.csv")
        qs = [float(rows[0][f"q{p:g}"]) for p in np.arange(1, 10) / 10]
        assert np.all(np.diff(qs) > 0)

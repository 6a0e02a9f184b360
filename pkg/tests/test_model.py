import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from helpers import (
    central_difference,
    linear_probit,
    normal_oracle,
    normal_sample,
    random_feasible_theta,
    theta_from_normal,
)
from transmod.basis import BernsteinBasis, LinearBasis, Support
from transmod.data import Dataset, stratify
from transmod.formula import lower
from transmod.model import (
    LOGIT,
    PROBIT,
    Link,
    ModelSpec,
    NonMonotoneError,
    get_link,
    h_eval,
    hessian,
    loglik,
    loglik_obs,
    score,
    score_obs,
)
from transmod.simulate import simulate_survey


@pytest.fixture(scope="module")
def survey():
    return simulate_survey(800, seed=5, weighted=True)


class TestLink:
    @pytest.mark.parametrize("link", [PROBIT, LOGIT])
    def test_ppf_inverts_cdf(self, link):
        z = np.linspace(-6, 6, 121)
        np.testing.assert_allclose(link.ppf(link.cdf(z)), z, atol=1e-10)

    def test_probit_matches_scipy(self):
        z = np.linspace(-8, 8, 33)
        np.testing.assert_allclose(PROBIT.logpdf(z), stats.norm.logpdf(z), rtol=1e-13)
        np.testing.assert_allclose(PROBIT.sf(z), stats.norm.sf(z), rtol=1e-12)

    def test_logit_matches_scipy(self):
        z = np.linspace(-30, 30, 61)
        np.testing.assert_allclose(LOGIT.logpdf(z), stats.logistic.logpdf(z), rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(LOGIT.cdf(z), special.expit(z), rtol=1e-14)

    @pytest.mark.parametrize("link", [PROBIT, LOGIT])
    def test_log_density_derivatives(self, link):
        z = np.linspace(-5, 5, 41)
        eps = 1e-5
        fd1 = (link.logpdf(z + eps) - link.logpdf(z - eps)) / (2 * eps)
        fd2 = (link.dlogpdf(z + eps) - link.dlogpdf(z - eps)) / (2 * eps)
        np.testing.assert_allclose(link.dlogpdf(z), fd1, atol=1e-7)
        np.testing.assert_allclose(link.d2logpdf(z), fd2, atol=1e-7)

    def test_unknown_link(self):
        with pytest.raises(ValueError):
            Link("cauchit")
        assert get_link("logit") == LOGIT


class TestTransformation:
    def test_standardisation_at_mean(self):
        spec = ModelSpec(PROBIT, LinearBasis(Support(10, 40)))
        assert h_eval(spec, theta_from_normal(25.0, 4.0), 25.0)[0] == pytest.approx(0.0, abs=1e-14)

    def test_equal_bernstein_coefficients_are_constant(self):
        spec = ModelSpec(PROBIT, BernsteinBasis(5, Support(0, 1)))
        np.testing.assert_allclose(h_eval(spec, np.full(6, 1.7), np.linspace(0, 1, 11)), 1.7, atol=1e-14)

    def test_zero_shift_leaves_transformation(self, survey):
        spec = lower("bmi ~ bernstein(5) + shift(smoking) @ logit", survey)
        theta = np.concatenate([np.linspace(-2, 2, 6), np.zeros(4)])
        base = ModelSpec(LOGIT, spec.trafo)
        np.testing.assert_allclose(h_eval(spec, theta, survey.response[:20], survey.subset(np.arange(20))), h_eval(base, theta[:6], survey.response[:20]))

    def test_layout_mismatch(self):
        spec = ModelSpec(PROBIT, LinearBasis(Support(0, 1)))
        with pytest.raises(ValueError):
            h_eval(spec, np.ones(3), 0.5)


class TestLoglik:
    def test_standard_normal_at_mode(self):
        d = Dataset([0.0], {}, None)
        spec = ModelSpec(PROBIT, LinearBasis(Support(-1, 1)))
        assert loglik(spec, [0.0, 1.0], d) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)
        assert loglik(spec, [0.0, 1.0], d) == pytest.approx(-0.918939, abs=1e-6)

    def test_closed_form_normal(self):
        d = normal_sample(100, 2.0, 3.0, seed=3)
        mu, sigma, ll = normal_oracle(d.response, d.weights)
        assert abs(loglik(linear_probit(d), theta_from_normal(mu, sigma), d) - ll) <= 1e-8

    @given(st.floats(0.1, 10.0))
    @settings(max_examples=25)
    def test_weights_scale_loglik(self, c):
        d = normal_sample(50, 0.0, 1.0, seed=1)
        spec = linear_probit(d)
        th = theta_from_normal(0.1, 1.2)
        assert loglik(spec, th, d, d.weights * c) == pytest.approx(c * loglik(spec, th, d), rel=1e-12)

    def test_zero_weight_rows_contribute_nothing(self):
        d = normal_sample(30, 0.0, 1.0, seed=2)
        w = d.weights.copy()
        w[:10] = 0.0
        spec = linear_probit(d)
        th = theta_from_normal(0.0, 1.0)
        assert loglik(spec, th, d, w) == pytest.approx(loglik(spec, th, d.subset(np.arange(10, 30))), rel=1e-13)
        assert np.all(loglik_obs(spec, th, d, w)[:10] == 0)

    def test_non_monotone_parameters(self):
        d = normal_sample(10, 0.0, 1.0, seed=2)
        spec = linear_probit(d)
        with pytest.raises(NonMonotoneError):
            loglik(spec, [0.0, -1.0], d)

    def test_stratum_separability(self, survey):
        spec = lower("bmi ~ bernstein(4) | strata(sex)", survey)
        theta = random_feasible_theta(spec, np.random.default_rng(0))
        cells = stratify(survey, ["sex"]).cell_id
        sub = ModelSpec(spec.link, spec.trafo)
        total = 0.0
        for c in range(2):
            rows = np.flatnonzero(cells == c)
            total += loglik(sub, theta[5 * c : 5 * c + 5], survey.subset(rows))
        assert loglik(spec, theta, survey) == pytest.approx(total, rel=1e-12)


FORMULAS = {
    "ss3": "bmi ~ bernstein(5) | strata(sex, smoking) @ probit",
    "ss5": "bmi ~ bernstein(5) | strata(sex) + shift(sex:smoking) @ logit",
    "ctm": "bmi ~ tensor(bernstein(5), age, 5) | strata(sex) + shift(sex:smoking + alcohol + fv + activity + edu + nat + region)",
    "dr": "bmi ~ bernstein(5) + varying(age) | strata(sex) + shift(sex:smoking + fv)",
}


class TestDerivatives:
    @pytest.mark.parametrize("name", sorted(FORMULAS))
    def test_score_matches_finite_differences(self, survey, name):
        spec = lower(FORMULAS[name], survey)
        des = spec.dataset_design(survey)
        rng = np.random.default_rng(7)
        for _ in range(3):
            th = random_feasible_theta(spec, rng)
            g = des.score(th)
            fd = central_difference(des.loglik, th)
            assert np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(g))) <= 1e-5

    def test_score_obs_sums_to_score(self, survey):
        spec = lower(FORMULAS["ss5"], survey)
        th = random_feasible_theta(spec, np.random.default_rng(1))
        np.testing.assert_allclose(score_obs(spec, th, survey).sum(axis=0), score(spec, th, survey), rtol=1e-10, atol=1e-8)

    def test_hessian_symmetric_and_matches_score_differences(self, survey):
        spec = lower(FORMULAS["ss5"], survey)
        des = spec.dataset_design(survey)
        th = random_feasible_theta(spec, np.random.default_rng(2))
        H = hessian(spec, th, survey)
        assert np.max(np.abs(H - H.T)) <= 1e-10
        fd = np.column_stack([central_difference(lambda t: des.score(t)[j], th) for j in range(th.size)])
        assert np.max(np.abs(H - fd)) / np.max(np.abs(H)) <= 1e-5

    def test_all_agrees_with_separate_calls(self, survey):
        spec = lower(FORMULAS["dr"], survey)
        des = spec.dataset_design(survey)
        th = random_feasible_theta(spec, np.random.default_rng(3))
        ll, g, H = des.all(th)
        assert ll == des.loglik(th)
        np.testing.assert_allclose(g, des.score(th), rtol=1e-13)
        np.testing.assert_allclose(H, des.hessian(th), rtol=1e-13)


class TestProportionalOdds:
    def test_log_odds_difference_constant_in_y(self, survey):
        spec = lower("bmi ~ bernstein(5) + shift(smoking + alcohol) @ logit", survey)
        th = random_feasible_theta(spec, np.random.default_rng(4))
        y = np.linspace(10, 45, 50)
        a = {"smoking": np.array(["never"], dtype=object), "alcohol": np.array([0.0])}
        b = {"smoking": np.array(["heavy"], dtype=object), "alcohol": np.array([10.0])}
        diff = h_eval(spec, th, y, a) - h_eval(spec, th, y, b)
        assert np.ptp(diff) <= 1e-8
        names = spec.param_names()
        beta = dict(zip(names[spec.n_theta :], th[spec.n_theta :]))
        assert diff[0] == pytest.approx(beta["beta[smoking=heavy]"] + 10 * beta["beta[alcohol]"], abs=1e-10)


class TestSerialisation:
    def test_round_trip(self, survey):
        spec = lower(FORMULAS["ctm"], survey)
        again = ModelSpec.from_dict(spec.to_dict())
        assert again.param_names() == spec.param_names()
        th = random_feasible_theta(spec, np.random.default_rng(5))
        assert loglik(again, th, survey) == loglik(spec, th, survey)

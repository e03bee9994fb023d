import numpy as np
import pytest
from scipy import special

from cubature import rule_from_tag
from errors import CavityNotPSD, ConfigError, SkippedUpdate
from gaussian import GaussianMoments
from likelihoods import BernoulliLogit, BernoulliProbit, Gaussian, Heteroscedastic, Poisson
from oracles import gaussian_integral, moment_matching_site, slr_site, tilted_trapezoid
from site_rules import (PRESETS, RuleConfig, Site, compute_cavity, cvi_update, damp, eep_update, local_update,
                        pep_update, slep_update)

GH20 = rule_from_tag("gh20", 1)
CASES = 50


def _moments(mean, var):
    return GaussianMoments.create([mean], [[var]])


def _random_cases(seed, likelihood):
    rng = np.random.default_rng(seed)
    for _ in range(CASES):
        mean = rng.uniform(-1.5, 1.5)
        var = rng.uniform(0.05, 1.0)
        if isinstance(likelihood, Poisson):
            y = [float(rng.integers(0, 6))]
        else:
            y = [float(rng.choice([-1.0, 1.0]))]
        yield mean, var, y, rng.uniform(0.1, 1.0)


def _derivatives(likelihood):
    """First and second derivative of log p(y|f) in f."""
    if isinstance(likelihood, Poisson):
        return (lambda y, f: y - likelihood.binsize * np.exp(f),
                lambda y, f: -likelihood.binsize * np.exp(f))
    return (lambda y, f: (y == 1) - special.expit(f),
            lambda y, f: -special.expit(f) * special.expit(-f))


def test_site_natural_parameters_round_trip_through_moments():
    site = Site.from_moments([0.5, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    np.testing.assert_allclose(site.mean, [0.5, -1.0])
    np.testing.assert_allclose(site.cov, [[2.0, 0.3], [0.3, 1.0]])


def test_inactive_dimensions_have_infinite_variance():
    site = Site(precision=np.diag([2.0, 0.0]), nat1=np.array([1.0, 0.0]))
    assert list(site.active_dims()) == [True, False]
    assert site.cov[0, 0] == pytest.approx(0.5)
    assert np.isinf(site.cov[1, 1])
    assert site.mean[0] == pytest.approx(0.5)
    assert not Site.inactive(3).active_dims().any()


def test_singular_site_covariance_is_skipped():
    with pytest.raises(SkippedUpdate):
        Site.from_moments([0.0], [[0.0]])


def test_damping_blends_natural_parameters():
    old = Site(precision=np.array([[1.0]]), nat1=np.array([0.0]))
    new = Site(precision=np.array([[3.0]]), nat1=np.array([2.0]))
    blended = damp(new, old, 0.25)
    assert blended.precision[0, 0] == pytest.approx(1.5)
    assert blended.nat1[0] == pytest.approx(0.5)
    assert damp(new, None, 0.25) is new
    assert damp(new, old, 1.0) is new


@pytest.mark.parametrize("kwargs", [
    {"rule": "XEP"},
    {"rule": "PEP", "alpha": 0.0},
    {"rule": "PEP", "alpha": 1.5},
    {"rule": "EEP", "alpha": -0.1},
    {"rule": "SLEP", "cubature": None},
    {"rule": "CVI", "damping": 0.0},
])
def test_rule_config_validation(kwargs):
    with pytest.raises(ConfigError):
        RuleConfig(**kwargs)


def test_presets():
    assert RuleConfig.preset("EKF") == RuleConfig("EEP", None, 1.0)
    assert RuleConfig.preset("uks") == RuleConfig("SLEP", "ut5", 0.0)
    assert RuleConfig.preset("ghkf").cubature == "gh20"
    assert RuleConfig.preset("pep").alpha == pytest.approx(0.01)
    assert RuleConfig.preset("vi").rule == "CVI"
    assert set(PRESETS) >= {"ep", "pep", "eep", "ekf", "eks", "uep", "ghep", "ukf", "uks", "ghkf", "ghks", "vi"}
    with pytest.raises(ConfigError):
        RuleConfig.preset("kf")


def test_rule_names_are_case_insensitive():
    assert RuleConfig(rule="slep").rule == "SLEP"


def test_cavity_with_zero_power_is_the_marginal():
    marginal = _moments(0.3, 0.5)
    site = Site.from_moments([1.0], [[2.0]])
    cavity = compute_cavity(marginal, site, 0.0)
    np.testing.assert_array_equal(cavity.mean, marginal.mean)
    np.testing.assert_array_equal(cavity.cov, marginal.cov)


def test_cavity_removes_a_fraction_of_the_site():
    marginal = _moments(0.3, 0.5)
    site = Site.from_moments([1.0], [[2.0]])
    cavity = compute_cavity(marginal, site, 0.5)
    precision = 1 / 0.5 - 0.5 / 2.0
    assert cavity.cov[0, 0] == pytest.approx(1 / precision)
    assert cavity.mean[0] == pytest.approx((0.3 / 0.5 - 0.5 * 1.0 / 2.0) / precision)


def test_cavity_failure_reports_the_variances():
    marginal = _moments(0.0, 1.0)
    site = Site.from_moments([0.0], [[0.5]])
    with pytest.raises(CavityNotPSD) as info:
        compute_cavity(marginal, site, 1.0)
    assert info.value.variances.shape == (1,)


def test_elementwise_cavity_removes_the_site_marginals():
    marginal = GaussianMoments.create([0.0, 1.0], [[1.0, 0.5], [0.5, 2.0]])
    site = Site(precision=np.array([[0.5, 0.2], [0.2, 0.25]]), nat1=np.array([0.1, 0.2]))
    site_cov = np.linalg.inv(site.precision)
    site_mean = site_cov @ site.nat1
    np.testing.assert_allclose(site.marginal_natural()[0], 1 / np.diag(site_cov))
    np.testing.assert_allclose(site.marginal_natural()[1], site_mean / np.diag(site_cov))

    cavity = compute_cavity(marginal, site, 1.0)
    np.testing.assert_allclose(np.diag(cavity.cov), [1 / 0.66, 1 / 0.33])
    np.testing.assert_allclose(cavity.mean, [0.06 / 0.66, 0.34 / 0.33])
    assert cavity.cov[0, 1] == 0.0


def test_cavity_leaves_dimensions_the_site_does_not_bound():
    marginal = GaussianMoments.create([0.2, -0.4], [[0.8, 0.1], [0.1, 0.6]])
    axis = Site(precision=np.diag([2.0, 0.0]), nat1=np.array([1.0, 0.0]))
    cavity = compute_cavity(marginal, axis, 0.5)
    assert cavity.cov[0, 0] == pytest.approx(1 / (1 / 0.8 - 1.0))
    assert cavity.cov[1, 1] == pytest.approx(0.6)
    assert cavity.mean[1] == pytest.approx(-0.4)

    v = np.array([1.0, 1.0]) / np.sqrt(2)
    diagonal = Site(precision=3.0 * np.outer(v, v), nat1=v)
    cavity = compute_cavity(marginal, diagonal, 1.0)
    np.testing.assert_allclose(np.diag(cavity.cov), [0.8, 0.6])
    np.testing.assert_allclose(cavity.mean, [0.2, -0.4])


@pytest.mark.parametrize("alpha", [0.01, 0.5, 1.0])
def test_adding_the_site_back_recovers_the_marginal(alpha):
    marginal = GaussianMoments.create([0.0, 1.0], [[1.0, 0.5], [0.5, 2.0]])
    site = Site(precision=np.array([[0.5, 0.2], [0.2, 0.25]]), nat1=np.array([0.1, 0.2]))
    cavity = compute_cavity(marginal, site, alpha)
    site_precision, site_nat1 = site.marginal_natural()
    cav_var = np.diag(cavity.cov)
    var = np.diag(marginal.cov)
    np.testing.assert_allclose(1 / cav_var + alpha * site_precision, 1 / var)
    np.testing.assert_allclose(cavity.mean / cav_var + alpha * site_nat1, marginal.mean / var)


@pytest.mark.parametrize("alpha", [0.01, 0.5, 1.0])
def test_gaussian_sites_are_exact_for_every_rule(alpha):
    lik = Gaussian(0.3)
    cavity = _moments(0.4, 0.7)
    for site in (pep_update(cavity, [1.2], lik, alpha, GH20),
                 eep_update(cavity, [1.2], lik, alpha),
                 slep_update(cavity, [1.2], lik, alpha, GH20),
                 cvi_update(cavity, [1.2], lik, GH20)):
        assert site.mean[0] == pytest.approx(1.2, abs=1e-8)
        assert site.cov[0, 0] == pytest.approx(0.3, rel=1e-8)


@pytest.mark.parametrize("lik", [Poisson(binsize=0.8), BernoulliLogit()], ids=["poisson", "logit"])
def test_power_ep_matches_dense_moment_matching(lik):
    for i, (mean, var, y, alpha) in enumerate(_random_cases(1, lik)):
        site = pep_update(_moments(mean, var), y, lik, alpha, GH20)
        precision, nat1 = moment_matching_site(lik, y, mean, var, alpha)
        np.testing.assert_allclose(site.precision[0, 0], precision, rtol=1e-5, atol=1e-7, err_msg=f"case {i}")
        np.testing.assert_allclose(site.nat1[0], nat1, rtol=1e-5, atol=1e-7, err_msg=f"case {i}")


@pytest.mark.parametrize("lik", [Poisson(binsize=0.8), BernoulliLogit()], ids=["poisson", "logit"])
def test_full_power_ep_posterior_is_the_tilted_distribution(lik):
    for mean, var, y, _ in _random_cases(2, lik):
        cavity = _moments(mean, var)
        site = pep_update(cavity, y, lik, 1.0, GH20)
        post_precision = 1 / var + site.precision[0, 0]
        post_mean = (mean / var + site.nat1[0]) / post_precision
        _, m_hat, v_hat = tilted_trapezoid(lik, y, mean, var)
        assert post_mean == pytest.approx(m_hat, abs=1e-6)
        assert 1 / post_precision == pytest.approx(v_hat, rel=1e-5)


@pytest.mark.parametrize("lik", [Poisson(binsize=0.8), BernoulliLogit()], ids=["poisson", "logit"])
def test_slep_site_gives_the_sigma_point_kalman_update(lik):
    for mean, var, y, _ in _random_cases(3, lik):
        cavity = _moments(mean, var)
        site = slep_update(cavity, y, lik, 1.0, GH20)
        cond_mean = lambda f: lik.conditional_moments(f[:, None])[0][:, 0]
        cond_var = lambda f: lik.conditional_moments(f[:, None])[1][:, 0, 0]
        mu = gaussian_integral(cond_mean, mean, var)
        S = gaussian_integral(lambda f: (cond_mean(f) - mu) ** 2 + cond_var(f), mean, var)
        C = gaussian_integral(lambda f: (f - mean) * (cond_mean(f) - mu), mean, var)
        post_precision = 1 / var + site.precision[0, 0]
        post_mean = (mean / var + site.nat1[0]) / post_precision
        target = lik.measurement_target(y)[0]
        assert post_mean == pytest.approx(mean + C / S * (target - mu), abs=1e-6)
        assert 1 / post_precision == pytest.approx(var - C ** 2 / S, rel=1e-5)


def test_slep_site_precision_does_not_depend_on_power():
    lik = Poisson()
    cavity = _moments(0.2, 0.4)
    full = slep_update(cavity, [3], lik, 1.0, GH20)
    partial = slep_update(cavity, [3], lik, 0.3, GH20)
    np.testing.assert_allclose(full.precision, partial.precision, rtol=1e-12)
    assert not np.allclose(full.nat1, partial.nat1)


@pytest.mark.parametrize("lik", [Poisson(binsize=0.8), BernoulliLogit()], ids=["poisson", "logit"])
def test_cvi_site_uses_expected_log_likelihood_derivatives(lik):
    d1, d2 = _derivatives(lik)
    for mean, var, y, _ in _random_cases(4, lik):
        site = cvi_update(_moments(mean, var), y, lik, GH20)
        grad = gaussian_integral(lambda f: d1(y[0], f), mean, var)
        hess = gaussian_integral(lambda f: d2(y[0], f), mean, var)
        np.testing.assert_allclose(site.precision[0, 0], -hess, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(site.nat1[0], grad - hess * mean, rtol=1e-5, atol=1e-7)


def test_eep_site_is_the_extended_kalman_update():
    lik = Poisson(binsize=2.0)
    mean, var, y = 0.3, 0.5, 4.0
    site = eep_update(_moments(mean, var), [y], lik, 1.0)
    rate = 2.0 * np.exp(mean)
    gain = var * rate / (rate ** 2 * var + rate)
    post_precision = 1 / var + site.precision[0, 0]
    assert (mean / var + site.nat1[0]) / post_precision == pytest.approx(mean + gain * (y - rate))
    assert 1 / post_precision == pytest.approx(var - gain * rate * var)


def test_eep_with_a_scale_only_latent_keeps_it_uninformed():
    lik = Heteroscedastic()
    cavity = GaussianMoments.create([0.1, 0.0], np.diag([1.0, 0.5]))
    site = eep_update(cavity, [0.8], lik, 1.0)
    assert list(site.active_dims()) == [True, False]


def test_local_update_without_a_site_uses_the_marginal_as_cavity():
    lik = Poisson()
    marginal = _moments(0.1, 0.3)
    config = RuleConfig("PEP", "gh20", 0.5)
    direct = pep_update(marginal, [2], lik, 0.5, GH20)
    via = local_update(config, lik, [2], marginal, None, GH20)
    np.testing.assert_allclose(via.natural_vector(), direct.natural_vector())


def test_local_update_damps_against_the_previous_site():
    lik = Poisson()
    marginal = _moments(0.1, 0.3)
    previous = Site.from_moments([0.0], [[4.0]])
    config = RuleConfig("CVI", "gh20", 1.0, damping=0.5)
    fresh = cvi_update(marginal, [2], lik, GH20)
    damped = local_update(config, lik, [2], marginal, previous, GH20)
    np.testing.assert_allclose(damped.precision, 0.5 * (previous.precision + fresh.precision))


def test_cvi_rejects_non_concave_expectations():
    class Convex(Poisson):
        def expected_log_density(self, y, mean, cov, rule=None):
            return 0.0, np.zeros(1), np.array([[1.0]])

    with pytest.raises(SkippedUpdate):
        cvi_update(_moments(0.0, 1.0), [1], Convex(), GH20)


def test_power_ep_and_extended_ep_agree_on_a_narrow_cavity():
    lik = Poisson()
    cavity = _moments(0.0, 0.04)
    posteriors = []
    for site in (pep_update(cavity, [1], lik, 1.0, rule_from_tag("gh50", 1)), eep_update(cavity, [1], lik, 1.0)):
        var = 1 / (1 / 0.04 + site.precision[0, 0])
        posteriors.append((var * site.nat1[0], var))
    (pep_mean, pep_var), (eep_mean, eep_var) = posteriors
    assert eep_mean == pytest.approx(pep_mean, abs=2e-3)
    assert eep_var == pytest.approx(pep_var, rel=2e-2)


@pytest.mark.parametrize("y, mean, var", [(1.0, 0.3, 0.5), (-1.0, -0.8, 1.0)])
def test_zero_power_probit_slep_site_matches_dense_regression(y, mean, var):
    site = slep_update(_moments(mean, var), [y], BernoulliProbit(), 0.0, GH20)
    precision, nat1 = slr_site(special.ndtr, lambda f: special.ndtr(f) * special.ndtr(-f), float(y == 1), mean, var)
    assert site.precision[0, 0] == pytest.approx(precision, rel=1e-5)
    assert site.nat1[0] == pytest.approx(nat1, rel=1e-5)


def test_cvi_damping_applied_twice_covers_three_quarters():
    lik = Poisson()
    marginal = _moments(0.1, 0.3)
    previous = Site.from_moments([0.0], [[4.0]])
    config = RuleConfig("CVI", "gh20", 1.0, damping=0.5)
    fresh = cvi_update(marginal, [2], lik, GH20)
    once = local_update(config, lik, [2], marginal, previous, GH20)
    twice = local_update(config, lik, [2], marginal, once, GH20)
    np.testing.assert_allclose(twice.precision, 0.25 * previous.precision + 0.75 * fresh.precision)
    np.testing.assert_allclose(twice.nat1, 0.25 * previous.nat1 + 0.75 * fresh.nat1)

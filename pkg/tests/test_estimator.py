import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dltlab.errors import ContractError, DegeneracyError
from dltlab.estimator import GaussianMixture2, estimate_noise_rate, fit_gmm2, posterior_clean


def _mixture_draws(n, w_lo, mu, sd, seed):
    rng = np.random.default_rng(seed)
    lo = rng.random(n) < w_lo
    return np.where(lo, rng.normal(mu[0], sd[0], n), rng.normal(mu[1], sd[1], n)), lo


@pytest.fixture(scope="module")
def known_mixture():
    values, _ = _mixture_draws(5000, 0.7, (0.2, 2.0), (0.1, 0.3), seed=0)
    return values, fit_gmm2(values)


def test_em_recovers_known_mixture(known_mixture):
    _, gmm = known_mixture
    assert abs(gmm.weights[0] - 0.7) <= 0.03
    assert abs(gmm.means[0] - 0.2) <= 0.05
    assert abs(gmm.means[1] - 2.0) <= 0.05
    np.testing.assert_allclose(np.sqrt(gmm.variances), [0.1, 0.3], rtol=0.1)
    assert gmm.converged


def test_em_log_likelihood_non_decreasing(known_mixture):
    lls = np.array(known_mixture[1].log_likelihoods)
    assert np.all(np.diff(lls) >= -1e-9)


def test_em_log_likelihood_matches_scipy(known_mixture):
    values, gmm = known_mixture
    dens = sum(w * stats.norm.pdf(values, m, np.sqrt(v)) for w, m, v in zip(gmm.weights, gmm.means, gmm.variances))
    assert gmm.mean_log_likelihood(values) == pytest.approx(np.mean(np.log(dens)), rel=1e-10)


def test_em_is_deterministic(known_mixture):
    values, gmm = known_mixture
    again = fit_gmm2(values)
    assert again.to_dict() == gmm.to_dict()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_em_ignores_input_order(seed):
    values, _ = _mixture_draws(300, 0.6, (0.0, 3.0), (0.2, 0.5), seed=seed % 1000)
    shuffled = np.random.default_rng(seed).permutation(values)
    assert fit_gmm2(values).to_dict() == fit_gmm2(shuffled).to_dict()


def test_em_degenerate_input():
    with pytest.raises(DegeneracyError):
        fit_gmm2(np.full(100, 0.3))
    with pytest.raises(ContractError):
        fit_gmm2([0.1, 0.2, 0.3])
    with pytest.raises(ContractError):
        fit_gmm2([0.1, 0.2, np.inf, 0.3, 0.4])


def test_posterior_at_small_mean_is_confident():
    gmm = GaussianMixture2(np.array([0.7, 0.3]), np.array([0.2, 2.0]), np.array([0.01, 0.09]))
    phi = posterior_clean(gmm, 0.2)
    a = 0.7 * stats.norm.pdf(0.2, 0.2, 0.1)
    b = 0.3 * stats.norm.pdf(0.2, 2.0, 0.3)
    assert phi == pytest.approx(a / (a + b), rel=1e-12)
    assert phi > 0.99


def test_posterior_symmetric_midpoint():
    gmm = GaussianMixture2(np.array([0.5, 0.5]), np.array([-1.0, 3.0]), np.array([0.4, 0.4]))
    assert posterior_clean(gmm, 1.0) == pytest.approx(0.5, abs=1e-15)


@given(st.floats(-50, 50))
def test_posterior_in_unit_interval(v):
    gmm = GaussianMixture2(np.array([0.7, 0.3]), np.array([0.2, 2.0]), np.array([0.01, 0.09]))
    assert 0.0 <= posterior_clean(gmm, v) <= 1.0


def test_estimate_rate_on_constructed_diffs():
    diffs, _ = _mixture_draws(4000, 0.7, (0.05, 1.5), (0.02, 0.3), seed=3)
    result = estimate_noise_rate(diffs, theta=0.5)
    assert abs(result.rate - 0.30) <= 0.02
    assert result.rate + result.n_clean / result.n == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("theta", [0.0, 0.2, 0.5, 0.9, 1.0])
def test_estimate_rate_count_identity(theta):
    diffs, _ = _mixture_draws(500, 0.5, (0.0, 1.0), (0.3, 0.3), seed=1)
    result = estimate_noise_rate(diffs, theta=theta)
    assert result.n_clean == int(np.sum(result.phi >= theta))
    assert 0.0 <= result.rate <= 1.0


def test_estimate_rate_degenerate_cluster():
    with pytest.raises(DegeneracyError):
        estimate_noise_rate(np.full(200, 1.25))


def test_estimation_json():
    diffs, _ = _mixture_draws(400, 0.7, (0.05, 1.5), (0.02, 0.3), seed=4)
    payload = json.loads(estimate_noise_rate(diffs).to_json())
    assert payload["n"] == 400
    assert sum(payload["phi_histogram"]["counts"]) == 400
    assert payload["estimated_rate"] == pytest.approx(1 - payload["n_clean"] / 400)
    assert len(payload["gmm"]["means"]) == 2

"""Exact Gaussian likelihood, its derivatives and the trace expectations."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import toeplitz
from scipy.stats import multivariate_normal

from arma_bayes.geometry import geometry_at
from arma_bayes.likelihood import (
    covariance_matrix,
    expected_derivatives,
    expected_derivatives_direct,
    expected_hessian,
    log_likelihood,
    log_likelihood_partials,
    sample_path,
    trace_quantities,
)
from arma_bayes.model import ARMAModel, ConstantSpectrumModel

from conftest import central_diff

X12 = [-0.8019314252534474, -1.324358995628145, -0.24836162209524854, 0.4204452380655215,
       1.1360465324896427, 0.10970639932180819, -0.5526473205362324, -0.7847803553442784,
       0.7487457707345911, 1.6347830429585775, 0.27276877584472176, -1.2333286640307717]


def test_full_log_density_matches_scipy_oracle():
    # scipy multivariate_normal with the closed-form AR(1) autocovariance a^h / (1 - a^2)
    m = ARMAModel(1)
    expected = -15.451693730050442
    for method in ("ar", "toeplitz"):
        assert log_likelihood(m, [0.5], X12, full=True, method=method) == pytest.approx(
            expected, abs=1e-11)


@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8))
def test_arma11_log_density_against_scipy(a, b):
    m = ARMAModel(1, 1)
    cov = covariance_matrix(m, [a, b], 12).matrix
    ref = multivariate_normal(np.zeros(12), cov).logpdf(X12)
    assert log_likelihood(m, [a, b], X12, full=True) == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("model,theta", [
    (ARMAModel(1), [0.5]),
    (ARMAModel(2, 1), [0.3, -0.2, 0.4]),
    (ARMAModel(1, 1, sigma2=None), [0.4, -0.3, 0.2]),
    (ConstantSpectrumModel(), [0.7]),
])
def test_partials_match_finite_differences(model, theta):
    x = sample_path(model, theta, 40, seed=3)
    d = log_likelihood_partials(model, theta, x, 3)
    n = len(x)
    fd1 = central_diff(lambda t: log_likelihood(model, t, x) / n, theta)
    fd2 = central_diff(lambda t: log_likelihood_partials(model, t, x, 1).L_i, theta)
    fd3 = central_diff(lambda t: log_likelihood_partials(model, t, x, 2).L_ij, theta)
    np.testing.assert_allclose(d.L_i, fd1, atol=1e-7)
    np.testing.assert_allclose(d.L_ij, fd2, atol=1e-7)
    np.testing.assert_allclose(d.L_ijk, fd3, atol=1e-6)


@pytest.mark.parametrize("model,theta", [
    (ARMAModel(1), [0.6]),
    (ARMAModel(3), [0.5, -0.2, 0.1]),
    (ARMAModel(2, sigma2=None), [0.3, -0.2, 0.5]),
])
def test_ar_route_equals_toeplitz_route(model, theta):
    x = sample_path(model, theta, 64, seed=9)
    a = log_likelihood_partials(model, theta, x, 3, method="ar")
    b = log_likelihood_partials(model, theta, x, 3, method="toeplitz")
    assert a.value == pytest.approx(b.value, abs=1e-10)
    for u, v in ((a.L_i, b.L_i), (a.L_ij, b.L_ij), (a.L_ijk, b.L_ijk)):
        np.testing.assert_allclose(u, v, atol=1e-11)


def test_sample_path_is_deterministic_and_has_model_covariance():
    m = ARMAModel(1, 1)
    a = sample_path(m, [0.4, 0.3], 5, seed=1, replication=2)
    b = sample_path(m, [0.4, 0.3], 5, seed=1, replication=2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_path(m, [0.4, 0.3], 5, seed=1, replication=3))
    paths = np.array([sample_path(m, [0.4, 0.3], 3, seed=4, replication=r) for r in range(20000)])
    emp = paths.T @ paths / len(paths)
    np.testing.assert_allclose(emp, covariance_matrix(m, [0.4, 0.3], 3).matrix, atol=0.05)


def test_expected_hessian_is_minus_trace_information():
    m = ARMAModel(1, 1)
    E = expected_derivatives(trace_quantities(m, [0.4, 0.3], 48))
    np.testing.assert_allclose(expected_hessian(m, [0.4, 0.3], 48), E.m_ij, atol=1e-14)


@pytest.mark.parametrize("model,theta", [(ARMAModel(1), [0.5]), (ARMAModel(0, 1), [0.4]),
                                         (ARMAModel(1, 1), [0.4, 0.3])])
def test_third_expectation_matches_direct_differentiation(model, theta):
    E = expected_derivatives(trace_quantities(model, theta, 40))
    np.testing.assert_allclose(expected_derivatives_direct(model, theta, 40), E.m_ijk, atol=1e-7)


def test_trace_information_converges_to_metric_at_rate_one_over_n():
    m = ARMAModel(1)
    g = geometry_at(m, [0.5]).g[0, 0]
    errs = [abs(trace_quantities(m, [0.5], n).Jp[0, 0] - g) for n in (32, 64, 128, 256)]
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    np.testing.assert_allclose(ratios, 2.0, rtol=0.05)


def test_expectations_match_monte_carlo():
    # E[L_ij] and n E[dL_ij L_k] checked against simulated paths
    m = ARMAModel(1)
    n, reps = 32, 4000
    E = expected_derivatives(trace_quantities(m, [0.5], n))
    hs, cross = [], []
    for r in range(reps):
        d = log_likelihood_partials(m, [0.5], sample_path(m, [0.5], n, 8, r), 2)
        hs.append(d.L_ij[0, 0])
        cross.append(d.L_ij[0, 0] * d.L_i[0])
    hs, cross = np.array(hs), np.array(cross)
    assert abs(hs.mean() - E.m_ij[0, 0]) < 4 * hs.std() / np.sqrt(reps)
    # E[(L_ij - m_ij) L_k] = E[L_ij L_k] since E[L_k] = 0
    target = E.m_ij_k[0, 0, 0]
    assert abs(cross.mean() - target) < 4 * cross.std() / np.sqrt(reps)

"""Metric, connections, priors and the Laplace-Beltrami operator."""
import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from arma_bayes.errors import SingularMatrix, StencilOutOfDomain
from arma_bayes.factors import (
    ar1_sqrt_one_minus_a2,
    ar2_one_plus_a2,
    ar2_sqrt_one_plus_a2,
    interior_grid,
    resolve_factor,
)
from arma_bayes.geometry import (
    JEFFREYS,
    QuadConfig,
    ScalarField,
    check_superharmonic,
    geometry_at,
    jeffreys_log_gradient,
    laplace_beltrami,
    metric_at,
    model_metric,
)
from arma_bayes.model import ARMAModel, ConstantSpectrumModel

# AR(1), a = 0.5: hand-coded derivatives of log(1 - 2a cos w + a^2) integrated
# with scipy.integrate.quad at 1e-14 tolerance.
AR1_TENSORS = {"g": 4 / 3, "Gm": 32 / 9, "T": 16 / 3, "M": 224 / 9, "N": 608 / 27,
               "Lt": 416 / 27}


def test_ar1_tensors_match_quadrature_oracle():
    geom = geometry_at(ARMAModel(1), [0.5])
    for name, value in AR1_TENSORS.items():
        assert np.ravel(getattr(geom, name))[0] == pytest.approx(value, rel=1e-12), name


def test_white_noise_metric_and_skewness():
    geom = geometry_at(ConstantSpectrumModel(), [1.0])
    assert geom.g[0, 0] == pytest.approx(0.5, abs=1e-12)
    assert geom.T[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    assert geom.Gm[0, 0, 0] == pytest.approx(0.0, abs=1e-12)


def test_ar1_metric_closed_form():
    m = ARMAModel(1)
    for a in (-0.7, 0.0, 0.3, 0.9):
        assert metric_at(m, [a], 4096)[0, 0] == pytest.approx(1 / (1 - a * a), rel=1e-10)


def test_e_connection_contraction_vanishes_for_ar1():
    # for AR models the third-order expectation limit eGamma + T sums to zero in one dimension
    geom = geometry_at(ARMAModel(1), [0.5])
    assert geom.eG[0, 0, 0] + geom.T[0, 0, 0] == pytest.approx(geom.Gm[0, 0, 0], rel=1e-12)


def test_free_sigma_is_orthogonal():
    geom = geometry_at(ARMAModel(1, 1, sigma2=None), [0.4, 0.3, 0.1])
    np.testing.assert_allclose(geom.g[-1, :2], 0.0, atol=1e-10)
    assert geom.g[-1, -1] == pytest.approx(0.5, abs=1e-12)


def test_cancelling_roots_raise_singular():
    with pytest.raises(SingularMatrix):
        geometry_at(ARMAModel(1, 1), [0.3, -0.3])


@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8))
def test_tensor_symmetries(a, b):
    assume(abs(a + b) > 0.05)
    geom = geometry_at(ARMAModel(1, 1), [a, b], QuadConfig(adaptive=False, nodes=1024))
    np.testing.assert_allclose(geom.g, geom.g.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(geom.g) > 0)
    T = geom.T
    for perm in ("ikj", "jik", "jki", "kij", "kji"):
        np.testing.assert_allclose(np.einsum(f"ijk->{perm}", T), T, atol=1e-10)
    np.testing.assert_allclose(geom.Gm, np.einsum("ijk->ikj", geom.Gm), atol=1e-10)
    N = geom.N
    np.testing.assert_allclose(N, np.einsum("ijkl->jikl", N), atol=1e-10)
    np.testing.assert_allclose(N, np.einsum("ijkl->klij", N), atol=1e-10)
    np.testing.assert_allclose(geom.Lt, np.einsum("ijkl->jilk", geom.Lt), atol=1e-10)


@pytest.mark.parametrize("model,theta", [(ARMAModel(2), [0.3, -0.2]),
                                         (ARMAModel(1, 1), [0.5, -0.3]),
                                         (ARMAModel(1, sigma2=None), [0.4, 0.2])])
def test_jeffreys_gradient_tensor_route_equals_finite_differences(model, theta):
    a = jeffreys_log_gradient(model, theta, route="tensor")
    b = jeffreys_log_gradient(model, theta, route="fd")
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_metric_derivative_matches_connection():
    # d_k g_ij = Gamma^(m)_{i,jk} + Gamma^(m)_{j,ik} - T_ijk (from d_k of the log-spectral products)
    m = ARMAModel(1, 1)
    th = np.array([0.4, 0.3])
    geom = geometry_at(m, th)
    h = 1e-5
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        dg = (metric_at(m, th + e, 4096) - metric_at(m, th - e, 4096)) / (2 * h)
        want = geom.Gm[:, :, k] + geom.Gm[:, :, k].T - geom.T[:, :, k]
        np.testing.assert_allclose(dg, want, atol=1e-7)


def test_laplacian_of_log_theta_vanishes_under_white_noise_metric():
    m = ConstantSpectrumModel()
    phi = ScalarField(lambda t: float(np.log(t[0])), lambda t: np.array([1 / t[0]]))
    for t in (0.3, 1.0, 4.0):
        assert laplace_beltrami(phi, [t], model_metric(m)) == pytest.approx(0.0, abs=1e-6)


def test_laplacian_of_quadratic_under_white_noise_metric():
    # g = 1/(2 t^2): Delta phi = 2 t (t phi')' ; phi = t^2 gives 8 t^2
    m = ConstantSpectrumModel()
    phi = ScalarField(lambda t: float(t[0] ** 2))
    assert laplace_beltrami(phi, [1.5], model_metric(m)) == pytest.approx(18.0, rel=1e-6)


def test_ar1_factor_is_an_eigenfunction():
    h = ar1_sqrt_one_minus_a2()
    metric = model_metric(ARMAModel(1))
    for a in (-0.6, 0.0, 0.5):
        assert laplace_beltrami(h, [a], metric) == pytest.approx(-h([a]), rel=1e-6)


@pytest.mark.parametrize("factor", [ar2_one_plus_a2, ar2_sqrt_one_plus_a2])
def test_ar2_factors_pass_the_grid_check(factor):
    m = ARMAModel(2)
    region = interior_grid(m, per_axis=11)
    rep = check_superharmonic(factor(), region, model_metric(m, 1024), domain=m.is_valid)
    assert rep.verdict and rep.positive and rep.min_margin > 0


def test_non_superharmonic_factor_fails():
    m = ARMAModel(2)
    h = ScalarField(lambda t: float((1 + t[1]) ** 2), name="(1+a2)^2")
    rep = check_superharmonic(h, interior_grid(m, per_axis=11), model_metric(m, 1024),
                              domain=m.is_valid)
    assert not rep.verdict and rep.max_laplacian > 0
    assert rep.as_dict()["verdict"] == "fail"


def test_constant_factor_is_boundary_case():
    m = ARMAModel(1)
    rep = check_superharmonic(resolve_factor("one"), interior_grid(m, 9), model_metric(m),
                              domain=m.is_valid)
    assert rep.verdict and rep.max_laplacian == 0.0


def test_stencil_outside_region_is_rejected():
    m = ARMAModel(1, sigma2=1.0, root_margin=1e-6)
    with pytest.raises(StencilOutOfDomain):
        laplace_beltrami(ar1_sqrt_one_minus_a2(), [1 - 1.5e-6], model_metric(m), step=1e-4,
                         domain=m.is_valid)


def test_prior_F_for_jeffreys_is_half_skewness_trace():
    m = ARMAModel(2)
    geom = geometry_at(m, [0.3, -0.2])
    np.testing.assert_allclose(JEFFREYS.F(m, [0.3, -0.2], geom), 0.5 * geom.T_i)


def test_resolve_factor_by_import_path():
    h = resolve_factor("arma_bayes.factors:ar2_one_plus_a2")
    assert h([0.1, 0.2]) == pytest.approx(1.2)
    with pytest.raises(KeyError):
        resolve_factor("no_such_factor")

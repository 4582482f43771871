"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they also appear in the captured output of the normal run.
"""
import json
import time
import warnings

import numpy as np
import pytest

from arma_bayes.config import ExperimentConfig
from arma_bayes.errors import OracleRegionTruncated
from arma_bayes.factors import one
from arma_bayes.geometry import (
    JEFFREYS,
    ScalarField,
    geometry_at,
    jeffreys_times,
    laplace_beltrami,
    metric_at,
    model_metric,
    omega_grid,
)
from arma_bayes.harness import emit_report, run_experiment
from arma_bayes.likelihood import (
    expected_derivatives,
    expected_hessian,
    sample_path,
    trace_quantities,
)
from arma_bayes.model import ARMAModel, ConstantSpectrumModel
from arma_bayes.posterior import (
    bayes_spectral_expansion,
    bayes_spectral_oracle,
    fit_mle,
    gaussian_moments,
    mle_bias,
)
from arma_bayes.risk import asymptotic_risk, kl_divergence, mean_se


@pytest.fixture
def verdict(capsys, request):
    """Print one line per criterion, visible even when output is captured."""
    start = time.perf_counter()

    def emit(number, passed, detail):
        elapsed = time.perf_counter() - start
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} "
                  f"({elapsed:.1f}s) {detail}")
        return passed

    return emit


def loglog_slope(ns, errs):
    return float(np.polyfit(np.log(ns), np.log(errs), 1)[0])


def test_criterion_1_trace_information_converges(verdict):
    m = ARMAModel(1)
    ns = [32, 64, 128, 256]
    g = geometry_at(m, [0.5]).g[0, 0]
    errs = [abs(trace_quantities(m, [0.5], n).Jp[0, 0] - g) for n in ns]
    order = -loglog_slope(ns, errs)
    ok = order >= 0.9 and all(a > b for a, b in zip(errs, errs[1:]))
    assert verdict(1, ok, f"empirical order {order:.3f} (need >= 0.9), errors {errs}")


def _third_order_residuals(model, theta, ns):
    geom = geometry_at(model, theta)
    eG, T = geom.eG, geom.T
    lim3 = -(eG + np.einsum("ijk->jik", eG) + np.einsum("ijk->jki", eG) + T)
    lim2 = np.einsum("kij->ijk", eG)
    exact_gap, r3, r2 = 0.0, [], []
    for n in ns:
        tq = trace_quantities(model, theta, n)
        E = expected_derivatives(tq)
        exact_gap = max(exact_gap, float(np.abs(expected_hessian(model, theta, n) + tq.Jp).max()))
        r3.append(float(np.abs(E.m_ijk - lim3).max()))
        r2.append(float(np.abs(E.n_m_ij_k - lim2).max()))
    return exact_gap, r3, r2


def test_criterion_2_expectation_identities(verdict):
    ns = [32, 64, 128, 256]
    details, ok = [], True
    for name, model, theta in (("AR(1)", ARMAModel(1), [0.5]), ("MA(1)", ARMAModel(0, 1), [0.4])):
        gap, r3, r2 = _third_order_residuals(model, theta, ns)
        o3, o2 = -loglog_slope(ns, r3), -loglog_slope(ns, r2)
        ok &= gap < 1e-12 and o3 >= 0.9 and o2 >= 0.9
        details.append(f"{name}: |m_ij + J'| {gap:.1e}, m_ijk order {o3:.3f}, "
                       f"n m_ij,k order {o2:.3f}")
    assert verdict(2, ok, "; ".join(details))


def test_criterion_3_fourth_moments_match_monte_carlo(verdict):
    model = ARMAModel(2, 1)
    x = sample_path(model, [0.3, -0.2, 0.4], 200, seed=31)
    fit = fit_mle(model, x)
    n = fit.n
    I2, I4 = gaussian_moments(fit.J_n, n)
    rng = np.random.default_rng(2024)
    draws = rng.multivariate_normal(np.zeros(3), I2, size=1_000_000)
    worst = 0.0
    seen = set()
    for idx in np.ndindex(3, 3, 3, 3):
        key = tuple(sorted(idx))
        if key in seen:
            continue
        seen.add(key)
        prod = draws[:, idx[0]] * draws[:, idx[1]] * draws[:, idx[2]] * draws[:, idx[3]]
        mean, se = mean_se(prod)
        worst = max(worst, abs(mean - I4[idx]) / se)
    ok = worst <= 5.0
    assert verdict(3, ok, f"max |MC - I4| / SE = {worst:.2f} over {len(seen)} distinct entries (k=3)")


def test_criterion_4_bias_expansion(verdict):
    model = ARMAModel(1)
    a0, n, reps = 0.5, 128, 2000
    est = np.array([fit_mle(model, sample_path(model, [a0], n, 404, r)).theta_hat.coords[0] - a0
                    for r in range(reps)])
    mc, se = mean_se(est)
    b = mle_bias(model, [a0], n)
    z = (mc - b.finite_n[0]) / se
    # the two routes differ at the next order: relative gap shrinks like 1/n
    rel = [abs(mle_bias(model, [a0], m).finite_n[0] / mle_bias(model, [a0], m).geometric[0] - 1)
           for m in (64, 128, 256, 512)]
    order = -loglog_slope([64, 128, 256, 512], rel)
    ok = abs(z) <= 3.0 and order >= 0.9
    assert verdict(4, ok, f"MC bias {mc:.5f} +- {se:.5f}, formula {b.finite_n[0]:.5f} "
                          f"(geometric {b.geometric[0]:.5f}), z = {z:.2f}; route gap order {order:.2f}")


def test_criterion_5_expansion_accuracy(verdict):
    model = ARMAModel(1)
    a0, reps, ns = 0.2, 100, [64, 128, 256, 512]
    omega = omega_grid(128)
    errs = {"observed": [], "geometric": []}
    truncated = 0
    for n in ns:
        cell = {"observed": [], "geometric": []}
        for r in range(reps):
            x = sample_path(model, [a0], n, 505, r)
            fit = fit_mle(model, x, third=True)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OracleRegionTruncated)
                orc = bayes_spectral_oracle(model, x, JEFFREYS, omega, fit=fit)
            truncated += orc.truncated
            for form in cell:
                est = bayes_spectral_expansion(model, x, JEFFREYS, omega, form, fit)
                cell[form].append(np.abs(est.values - orc.values).max())
        for form in cell:
            errs[form].append(float(np.mean(cell[form])))
    slopes = {form: loglog_slope(ns, e) for form, e in errs.items()}
    ok = all(s <= -1.3 for s in slopes.values())
    assert verdict(5, ok, f"slopes {slopes} (need <= -1.3); mean max errors {errs}; "
                          f"oracle truncation flags {truncated}")


def test_criterion_6_formula_consistency(verdict):
    model = ARMAModel(1, 1)
    h = ScalarField(lambda t: 1 + 0.5 * t[0] + 0.3 * t[1] ** 2,
                    lambda t: np.array([0.5, 0.6 * t[1]]), name="test-factor")
    prior = jeffreys_times(h)
    rng = np.random.default_rng(66)
    worst, count = 0.0, 0
    while count < 20:
        theta = rng.uniform(-0.85, 0.85, 2)
        # keep away from the a = -b line where the two roots cancel and g degenerates
        if not model.is_valid(theta) or np.linalg.cond(metric_at(model, theta, 2048)) > 1e3:
            continue
        r = asymptotic_risk(model, theta, prior)
        worst = max(worst, abs(r.diff_vs_jeffreys - r.prop1_difference) / abs(r.prop1_difference))
        count += 1
    ok = worst <= 1e-4
    assert verdict(6, ok, f"max relative gap {worst:.2e} over 20 points (need <= 1e-4)")


def _dominance_cfg(h, reps, seed):
    return ExperimentConfig.from_dict({
        "name": f"acceptance-{h}", "model": {"p": 2, "q": 0, "sigma2": 1.0},
        "theta0": [0.3, -0.2], "jobs": ["dominance-experiment"], "h": h,
        "n_grid": [64, 128, 256], "reps": reps, "seed": seed})


def test_criterion_7_dominance(verdict):
    main = run_experiment(_dominance_cfg("ar2_one_plus_a2", "auto", 20240521)).jobs[0]
    null = run_experiment(_dominance_cfg("one", 1000, 20240522)).jobs[0]
    cells = main.summary["cells"]
    t_ok = all(c["t"] > 2.0 for c in cells)
    band_ok = all(abs(c["z_vs_asymptote"]) <= 3.0 for c in cells)
    paired_ok = main.summary["paired_se_below_unpaired"]
    null_ok = all(abs(c["t"]) < 3.0 for c in null.summary["cells"])
    sh = main.summary["superharmonic"]
    ok = t_ok and band_ok and paired_ok and null_ok and sh["verdict"] == "pass"
    detail = ", ".join(f"n={c['n']}: reps {c['reps']} t={c['t']:.2f} n2diff={c['n2_diff']:.3f}"
                       f"+-{c['n2_diff_se']:.3f}" for c in cells)
    assert verdict(7, ok, f"{detail}; asymptote {main.summary['asymptote']:.4f}; "
                          f"null |t| max {max(abs(c['t']) for c in null.summary['cells']):.2f}")


def test_criterion_8_unit_oracles(verdict):
    kl = kl_divergence(np.ones(8), 2 * np.ones(8))
    g_wn = geometry_at(ConstantSpectrumModel(), [1.0]).g[0, 0]
    g_ar = geometry_at(ARMAModel(1), [0.5]).g[0, 0]
    phi = ScalarField(lambda t: float(np.log(t[0])))
    lap = laplace_beltrami(phi, [1.3], model_metric(ConstantSpectrumModel()))
    # 0.0965736 is the 7-digit rounding of (1/2)(log 2 - 1/2); the 1e-9 check is
    # made against the exact value
    kl_exact = 0.5 * (np.log(2) - 0.5)
    ok = (abs(kl - kl_exact) <= 1e-9 and round(kl, 7) == 0.0965736
          and abs(g_wn - 0.5) <= 1e-10 and abs(g_ar - 4 / 3) <= 1e-8 and abs(lap) <= 1e-6)
    assert verdict(8, ok, f"kl {kl:.10f}, g(white noise) {g_wn:.12f}, g_aa(AR1) {g_ar:.12f}, "
                          f"Laplacian(log) {lap:.2e}")


def test_criterion_9_determinism(verdict, tmp_path):
    cfg = ExperimentConfig.from_dict({
        "model": {"p": 2}, "theta0": [0.3, -0.2],
        "jobs": ["dominance-experiment", "bias-check", "geometry-table"],
        "h": "ar2_one_plus_a2", "n_grid": [48, 96], "reps": 60,
        "bias": {"n": 64, "reps": 100}, "seed": 99})
    payloads = []
    for run, workers in (("a", 1), ("b", 1), ("c", 2)):
        out = tmp_path / run
        emit_report(run_experiment(cfg, workers=workers), str(out), ["csv", "json"])
        payloads.append({f: (out / f).read_bytes()
                         for f in ("dominance.csv", "bias.csv", "geometry.csv", "summary.json")})
    ok = payloads[0] == payloads[1] == payloads[2]
    assert verdict(9, ok, "CSV and summary bytes identical across two serial runs and a "
                          "two-worker run")

"""KL risk of Bayesian spectral densities: Monte Carlo and asymptotic formulas."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DidNotConverge,
    HessianNotPD,
    InvalidParameter,
    NonPositiveDensity,
    SingularMatrix,
    TooManyFitFailures,
)
from .factors import interior_grid
from .geometry import (
    JEFFREYS,
    GeometryTensors,
    PriorSpec,
    QuadConfig,
    ScalarField,
    SuperharmonicReport,
    check_superharmonic,
    constant_field,
    converged_nodes,
    directional_derivative,
    fd_step,
    geometry_at,
    jeffreys_times,
    laplace_beltrami,
    log_jeffreys,
    model_metric,
    omega_grid,
)
from .likelihood import sample_path
from .model import SpectralModel, ThetaVector, coerce_theta
from .posterior import (
    EPS_S,
    OracleConfig,
    bayes_spectral_oracle,
    expansion_geometric,
    expansion_observed,
    fit_mle,
    posterior_summary,
)

WORKERS_ENV = "ARMA_BAYES_WORKERS"


# KL divergence ---------------------------------------------------------------------

def _kl_on_grid(s0: np.ndarray, sh: np.ndarray) -> float:
    s0 = np.asarray(s0, dtype=float)
    sh = np.asarray(sh, dtype=float)
    if s0.shape != sh.shape:
        raise ValueError("fields must share one grid")
    if np.any(s0 <= 0) or np.any(sh <= 0) or not (np.all(np.isfinite(s0)) and np.all(np.isfinite(sh))):
        raise NonPositiveDensity("spectral fields must be finite and strictly positive")
    r = s0 / sh
    # the integrand is non-negative; clip the rounding noise around r = 1
    integrand = np.maximum(r - 1.0 - np.log(r), 0.0)
    return 0.5 * math.fsum(integrand) / integrand.size


def kl_divergence(S0, Shat, quad: Optional[QuadConfig] = None) -> float:
    """``int dw/4pi (S0/Shat - 1 - log(S0/Shat))`` over one period.

    Arrays are taken as values on a uniform periodic grid (the trapezoid rule
    is then a plain mean).  Callables of ``omega`` are integrated with node
    doubling until successive values differ by less than ``quad.tol``.
    """
    if not callable(S0) and not callable(Shat):
        return _kl_on_grid(S0, Shat)
    quad = QuadConfig() if quad is None else quad
    f0 = S0 if callable(S0) else None
    fh = Shat if callable(Shat) else None
    if f0 is None or fh is None:
        raise ValueError("pass two arrays or two callables")
    nodes = quad.nodes
    prev = _kl_on_grid(f0(omega_grid(nodes)), fh(omega_grid(nodes)))
    while nodes < quad.max_nodes:
        nodes *= 2
        cur = _kl_on_grid(f0(omega_grid(nodes)), fh(omega_grid(nodes)))
        if abs(cur - prev) <= quad.tol * max(1.0, abs(cur)):
            return cur
        prev = cur
    return prev


# Monte Carlo replications --------------------------------------------------------

@dataclass(frozen=True)
class RiskSettings:
    """Knobs shared by every replication of a Monte Carlo cell."""

    estimator: str = "expansion"
    form: str = "geometric"
    kl_nodes: int = 512
    quad: QuadConfig = QuadConfig()
    oracle: OracleConfig = OracleConfig()

    def __post_init__(self):
        if self.estimator not in ("expansion", "oracle"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.form not in ("geometric", "observed"):
            raise ValueError(f"unknown form {self.form!r}")


def _estimates(model, x, fit, priors, omega, settings: RiskSettings):
    """Bayesian spectral estimates on ``omega`` for each prior, sharing one fit."""
    out = []
    if settings.estimator == "oracle":
        for prior in priors:
            est = bayes_spectral_oracle(model, x, prior, omega, settings.oracle, fit=fit)
            out.append(est.values)
        return out
    if settings.form == "geometric":
        geom = geometry_at(model, fit.theta_hat.coords, settings.quad)
        for prior in priors:
            out.append(expansion_geometric(model, fit.theta_hat.coords, fit.n, prior, omega,
                                           geom=geom, quad=settings.quad))
        return out
    for prior in priors:
        summ = posterior_summary(model, x, prior, fit, settings.quad)
        out.append(expansion_observed(model, summ, omega))
    return out


def replicate(model: SpectralModel, theta0, priors: Sequence[PriorSpec], n: int, seed: int,
              rep: int, settings: RiskSettings = RiskSettings()):
    """One replication: returns ``(kl per prior, floored per prior)`` or ``None`` on fit failure."""
    th0 = coerce_theta(model, theta0)
    omega = omega_grid(settings.kl_nodes)
    s0 = model.spectral_density(th0, omega)
    x = sample_path(model, th0, n, seed, rep)
    try:
        fit = fit_mle(model, x, third=settings.form == "observed")
    except (DidNotConverge, HessianNotPD, InvalidParameter, SingularMatrix):
        return None
    kls, floored = [], []
    for raw in _estimates(model, x, fit, priors, omega, settings):
        low = raw <= EPS_S
        kls.append(_kl_on_grid(s0, np.where(low, EPS_S, raw)))
        floored.append(int(low.sum()))
    return kls, floored


def _replicate_chunk(args):
    model, theta0, priors, n, seed, reps, settings = args
    return [replicate(model, theta0, priors, n, seed, r, settings) for r in reps]


def worker_count(workers: Optional[int] = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def run_replications(model, theta0, priors, n, seed, rep_indices, settings=RiskSettings(),
                     workers: Optional[int] = None):
    """Run replications ``rep_indices``; results come back in index order."""
    rep_indices = list(rep_indices)
    workers = worker_count(workers)
    if workers == 1 or len(rep_indices) < 2 * workers:
        return _replicate_chunk((model, theta0, priors, n, seed, rep_indices, settings))
    chunks = [rep_indices[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_replicate_chunk,
                              [(model, theta0, priors, n, seed, c, settings) for c in chunks]))
    by_rep = {}
    for chunk, res in zip(chunks, parts):
        by_rep.update(zip(chunk, res))
    return [by_rep[r] for r in rep_indices]


def mean_se(values) -> tuple[float, float]:
    """Mean and SD/sqrt(R), with exactly rounded sums so the order of results never matters."""
    v = np.asarray(values, dtype=float)
    m = math.fsum(v) / v.size
    if v.size < 2:
        return m, float("nan")
    var = math.fsum((v - m) ** 2) / (v.size - 1)
    return m, math.sqrt(var / v.size)


def _check_failures(results, reps):
    failures = sum(r is None for r in results)
    if failures > 0.01 * reps:
        raise TooManyFitFailures(f"{failures} of {reps} replications failed to fit")
    return failures


@dataclass(frozen=True)
class RiskReport:
    theta0: ThetaVector
    prior: PriorSpec
    n: int
    reps: int
    mean: float
    se: float
    floored_count: int
    seed: int
    failures: int = 0
    estimator: str = "expansion"
    kl: np.ndarray = field(default=None, repr=False)

    @property
    def mc_risk(self) -> tuple[float, float]:
        return self.mean, self.se


def mc_risk(model: SpectralModel, theta0, prior: PriorSpec, n: int, reps: int, seed: int,
            estimator: str = "expansion", settings: Optional[RiskSettings] = None,
            workers: Optional[int] = None) -> RiskReport:
    """Monte Carlo KL risk ``E_theta0 D(S0 || S_f)`` over ``reps`` seeded replications."""
    if reps < 2:
        raise ValueError("reps must be at least 2")
    th0 = model.validate(theta0)
    if settings is None:
        settings = RiskSettings(estimator=estimator)
    results = run_replications(model, th0.coords, [prior], n, seed, range(reps), settings, workers)
    failures = _check_failures(results, reps)
    ok = [r for r in results if r is not None]
    kl = np.array([r[0][0] for r in ok])
    mean, se = mean_se(kl)
    floored = sum(r[1][0] for r in ok)
    return RiskReport(th0, prior, n, reps, mean, se, floored, seed, failures,
                      settings.estimator, kl)


# asymptotic risk ------------------------------------------------------------------

@dataclass(frozen=True)
class AsymptoticRisk:
    """Prior-dependent risk terms, scaled by n^2.

    ``f_part`` and ``diff_vs_jeffreys`` are the coefficients of 1/n^2; use
    :meth:`at` for the values at a given sample size.  ``prop1_difference``
    is ``f_part(pi_J) - f_part(f)`` computed independently of
    ``diff_vs_jeffreys``; ``components`` holds ``(1/2 |d log h|^2, -Lap h / h)``.
    """

    theta0: np.ndarray
    f_part: float
    f_part_jeffreys: float
    diff_vs_jeffreys: float
    components: tuple[float, float]
    prop1_difference: float

    def at(self, n: int) -> dict:
        return {"f_part": self.f_part / n ** 2, "diff_vs_jeffreys": self.diff_vs_jeffreys / n ** 2}


def ratio_field(model: SpectralModel, prior: PriorSpec, theta0, nodes: int) -> ScalarField:
    """``h = f / pi_J`` as a scalar field (normalised to 1 at ``theta0`` for custom priors)."""
    if prior.kind == "jeffreys":
        return constant_field(1.0)
    if prior.kind == "jeffreys_times_h":
        return prior.h
    ref = prior.log_density(model, theta0) - log_jeffreys(model, theta0, nodes)

    def value(th):
        return math.exp(prior.log_density(model, th) - log_jeffreys(model, th, nodes) - ref)

    return ScalarField(value, name="f/pi_J")


def _fixed_quad(model, th, quad):
    nodes = 2 * converged_nodes(model, th, quad)
    return QuadConfig(nodes=nodes, tol=quad.tol, max_nodes=quad.max_nodes, adaptive=False), nodes


def f_part(model: SpectralModel, theta0, prior: PriorSpec, quad: QuadConfig = QuadConfig(),
           step=None) -> float:
    """``1/2 g^ij F_i F_j + div_e(g^-1 F)`` at theta0, with the e-covariant divergence."""
    th = coerce_theta(model, theta0)
    fixed, _ = _fixed_quad(model, th, quad)
    step = fd_step(th) if step is None else np.broadcast_to(step, th.shape)

    def vec(t):
        geom = geometry_at(model, t, fixed)
        F = prior.F(model, t, geom, fixed)
        return geom, F, geom.g_inv @ F

    geom, F, V = vec(th)
    div = float(geom.eG_trace() @ V)
    for k in range(th.size):
        div += directional_derivative(lambda t: vec(t)[2][k], th, k, step[k], model.is_valid)
    return 0.5 * float(F @ V) + div


def asymptotic_risk(model: SpectralModel, theta0, prior: PriorSpec,
                    quad: QuadConfig = QuadConfig()) -> AsymptoticRisk:
    th = coerce_theta(model, theta0)
    fixed, nodes = _fixed_quad(model, th, quad)
    fp = f_part(model, th, prior, quad)
    fpj = f_part(model, th, JEFFREYS, quad)
    h = ratio_field(model, prior, th, nodes)
    dlog = h.log_gradient(th, domain=model.is_valid)
    g_inv = np.linalg.inv(model_metric(model, nodes)(th))
    grad_term = 0.5 * float(dlog @ g_inv @ dlog)
    lap_term = -laplace_beltrami(h, th, model_metric(model, nodes), domain=model.is_valid) / h(th)
    return AsymptoticRisk(th, fp, fpj, grad_term + lap_term, (grad_term, lap_term), fpj - fp)


# dominance experiment --------------------------------------------------------------

@dataclass(frozen=True)
class DominanceRow:
    n: int
    reps: int
    risk_jeffreys: float
    risk_jeffreys_se: float
    risk_h: float
    risk_h_se: float
    diff: float
    diff_se: float
    unpaired_se: float
    t: float
    n2_diff: float
    n2_diff_se: float
    asymptote: float
    z_vs_asymptote: float
    floored_count: int
    failures: int
    seed: int


@dataclass(frozen=True)
class DominanceResult:
    rows: list
    asymptote: AsymptoticRisk
    superharmonic: Optional[SuperharmonicReport]
    h_name: str


def pilot_reps_rule(diffs, effect: float, pilot: int, max_reps: int, multiplier: float) -> int:
    """Replications needed so that ``effect / SE`` reaches ``multiplier``.

    With no positive predicted effect (null control) the pilot size is kept.
    """
    if effect <= 0:
        return pilot
    _, se = mean_se(diffs)
    sd = se * math.sqrt(len(diffs))
    need = math.ceil((multiplier * sd / effect) ** 2)
    return int(min(max(need, pilot), max_reps))


def dominance_experiment(model: SpectralModel, theta0, h: ScalarField, n_grid: Sequence[int],
                         reps="auto", seed: int = 0, pilot_reps: int = 400,
                         max_reps: int = 20000, t_multiplier: float = 5.0,
                         settings: RiskSettings = RiskSettings(),
                         region: Optional[np.ndarray] = None,
                         require_superharmonic: bool = True,
                         workers: Optional[int] = None,
                         progress: Optional[Callable[[str], None]] = None) -> DominanceResult:
    """Paired Monte Carlo comparison of the Jeffreys prior and ``pi_J * h``.

    Both priors are applied to the same simulated paths and the same MLE.
    ``reps="auto"`` runs ``pilot_reps`` first and sizes the cell so that the
    predicted difference is ``t_multiplier`` paired SEs; the pilot
    replications are reused as the first part of the cell.
    """
    th0 = model.validate(theta0).coords
    report = None
    if require_superharmonic:
        if region is None:
            region = interior_grid(model, per_axis=7, center=th0, radius=0.05)
        metric = model_metric(model, 2 * converged_nodes(model, th0, settings.quad))
        report = check_superharmonic(h, region, metric, domain=model.is_valid)
        if not report.verdict:
            raise ValueError(f"h fails the superharmonic check: {report.as_dict()}")
    priors = [JEFFREYS, jeffreys_times(h)]
    asym = asymptotic_risk(model, th0, priors[1], settings.quad)
    rows = []
    for n in n_grid:
        if reps == "auto":
            pilot = run_replications(model, th0, priors, n, seed, range(pilot_reps), settings, workers)
            ok = [r for r in pilot if r is not None]
            d = [r[0][0] - r[0][1] for r in ok]
            total = pilot_reps_rule(d, asym.diff_vs_jeffreys / n ** 2, pilot_reps, max_reps,
                                    t_multiplier)
            rest = run_replications(model, th0, priors, n, seed, range(pilot_reps, total),
                                    settings, workers)
            results = pilot + rest
        else:
            total = int(reps)
            results = run_replications(model, th0, priors, n, seed, range(total), settings, workers)
        failures = _check_failures(results, total)
        ok = [r for r in results if r is not None]
        kj = np.array([r[0][0] for r in ok])
        kh = np.array([r[0][1] for r in ok])
        mj, sej = mean_se(kj)
        mh, seh = mean_se(kh)
        md, sed = mean_se(kj - kh)
        unpaired = math.sqrt(sej ** 2 + seh ** 2)
        t = md / sed if sed > 0 else 0.0
        n2 = n ** 2
        z = (n2 * md - asym.diff_vs_jeffreys) / (n2 * sed) if sed > 0 else 0.0
        rows.append(DominanceRow(
            n=n, reps=total, risk_jeffreys=mj, risk_jeffreys_se=sej, risk_h=mh, risk_h_se=seh,
            diff=md, diff_se=sed, unpaired_se=unpaired, t=t, n2_diff=n2 * md, n2_diff_se=n2 * sed,
            asymptote=asym.diff_vs_jeffreys, z_vs_asymptote=z,
            floored_count=sum(sum(r[1]) for r in ok), failures=failures, seed=seed))
        if progress is not None:
            progress(f"n={n} reps={total} diff={md:.3e} se={sed:.2e} t={t:.2f}")
    return DominanceResult(rows, asym, report, h.name)

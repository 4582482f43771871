"""MLE fitting, Gaussian posterior moments and Bayesian spectral densities.

Two routes produce the Bayesian spectral density ``S_f(w) = E[S(w | theta) | x]``:

* an asymptotic expansion around the MLE, either with observed likelihood
  derivatives (``form="observed"``) or with the geometric tensors
  (``form="geometric"``);
* a brute-force quadrature over a theta grid (``bayes_spectral_oracle``), used
  only to check the expansion for k <= 3.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import (
    DidNotConverge,
    HessianNotPD,
    InvalidParameter,
    OracleRegionTruncated,
    SingularMatrix,
)
from .geometry import (
    GeometryTensors,
    PriorSpec,
    QuadConfig,
    geometry_at,
    metric_at,
)
from .likelihood import (
    LikelihoodDerivs,
    expected_derivatives,
    log_likelihood,
    log_likelihood_partials,
    trace_quantities,
)
from .model import (
    TWO_PI,
    ARMAModel,
    ConstantSpectrumModel,
    SpectralModel,
    ThetaVector,
    coerce_theta,
)

EPS_S = 1e-12


@dataclass(frozen=True)
class MLEFit:
    theta_hat: ThetaVector
    J_n: np.ndarray
    loglik: float
    grad_norm: float
    iterations: int
    n: int
    derivs: LikelihoodDerivs = field(repr=False)


def default_init(model: SpectralModel, x: np.ndarray) -> np.ndarray:
    """Yule-Walker start for the AR block, zero MA, sample-variance scale."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if isinstance(model, ConstantSpectrumModel):
        return np.array([max(float(x @ x) / n, 1e-12) / TWO_PI])
    theta = np.zeros(model.k)
    if isinstance(model, ARMAModel):
        acov = np.array([x[: n - h] @ x[h:] / n for h in range(model.p + 1)])
        if model.p:
            a = sla.solve_toeplitz(acov[:-1], acov[1:])
            a *= 0.98  # keep the start strictly inside the region
            while not model.is_valid(np.r_[a, np.zeros(model.k - model.p)]):
                a *= 0.5
            theta[: model.p] = a
        if model.sigma_free:
            theta[-1] = np.log(max(acov[0], 1e-12))
    return theta


def _newton_direction(H: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Ascent direction from a Levenberg-damped Newton system."""
    negH = -H
    scale = max(np.abs(np.diag(negH)).max(), 1e-12)
    mu = 0.0
    for _ in range(60):
        try:
            c = np.linalg.cholesky(negH + mu * np.eye(len(G)))
            return sla.cho_solve((c, True), G)
        except np.linalg.LinAlgError:
            mu = max(2.0 * mu, 1e-8 * scale)
    return G / scale


def _newton(model, x, init, tol_grad, max_iter):
    n = len(x)
    th = np.array(init, dtype=float)
    d = log_likelihood_partials(model, th, x, 2)
    for it in range(1, max_iter + 1):
        G, H = d.L_i, d.L_ij
        if np.max(np.abs(G)) <= tol_grad:
            return th, d, it - 1
        step = _newton_direction(H, G)
        slope = float(G @ step)
        f0 = d.value / n
        t = 1.0
        while t > 1e-14:
            cand = th + t * step
            if model.is_valid(cand):
                val = log_likelihood(model, cand, x) / n
                if val >= f0 + 1e-4 * t * slope:
                    break
            t *= 0.5
        else:
            raise DidNotConverge("line search failed")
        th = cand
        d = log_likelihood_partials(model, th, x, 2)
    if np.max(np.abs(d.L_i)) <= tol_grad:
        return th, d, max_iter
    raise DidNotConverge(f"gradient {np.max(np.abs(d.L_i)):.3g} after {max_iter} iterations")


def fit_mle(model: SpectralModel, x, init=None, tol_grad: float = 1e-8,
            max_iter: int = 100, retries: int = 3, third: bool = False) -> MLEFit:
    """Maximise the exact likelihood by damped Newton steps inside the valid region.

    Convergence means ``max_i |L_i| <= tol_grad`` (gradient per observation).
    Failed starts are retried from deterministic jitters of the initial point.
    ``third=True`` also stores the third-order derivatives at the optimum.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    start = default_init(model, x) if init is None else coerce_theta(model, init)
    rng = np.random.default_rng(12345)
    last_exc: Exception = DidNotConverge("no attempt made")
    for attempt in range(retries + 1):
        trial = start
        if attempt:
            trial = start + 0.1 * rng.standard_normal(model.k)
            shrink = 0
            while not model.is_valid(trial) and shrink < 40:
                trial = 0.5 * (trial + start) if shrink < 20 else 0.5 * trial
                shrink += 1
        try:
            th, d, iters = _newton(model, x, trial, tol_grad, max_iter)
        except (DidNotConverge, InvalidParameter) as exc:
            last_exc = exc
            continue
        J = -d.L_ij
        try:
            np.linalg.cholesky(J)
        except np.linalg.LinAlgError:
            last_exc = HessianNotPD(f"observed information not PD at {th}")
            continue
        if third:
            d = log_likelihood_partials(model, th, x, 3)
        return MLEFit(ThetaVector(th, True), J, d.value, float(np.max(np.abs(d.L_i))),
                      iters, n, d)
    raise last_exc


# Gaussian moments ----------------------------------------------------------------

def isserlis4(I2: np.ndarray) -> np.ndarray:
    return (np.einsum("ij,kl->ijkl", I2, I2)
            + np.einsum("ik,jl->ijkl", I2, I2)
            + np.einsum("il,jk->ijkl", I2, I2))


def gaussian_moments(J_n, n: int, orders=(2, 4)):
    """Second and fourth moments of N(0, J_n^{-1} / n).

    Returns ``(I2, I4)``; entries not requested are ``None``.  Odd moments of
    this Gaussian are zero and are not returned.
    """
    J = np.atleast_2d(np.asarray(J_n, dtype=float))
    try:
        c = np.linalg.cholesky(J)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("J_n is not positive definite") from exc
    I2 = sla.cho_solve((c, True), np.eye(len(J))) / n
    I4 = isserlis4(I2) if 4 in orders else None
    return (I2 if 2 in orders else None), I4


@dataclass(frozen=True)
class PosteriorSummary:
    theta_hat: ThetaVector
    n: int
    J_n: np.ndarray
    I2: np.ndarray
    I4: np.ndarray
    B_f: np.ndarray
    prior: PriorSpec
    log_prior_grad: np.ndarray
    L_ijk: np.ndarray = field(repr=False)


def shift_from_parts(L_ijk, I2, I4, log_prior_grad, n) -> np.ndarray:
    """Posterior mean minus MLE from third derivatives, moments and prior slope."""
    cubic = n / 6.0 * np.einsum("abc,abci->i", L_ijk, I4)
    return cubic + I2 @ np.asarray(log_prior_grad, dtype=float)


def posterior_summary(model: SpectralModel, x, prior: PriorSpec,
                      fit: Optional[MLEFit] = None,
                      quad: QuadConfig = QuadConfig()) -> PosteriorSummary:
    x = np.asarray(x, dtype=float)
    if fit is None or fit.derivs.L_ijk is None:
        init = None if fit is None else fit.theta_hat
        fit = fit_mle(model, x, init=init, third=True)
    n = fit.n
    I2, I4 = gaussian_moments(fit.J_n, n)
    grad = prior.log_density_gradient(model, fit.theta_hat.coords, quad)
    B = shift_from_parts(fit.derivs.L_ijk, I2, I4, grad, n)
    return PosteriorSummary(fit.theta_hat, n, fit.J_n, I2, I4, B, prior, grad, fit.derivs.L_ijk)


def posterior_shift(model: SpectralModel, x, theta_hat, prior: PriorSpec,
                    quad: QuadConfig = QuadConfig()) -> np.ndarray:
    """``B_f`` at a given MLE: derivatives, moments and prior slope are evaluated there."""
    x = np.asarray(x, dtype=float)
    th = coerce_theta(model, theta_hat)
    d = log_likelihood_partials(model, th, x, 3)
    n = len(x)
    I2, I4 = gaussian_moments(-d.L_ij, n)
    grad = prior.log_density_gradient(model, th, quad)
    return shift_from_parts(d.L_ijk, I2, I4, grad, n)


# Bayesian spectral density ------------------------------------------------------------

@dataclass(frozen=True)
class BayesSpectralEstimate:
    omega: np.ndarray
    values: np.ndarray
    method: str
    floored_count: int = 0
    truncated: bool = False
    truncation_mass: float = 0.0
    posterior_mean: Optional[np.ndarray] = None


def _floor(values):
    low = values <= EPS_S
    return np.where(low, EPS_S, values), int(low.sum())


def expansion_observed(model, summary: PosteriorSummary, omega, corrections: bool = True):
    """``S(th) + d_i S B^i + 1/2 d_ij S I^ij`` at the MLE."""
    se = model.spectral_partials(summary.theta_hat.coords, omega, 2)
    if not corrections:
        return se.value
    return (se.value + np.einsum("iw,i->w", se.grad, summary.B_f)
            + 0.5 * np.einsum("ijw,ij->w", se.hess, summary.I2))


def expansion_geometric(model, theta_hat, n: int, prior: PriorSpec, omega,
                        geom: Optional[GeometryTensors] = None,
                        quad: QuadConfig = QuadConfig(), corrections: bool = True):
    """Geometric form of the expansion, built from g, the m-connection and T."""
    th = np.asarray(theta_hat, dtype=float)
    se = model.spectral_partials(th, omega, 2)
    if not corrections:
        return se.value
    geom = geometry_at(model, th, quad) if geom is None else geom
    gi = geom.g_inv
    gm_up = np.einsum("kl,lij->ijk", gi, geom.Gm)  # Gamma^(m)k_ij at [i, j, k]
    second = se.hess - np.einsum("ijk,kw->ijw", gm_up, se.grad)
    F = prior.F(model, th, geom, quad)
    return (se.value
            + 0.5 / n * np.einsum("ij,ijw->w", gi, second)
            + 1.0 / n * np.einsum("ij,i,jw->w", gi, F, se.grad))


def bayes_spectral_expansion(model: SpectralModel, x, prior: PriorSpec, omega_grid,
                             form: str = "observed", fit: Optional[MLEFit] = None,
                             quad: QuadConfig = QuadConfig(),
                             corrections: bool = True) -> BayesSpectralEstimate:
    """Expansion of the Bayesian spectral density around the MLE.

    ``form="observed"`` uses observed third derivatives and the shift B_f;
    ``form="geometric"`` uses the tensors at the MLE.  Values at or below
    ``EPS_S`` are floored and counted.
    """
    omega = np.asarray(omega_grid, dtype=float)
    x = np.asarray(x, dtype=float)
    if form == "observed":
        summary = posterior_summary(model, x, prior, fit, quad)
        raw = expansion_observed(model, summary, omega, corrections)
    elif form == "geometric":
        fit = fit_mle(model, x) if fit is None else fit
        raw = expansion_geometric(model, fit.theta_hat.coords, len(x), prior, omega,
                                  quad=quad, corrections=corrections)
    else:
        raise ValueError(f"unknown form {form!r}")
    values, floored = _floor(raw)
    return BayesSpectralEstimate(omega, values, f"expansion-{form}", floored)


@dataclass(frozen=True)
class OracleConfig:
    """Theta grid for the brute-force posterior: ``nodes`` per axis over ``+-width`` SDs."""

    nodes: Optional[int] = None
    width: float = 8.0
    metric_nodes: int = 1024
    truncation_tol: float = 1e-6

    def nodes_for(self, k: int) -> int:
        if self.nodes is not None:
            return self.nodes
        return {1: 401, 2: 101, 3: 41}[k]


def _oracle_grid(model, center, sd, cfg: OracleConfig):
    k = model.k
    m = cfg.nodes_for(k)
    axes = [center[i] + sd[i] * np.linspace(-cfg.width, cfg.width, m) for i in range(k)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)
    # trapezoid weights (edges halved); the spacing is a common factor per axis
    w1 = np.ones(m)
    w1[[0, -1]] = 0.5
    w = w1
    for _ in range(k - 1):
        w = np.multiply.outer(w, w1)
    edge = np.zeros((m,) * k, dtype=bool)
    for i in range(k):
        sl = [slice(None)] * k
        sl[i] = [0, -1]
        edge[tuple(sl)] = True
    return mesh, w.reshape(-1), edge.reshape(-1), (m,) * k


def bayes_spectral_oracle(model: SpectralModel, x, prior: PriorSpec, omega_grid,
                          theta_quad: OracleConfig = OracleConfig(),
                          fit: Optional[MLEFit] = None) -> BayesSpectralEstimate:
    """Posterior mean of S(w | theta) by direct quadrature on a theta grid.

    The grid spans the MLE plus/minus ``width`` posterior SDs per axis; points
    outside the valid region carry zero weight.  If the normalised posterior
    mass on the grid edge or next to excluded points exceeds the truncation
    tolerance, the result is flagged and an ``OracleRegionTruncated`` warning
    is issued.
    """
    if model.k > 3:
        raise ValueError("the quadrature oracle supports k <= 3")
    x = np.asarray(x, dtype=float)
    omega = np.asarray(omega_grid, dtype=float)
    fit = fit_mle(model, x) if fit is None else fit
    center = fit.theta_hat.coords
    sd = np.sqrt(np.diag(np.linalg.inv(fit.J_n)) / fit.n)
    mesh, weights, edge, shape = _oracle_grid(model, center, sd, theta_quad)
    valid = np.array([model.is_valid(t) for t in mesh])
    logpost = np.full(len(mesh), -np.inf)
    for idx in np.flatnonzero(valid):
        t = mesh[idx]
        logpost[idx] = log_likelihood(model, t, x) + prior.log_density(
            model, t, theta_quad.metric_nodes)
    logpost -= logpost[valid].max()
    post = np.where(valid, np.exp(logpost), 0.0) * weights
    total = post.sum()
    post /= total
    # mass at risk of truncation: grid edges and valid neighbours of excluded nodes
    near = edge.copy()
    if not valid.all():
        inval = (~valid).reshape(shape)
        grown = inval.copy()
        for ax in range(model.k):
            grown |= np.roll(inval, 1, axis=ax) | np.roll(inval, -1, axis=ax)
        near |= grown.reshape(-1)
    values = np.zeros_like(omega)
    edge_values = np.zeros_like(omega)
    at_risk = near & valid
    for idx in np.flatnonzero(post > 0):
        contrib = post[idx] * model.spectral_density(mesh[idx], omega)
        values += contrib
        if at_risk[idx]:
            edge_values += contrib
    # both the raw mass and its share of the spectral mean can signal truncation,
    # since S(w | theta) may blow up towards the boundary
    trunc_mass = max(float(post[at_risk].sum()), float(np.max(edge_values / values)))
    truncated = trunc_mass > theta_quad.truncation_tol
    if truncated:
        warnings.warn(f"posterior share {trunc_mass:.2e} near the region boundary",
                      OracleRegionTruncated, stacklevel=2)
    mean_theta = post @ mesh
    return BayesSpectralEstimate(omega, values, "oracle-quadrature", 0, truncated,
                                 trunc_mass, mean_theta)


# MLE bias -----------------------------------------------------------------------

@dataclass(frozen=True)
class BiasReport:
    n: int
    finite_n: np.ndarray
    geometric: np.ndarray


def mle_bias(model: SpectralModel, theta0, n: int, quad: QuadConfig = QuadConfig()) -> BiasReport:
    """Leading-order bias of the MLE by two routes.

    ``finite_n`` uses the exact trace expectations at sample size n,
    ``geometric`` the large-n limit ``-(1/2n) Gamma^(m)i_jk g^jk``.
    """
    th = coerce_theta(model, theta0)
    E = expected_derivatives(trace_quantities(model, th, n))
    mi = E.m_inv
    first = np.einsum("il,lkm,km->i", mi, E.n_m_ij_k, mi)
    second = 0.5 * np.einsum("ik,kjl,jl->i", mi, E.m_ijk, mi)
    geom = geometry_at(model, th, quad)
    return BiasReport(n, (first + second) / n, -0.5 / n * geom.Gm_contracted())

"""Exact zero-mean Gaussian likelihood over Toeplitz covariances.

The log-likelihood without its constant is

    l_n(theta) = -1/2 x' Sigma^{-1} x - 1/2 log det Sigma

and every ``L_{i...}`` returned here is ``(1/n)`` times the matching partial.
Products with ``Sigma^{-1}`` always go through the Cholesky factor.

Pure AR models additionally get an O(n) route: the density factors into the
stationary law of the first p values and the conditional innovations, so only
a p x p covariance has to be handled.
"""
from __future__ import annotations

import functools
import itertools
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import NotPositiveDefinite, OrderUnsupported, SingularMatrix
from .model import ARMAModel, SpectralModel, coerce_theta, symmetric_fill

LOG_2PI = np.log(2.0 * np.pi)


class ToeplitzCov:
    """Covariance with entries ``gamma(|s - t|)`` and a lazily cached Cholesky factor."""

    def __init__(self, gamma):
        self.gamma = np.asarray(gamma, dtype=float)
        self.n = len(self.gamma)
        self._chol = None
        self._lock = threading.Lock()

    @property
    def matrix(self) -> np.ndarray:
        return sla.toeplitz(self.gamma)

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular factor; filled once even under concurrent access."""
        if self._chol is None:
            with self._lock:
                if self._chol is None:
                    try:
                        self._chol = np.linalg.cholesky(self.matrix)
                    except np.linalg.LinAlgError as exc:
                        raise NotPositiveDefinite(
                            f"Cholesky failed for n={self.n} Toeplitz covariance"
                        ) from exc
        return self._chol

    def solve(self, rhs) -> np.ndarray:
        return sla.cho_solve((self.chol, True), rhs, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.log(np.diag(self.chol)).sum())


@dataclass(frozen=True)
class LikelihoodDerivs:
    """Log-likelihood value and its (1/n)-scaled partials."""

    value: float
    n: int
    L_i: np.ndarray
    L_ij: Optional[np.ndarray] = None
    L_ijk: Optional[np.ndarray] = None


@dataclass(frozen=True)
class TraceQuantities:
    """``(1/2n) Tr(...)`` products of ``Sigma^{-1}`` with covariance derivatives.

    ``Gammap[k, i, j] = (1/2n) Tr(S^-1 d_k S S^-1 d_ij S)``,
    ``Tp[k, i, j] = (1/2n) Tr(S^-1 d_k S S^-1 d_i S S^-1 d_j S)``,
    ``Np[k, i, j] = (1/2n) Tr(S^-1 d_kij S)``.
    """

    n: int
    theta: np.ndarray
    Jp: np.ndarray
    h: np.ndarray
    Gammap: np.ndarray
    Tp: np.ndarray
    Np: np.ndarray


@dataclass(frozen=True)
class ExpectedDerivs:
    """Expectations of log-likelihood derivatives at the true parameter.

    ``n_m_ij_k`` holds ``n * m_{ij,k}`` (the raw quantity is O(1/n)).
    """

    n: int
    m_ij: np.ndarray
    m_inv: np.ndarray
    m_ijk: np.ndarray
    n_m_ij_k: np.ndarray

    @property
    def m_ij_k(self) -> np.ndarray:
        return self.n_m_ij_k / self.n


# covariance construction ---------------------------------------------------

def covariance_matrix(model: SpectralModel, theta, n: int) -> ToeplitzCov:
    if n < 1:
        raise ValueError("n must be >= 1")
    th = coerce_theta(model, theta)
    return ToeplitzCov(model.autocovariances(th, n - 1))


@functools.lru_cache(maxsize=64)
def _cached_cov(model: SpectralModel, theta_key: tuple, n: int) -> ToeplitzCov:
    return covariance_matrix(model, np.array(theta_key), n)


def derivative_matrices(model: SpectralModel, theta, n: int, order: int) -> list:
    """Toeplitz matrices of autocovariance partials: ``[Sigma, d_i, d_ij, d_ijk]``."""
    parts = model.autocovariance_partials(theta, n - 1, order)
    return [_toeplitz_stack(p) for p in parts]


def _toeplitz_stack(g: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    idx = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    return g[..., idx]


# generic Gaussian core ------------------------------------------------------

def _solve_stack(cov: ToeplitzCov, mats: np.ndarray) -> np.ndarray:
    """``Sigma^{-1} M`` for every matrix in a symmetric stack (sorted entries only)."""
    k = mats.shape[0]
    order = mats.ndim - 2
    return symmetric_fill(k, order, lambda idx: cov.solve(mats[idx]))


def _trace_prod(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.einsum("st,ts->", a, b))


def _traces(cov: ToeplitzCov, dmats: list, order: int) -> dict:
    """Raw traces needed by the log-det partials and by the trace quantities."""
    k = dmats[1].shape[0]
    A1 = _solve_stack(cov, dmats[1])
    out = {"A1": A1, "tr1": np.array([np.trace(A1[i]) for i in range(k)])}
    if order >= 2:
        A2 = _solve_stack(cov, dmats[2])
        out["A2"] = A2
        out["tr11"] = symmetric_fill(k, 2, lambda ij: _trace_prod(A1[ij[0]], A1[ij[1]]))
        out["tr2"] = symmetric_fill(k, 2, lambda ij: np.trace(A2[ij]))
    if order >= 3:
        A3 = _solve_stack(cov, dmats[3])
        out["tr3"] = symmetric_fill(k, 3, lambda idx: np.trace(A3[idx]))
        # Tr(A_k A_ij): first index is the single derivative, not symmetric overall
        out["tr12"] = np.einsum("kst,ijts->kij", A1, A2)
        pair = {}
        for i, j in itertools.combinations_with_replacement(range(k), 2):
            pair[i, j] = A1[i] @ A1[j]
        out["tr111"] = symmetric_fill(
            k, 3, lambda idx: _trace_prod(pair[idx[0], idx[1]], A1[idx[2]]))
    return out


def _quadratic_partials(cov: ToeplitzCov, dmats: list, x: np.ndarray, order: int) -> list:
    """Partials of ``q(theta) = x' Sigma^{-1} x`` up to ``order``."""
    u = cov.solve(x)
    out = [float(x @ u)]
    if order == 0:
        return out
    k = dmats[1].shape[0]
    v1 = np.einsum("ist,t->is", dmats[1], u)
    out.append(-v1 @ u)
    if order == 1:
        return out
    w1 = cov.solve(v1.T).T
    v2 = np.einsum("ijst,t->ijs", dmats[2], u)
    out.append(-(v2 @ u) + 2.0 * v1 @ w1.T)
    if order == 2:
        return out
    v3u = np.einsum("ijkst,s,t->ijk", dmats[3], u, u)
    # u' S_ij S^-1 S_k u  ->  v2[i,j] . w1[k]
    mix = np.einsum("ijs,ks->ijk", v2, w1)
    # w_a' S_m w_b for the middle index m
    mid = np.einsum("as,mst,bt->amb", w1, dmats[1], w1)

    def entry(idx):
        i, j, kk = idx
        return (
            -v3u[i, j, kk]
            + 2.0 * (mix[i, j, kk] + mix[i, kk, j] + mix[j, kk, i])
            - 2.0 * (mid[j, i, kk] + mid[i, j, kk] + mid[i, kk, j])
        )

    out.append(symmetric_fill(k, 3, entry))
    return out


def _gaussian_partials(cov: ToeplitzCov, dmats: list, x: np.ndarray, order: int):
    """Value and raw partials of ``-1/2 q - 1/2 log det Sigma``."""
    q = _quadratic_partials(cov, dmats, x, order)
    value = -0.5 * q[0] - 0.5 * cov.logdet()
    if order == 0:
        return value, []
    tr = _traces(cov, dmats, order)
    d = [tr["tr1"]]
    if order >= 2:
        d.append(tr["tr2"] - tr["tr11"])
    if order >= 3:
        t12 = tr["tr12"]
        d.append(
            tr["tr3"]
            - (t12 + np.einsum("kij->ikj", t12) + np.einsum("kij->ijk", t12))
            + 2.0 * tr["tr111"]
        )
    return value, [-0.5 * (q[r] + d[r - 1]) for r in range(1, order + 1)]


# fast exact route for pure AR -----------------------------------------------

def _use_ar_route(model, n: int) -> bool:
    return isinstance(model, ARMAModel) and model.q == 0 and n > model.p


def _ar_partials(model: ARMAModel, theta, x: np.ndarray, order: int):
    p, k, n = model.p, model.k, len(x)
    a, _, s2 = model.split(theta)
    value = 0.0
    raw = [np.zeros((k,) * r) for r in range(1, order + 1)]
    if p > 0:
        dm = [_toeplitz_stack(g) for g in model.autocovariance_partials(theta, p - 1, order)]
        cov = ToeplitzCov(dm[0][0])
        v0, r0 = _gaussian_partials(cov, dm, x[:p], order)
        value += v0
        raw = [r + rr for r, rr in zip(raw, r0)]
    # conditional innovations: R(a) = sum_t (x_t - sum_j a_j x_{t-j})^2
    lagged = np.stack([x[p - j: n - j] for j in range(1, p + 1)]) if p else np.zeros((0, n))
    y = x[p:]
    resid = y - a @ lagged if p else y
    R = float(resid @ resid)
    R1 = -2.0 * lagged @ resid
    R2 = 2.0 * lagged @ lagged.T
    nn = n - p

    def deriv_R(aidx):
        if len(aidx) == 0:
            return R
        if len(aidx) == 1:
            return R1[aidx[0]]
        if len(aidx) == 2:
            return R2[aidx[0], aidx[1]]
        return 0.0

    if model.sigma_free:
        es = np.exp(-np.log(s2))
        value += -0.5 * es * R - 0.5 * nn * np.log(s2)

        def entry(idx):
            m = sum(1 for i in idx if i == k - 1)
            aidx = tuple(i for i in idx if i < p)
            val = -0.5 * (-1.0) ** m * es * deriv_R(aidx)
            if m == 1 and not aidx:
                val -= 0.5 * nn
            return val
    else:
        value += -0.5 * R / s2 - 0.5 * nn * np.log(s2)

        def entry(idx):
            return -0.5 * deriv_R(idx) / s2

    for r in range(1, order + 1):
        raw[r - 1] = raw[r - 1] + symmetric_fill(k, r, entry)
    return value, raw


# public operations -----------------------------------------------------------

def _route(model, n, method):
    if method == "auto":
        return "ar" if _use_ar_route(model, n) else "toeplitz"
    if method == "ar" and not _use_ar_route(model, n):
        raise ValueError("AR route needs a pure AR model with n > p")
    if method not in ("ar", "toeplitz"):
        raise ValueError(f"unknown method {method!r}")
    return method


def log_likelihood(model: SpectralModel, theta, x, full: bool = False,
                   method: str = "auto") -> float:
    """``l_n(theta)``; ``full=True`` adds ``-n/2 log 2 pi`` to give the exact log density."""
    x = np.asarray(x, dtype=float)
    th = coerce_theta(model, theta)
    n = len(x)
    if _route(model, n, method) == "ar":
        value, _ = _ar_partials(model, th, x, 0)
    else:
        cov = covariance_matrix(model, th, n)
        u = cov.solve(x)
        value = -0.5 * float(x @ u) - 0.5 * cov.logdet()
    return value - 0.5 * n * LOG_2PI if full else value


def log_likelihood_partials(model: SpectralModel, theta, x, max_order: int = 2,
                            method: str = "auto") -> LikelihoodDerivs:
    """Value and ``(1/n)``-scaled partials of ``l_n`` up to ``max_order``."""
    if not 1 <= max_order <= 3:
        raise OrderUnsupported(f"max_order must be 1..3, got {max_order}")
    x = np.asarray(x, dtype=float)
    th = coerce_theta(model, theta)
    n = len(x)
    if _route(model, n, method) == "ar":
        value, raw = _ar_partials(model, th, x, max_order)
    else:
        dm = derivative_matrices(model, th, n, max_order)
        cov = ToeplitzCov(dm[0][0])
        value, raw = _gaussian_partials(cov, dm, x, max_order)
    scaled = [r / n for r in raw] + [None] * (3 - len(raw))
    return LikelihoodDerivs(value, n, scaled[0], scaled[1], scaled[2])


def replication_rng(seed: int, replication: int = 0) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by ``(seed, replication)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(replication)])
    return np.random.Generator(np.random.Philox(ss))


def sample_path(model: SpectralModel, theta, n: int, seed: int,
                replication: int = 0) -> np.ndarray:
    """Exact draw from N(0, Sigma_n(theta)); deterministic in ``(seed, replication)``."""
    th = coerce_theta(model, theta)
    cov = _cached_cov(model, tuple(float(t) for t in th), int(n))
    z = replication_rng(seed, replication).standard_normal(n)
    return cov.chol @ z


def trace_quantities(model: SpectralModel, theta, n: int) -> TraceQuantities:
    """J', h, Gamma', T', N' at ``(theta, n)``, each carrying the ``1/(2n)`` factor."""
    if n < 2:
        raise ValueError("n must be >= 2")
    th = coerce_theta(model, theta)
    dm = derivative_matrices(model, th, n, 3)
    cov = ToeplitzCov(dm[0][0])
    tr = _traces(cov, dm, 3)
    c = 1.0 / (2.0 * n)
    return TraceQuantities(
        n=n,
        theta=th,
        Jp=c * tr["tr11"],
        h=c * tr["tr2"],
        Gammap=c * tr["tr12"],
        Tp=c * tr["tr111"],
        Np=c * tr["tr3"],
    )


def expected_derivatives(trace: TraceQuantities) -> ExpectedDerivs:
    Jp, Gp, Tp = trace.Jp, trace.Gammap, trace.Tp
    m_ij = -Jp
    try:
        m_inv = np.linalg.inv(m_ij)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("m_ij is singular") from exc
    if not np.all(np.isfinite(m_inv)) or np.linalg.cond(m_ij) > 1e12:
        raise SingularMatrix("m_ij is numerically singular")
    T_sym = Tp + np.einsum("ijk->jik", Tp)
    m_ijk = 2.0 * T_sym - (Gp + np.einsum("ijk->jik", Gp) + np.einsum("kij->ijk", Gp))
    n_m_ij_k = np.einsum("kij->ijk", Gp) - T_sym
    return ExpectedDerivs(trace.n, m_ij, m_inv, m_ijk, n_m_ij_k)


def expected_hessian(model: SpectralModel, theta, n: int, theta0=None) -> np.ndarray:
    """``E_{theta0}[L_ij(theta)]`` in closed form (``theta0`` defaults to ``theta``).

    ``(1/n)(-1/2 Tr(Sigma0 d_ij Sigma^{-1}) - 1/2 d_ij log det Sigma)``, computed
    without the trace-product shortcuts used by :func:`trace_quantities`.
    """
    th = coerce_theta(model, theta)
    th0 = th if theta0 is None else coerce_theta(model, theta0)
    cov0 = covariance_matrix(model, th0, n).matrix
    dm = derivative_matrices(model, th, n, 2)
    cov = ToeplitzCov(dm[0][0])
    A1 = _solve_stack(cov, dm[1])
    A2 = _solve_stack(cov, dm[2])
    B = cov.solve(cov0)  # Sigma^{-1} Sigma0

    def entry(ij):
        i, j = ij
        # d_ij of Sigma^{-1} = S^-1(S_i S^-1 S_j + S_j S^-1 S_i - S_ij) S^-1
        quad = _trace_prod(A1[i] @ A1[j] + A1[j] @ A1[i] - A2[i, j], B)
        logdet = np.trace(A2[i, j]) - _trace_prod(A1[i], A1[j])
        return (-0.5 * quad - 0.5 * logdet) / n

    return symmetric_fill(model.k, 2, entry)


def expected_derivatives_direct(model: SpectralModel, theta0, n: int, step: float = 1e-5):
    """Independent check of ``m_ijk`` by central differences of :func:`expected_hessian`.

    Differentiating ``E_{theta0}[L_ij(theta)]`` in theta at theta0 gives the
    third-order expectation without the trace algebra.
    """
    th0 = coerce_theta(model, theta0)
    k = model.k
    out = np.zeros((k, k, k))
    for m in range(k):
        e = np.zeros(k)
        e[m] = step
        out[:, :, m] = (expected_hessian(model, th0 + e, n, th0)
                        - expected_hessian(model, th0 - e, n, th0)) / (2 * step)
    return out

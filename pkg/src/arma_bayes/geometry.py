"""Spectral information geometry: metric, connections, skewness, Laplacian.

Tensor index conventions (all arrays indexed in the written order)::

    g[i, j]        = int dw/4pi  dl_i dl_j
    Gm[i, j, k]    = int dw/4pi  dl_i  (d_jk S / S)          mixture connection
    M[i, j, k, l]  = int dw/4pi  dl_i  (d_jkl S / S)
    N[i, j, k, l]  = int dw/4pi  (d_ij S / S)(d_kl S / S)
    T[i, j, k]     = int dw/2pi  dl_i dl_j dl_k              note the 2 pi
    Lt[i, j, k, l] = int dw/4pi  dl_i dl_j (d_kl S / S)
    eG             = Gm - T                                   exponential connection

with ``dl_i = d_i log S``.  The first index of a connection is the lowered one.
"""
from __future__ import annotations

import warnings
from functools import partial
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import QuadratureNotConverged, SingularMatrix, StencilOutOfDomain
from .model import TWO_PI, SpectralModel, coerce_theta, log_partials_to_ratios


@dataclass(frozen=True)
class QuadConfig:
    """Periodic trapezoid settings on [-pi, pi)."""

    nodes: int = 512
    tol: float = 1e-8
    max_nodes: int = 1 << 15
    adaptive: bool = True


def omega_grid(nodes: int) -> np.ndarray:
    return -np.pi + TWO_PI * np.arange(nodes) / nodes


@dataclass(frozen=True)
class GeometryTensors:
    theta: np.ndarray
    g: np.ndarray
    g_inv: np.ndarray
    Gm: np.ndarray
    eG: np.ndarray
    T: np.ndarray
    T_i: np.ndarray
    M: np.ndarray
    N: np.ndarray
    Lt: np.ndarray
    nodes: int = 0

    @property
    def k(self) -> int:
        return len(self.theta)

    def Gm_contracted(self) -> np.ndarray:
        """``Gamma^(m)k_{ij} g^{ij}`` as a vector in k (upper index)."""
        return np.einsum("kl,lij,ij->k", self.g_inv, self.Gm, self.g_inv)

    def eG_trace(self) -> np.ndarray:
        """``eGamma_{ij}^{j} = g^{jl} eGamma_{l,ij}`` as a vector in i."""
        return np.einsum("jl,lij->i", self.g_inv, self.eG)


def _integrands(model, theta, omega, order=3):
    ratios = log_partials_to_ratios(model.log_spectral_partials(theta, omega, order))
    return ratios[1:]


def _tensor_sums(D1, D2, D3, weights):
    """Weighted sums over frequency giving (g, Gm, M, N, T, Lt)."""
    w = weights
    g = np.einsum("iw,jw,w->ij", D1, D1, w)
    Gm = np.einsum("iw,jkw,w->ijk", D1, D2, w)
    M = np.einsum("iw,jklw,w->ijkl", D1, D3, w)
    N = np.einsum("ijw,klw,w->ijkl", D2, D2, w)
    T = 2.0 * np.einsum("iw,jw,kw,w->ijk", D1, D1, D1, w)
    Lt = np.einsum("iw,jw,klw,w->ijkl", D1, D1, D2, w)
    return g, Gm, M, N, T, Lt


def _tensors_trapezoid(model, theta, nodes):
    omega = omega_grid(nodes)
    D1, D2, D3 = _integrands(model, theta, omega)
    weights = np.full(nodes, 1.0 / (2.0 * nodes))  # (2pi/N) / 4pi
    return _tensor_sums(D1, D2, D3, weights)


def _tensors_adaptive(model, theta, tol):
    """Gauss-Kronrod fallback for sharply peaked integrands."""
    k = len(theta)
    shapes = [(k, k), (k, k, k), (k,) * 4, (k,) * 4, (k, k, k), (k,) * 4]
    sizes = [int(np.prod(s)) for s in shapes]

    def fn(w):
        D1, D2, D3 = _integrands(model, theta, np.array([w]))
        parts = _tensor_sums(D1, D2, D3, np.array([1.0 / (4.0 * np.pi)]))
        return np.concatenate([p.ravel() for p in parts])

    val, err = integrate.quad_vec(fn, -np.pi, np.pi, epsabs=tol, epsrel=0.0, limit=2000)
    if err > tol:
        raise QuadratureNotConverged(f"adaptive quadrature error {err:.3g} > {tol:.3g}")
    out, pos = [], 0
    for shape, size in zip(shapes, sizes):
        out.append(val[pos: pos + size].reshape(shape))
        pos += size
    return tuple(out)


def converged_nodes(model: SpectralModel, theta, quad: QuadConfig = QuadConfig()) -> int:
    """Smallest doubling of ``quad.nodes`` whose metric is stable to ``quad.tol``."""
    th = coerce_theta(model, theta)
    nodes = quad.nodes
    prev = _tensors_trapezoid(model, th, nodes)
    while nodes < quad.max_nodes:
        cur = _tensors_trapezoid(model, th, 2 * nodes)
        if max(np.abs(a - b).max() for a, b in zip(prev, cur)) < quad.tol:
            return nodes
        nodes, prev = 2 * nodes, cur
    raise QuadratureNotConverged(f"no convergence up to {quad.max_nodes} nodes")


def geometry_at(model: SpectralModel, theta, quad: QuadConfig = QuadConfig()) -> GeometryTensors:
    """All geometric tensors at ``theta`` by periodic trapezoid quadrature.

    With ``quad.adaptive`` the node count doubles until every entry moves by
    less than ``quad.tol``; if that never happens an adaptive Gauss-Kronrod rule
    takes over.
    """
    th = coerce_theta(model, theta)
    nodes = quad.nodes
    parts = _tensors_trapezoid(model, th, nodes)
    if quad.adaptive:
        while True:
            if 2 * nodes > quad.max_nodes:
                warnings.warn("trapezoid refinement exhausted; using adaptive quadrature")
                parts = _tensors_adaptive(model, th, quad.tol)
                nodes = 0
                break
            finer = _tensors_trapezoid(model, th, 2 * nodes)
            delta = max(np.abs(a - b).max() for a, b in zip(parts, finer))
            parts, nodes = finer, 2 * nodes
            if delta < quad.tol:
                break
    g, Gm, M, N, T, Lt = parts
    if not np.all(np.isfinite(g)) or np.linalg.cond(g) > 1e12:
        raise SingularMatrix(f"metric is singular at {th} (non-identifiable parameters?)")
    g_inv = np.linalg.inv(g)
    return GeometryTensors(
        theta=th, g=g, g_inv=g_inv, Gm=Gm, eG=Gm - T, T=T,
        T_i=np.einsum("ijk,jk->i", T, g_inv), M=M, N=N, Lt=Lt, nodes=nodes,
    )


def metric_at(model: SpectralModel, theta, nodes: int = 512) -> np.ndarray:
    """Metric alone at a fixed node count (cheap, smooth in theta)."""
    th = coerce_theta(model, theta)
    omega = omega_grid(nodes)
    D1 = model.log_spectral_partials(th, omega, 1)[1]
    return np.einsum("iw,jw->ij", D1, D1) / (2.0 * nodes)


def model_metric(model: SpectralModel, nodes: int = 2048) -> Callable[[np.ndarray], np.ndarray]:
    """Metric as a function of theta, with a fixed rule so finite differences are consistent."""
    return lambda th: metric_at(model, th, nodes)


# finite differences ----------------------------------------------------------

def fd_step(theta, rel: float = 1e-4) -> np.ndarray:
    return rel * (1.0 + np.abs(np.asarray(theta, dtype=float)))


def _check_stencil(domain, points):
    if domain is None:
        return
    for pt in points:
        if not domain(pt):
            raise StencilOutOfDomain(f"stencil point {np.round(pt, 8)} outside the domain")


def central_gradient(fn, theta, step=None, domain=None) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    step = fd_step(th) if step is None else np.broadcast_to(step, th.shape)
    out = np.zeros(th.size)
    for i in range(th.size):
        e = np.zeros(th.size)
        e[i] = step[i]
        _check_stencil(domain, (th + e, th - e))
        out[i] = (fn(th + e) - fn(th - e)) / (2.0 * step[i])
    return out


def directional_derivative(fn, theta, i: int, h: float, domain=None) -> float:
    """Five-point central difference of ``fn`` along coordinate ``i`` (error O(h^4))."""
    th = np.asarray(theta, dtype=float)
    e = np.zeros(th.size)
    e[i] = h
    _check_stencil(domain, (th + 2 * e, th + e, th - e, th - 2 * e))
    return float((8.0 * (fn(th + e) - fn(th - e)) - (fn(th + 2 * e) - fn(th - 2 * e)))
                 / (12.0 * h))


# scalar fields and priors ----------------------------------------------------

@dataclass(frozen=True)
class ScalarField:
    """Positive (or arbitrary) scalar function on the parameter space."""

    value: Callable[[np.ndarray], float]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def __call__(self, theta) -> float:
        return float(self.value(np.asarray(theta, dtype=float)))

    def gradient(self, theta, domain=None) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(th), dtype=float)
        return central_gradient(self.value, th, domain=domain)

    def log_gradient(self, theta, domain=None) -> np.ndarray:
        return self.gradient(theta, domain) / self(theta)


def _const_value(c, th):
    return c


def _const_grad(th):
    return np.zeros(np.size(th))


def constant_field(c: float = 1.0) -> ScalarField:
    return ScalarField(partial(_const_value, float(c)), _const_grad, name=f"const({c:g})")


def log_jeffreys(model: SpectralModel, theta, nodes: int = 2048) -> float:
    """``log sqrt(det g)``, the unnormalised log Jeffreys density."""
    sign, logdet = np.linalg.slogdet(metric_at(model, theta, nodes))
    return 0.5 * logdet


def jeffreys_log_gradient(model: SpectralModel, theta, quad: QuadConfig = QuadConfig(),
                          route: str = "tensor", geom: Optional[GeometryTensors] = None):
    """Gradient of ``log pi_J``.

    ``route="tensor"`` uses ``eGamma_{ij}^j + T_i / 2``; ``route="fd"`` takes
    central differences of ``log sqrt(det g)``.
    """
    th = coerce_theta(model, theta)
    if route == "tensor":
        geom = geometry_at(model, th, quad) if geom is None else geom
        return geom.eG_trace() + 0.5 * geom.T_i
    if route == "fd":
        nodes = converged_nodes(model, th, quad)
        return central_gradient(lambda t: log_jeffreys(model, t, 2 * nodes), th,
                                domain=model.is_valid)
    raise ValueError(f"unknown route {route!r}")


@dataclass(frozen=True)
class PriorSpec:
    """Prior density on the parameter space.

    kind:
      ``jeffreys``          pi_J = sqrt(det g)
      ``jeffreys_times_h``  pi_J * h for a positive scalar field h
      ``custom``            user log-density and its gradient
    """

    kind: str = "jeffreys"
    h: Optional[ScalarField] = None
    log_density_fn: Optional[Callable] = None
    log_density_grad_fn: Optional[Callable] = None
    description: str = ""

    def __post_init__(self):
        if self.kind not in ("jeffreys", "jeffreys_times_h", "custom"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "jeffreys_times_h" and self.h is None:
            raise ValueError("jeffreys_times_h needs h")
        if self.kind == "custom" and self.log_density_fn is None:
            raise ValueError("custom prior needs log_density_fn")

    @property
    def label(self) -> str:
        if self.description:
            return self.description
        if self.kind == "jeffreys_times_h":
            return f"jeffreys*{self.h.name or 'h'}"
        return self.kind

    def log_density(self, model, theta, nodes: int = 2048) -> float:
        if self.kind == "custom":
            return float(self.log_density_fn(np.asarray(theta, dtype=float)))
        out = log_jeffreys(model, theta, nodes)
        if self.kind == "jeffreys_times_h":
            out += np.log(self.h(theta))
        return out

    def log_ratio_gradient(self, model, theta, quad: QuadConfig = QuadConfig(),
                           geom: Optional[GeometryTensors] = None) -> np.ndarray:
        """Gradient of ``log(f / pi_J)``."""
        th = np.asarray(theta, dtype=float)
        if self.kind == "jeffreys":
            return np.zeros(th.size)
        if self.kind == "jeffreys_times_h":
            return self.h.log_gradient(th, domain=model.is_valid)
        return self.log_density_gradient(model, th, quad, geom) - jeffreys_log_gradient(
            model, th, quad, geom=geom)

    def log_density_gradient(self, model, theta, quad: QuadConfig = QuadConfig(),
                             geom: Optional[GeometryTensors] = None) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        if self.kind == "custom":
            if self.log_density_grad_fn is not None:
                return np.asarray(self.log_density_grad_fn(th), dtype=float)
            return central_gradient(self.log_density_fn, th, domain=model.is_valid)
        return jeffreys_log_gradient(model, th, quad, geom=geom) + self.log_ratio_gradient(
            model, th, quad, geom)

    def F(self, model, theta, geom: GeometryTensors, quad: QuadConfig = QuadConfig()):
        """``F_j = d_j log(f / pi_J) + T_j / 2``."""
        return self.log_ratio_gradient(model, theta, quad, geom) + 0.5 * geom.T_i


JEFFREYS = PriorSpec("jeffreys")


def jeffreys_times(h: ScalarField, description: str = "") -> PriorSpec:
    return PriorSpec("jeffreys_times_h", h=h, description=description)


# Laplace-Beltrami --------------------------------------------------------------

def laplace_beltrami(phi, theta, metric: Callable[[np.ndarray], np.ndarray],
                     step=None, domain: Optional[Callable] = None) -> float:
    """``(1/sqrt g) d_i (sqrt g g^{ij} d_j phi)`` with five-point outer differences.

    ``phi`` is a :class:`ScalarField` (analytic gradient used when present) or a
    plain callable.  ``domain`` rejects stencils leaving the valid region.
    """
    field_ = phi if isinstance(phi, ScalarField) else ScalarField(phi)
    th = np.asarray(theta, dtype=float)
    step = fd_step(th) if step is None else np.broadcast_to(np.asarray(step, float), th.shape)

    def flux(t):
        g = metric(t)
        sqrt_det = np.sqrt(np.linalg.det(g))
        return sqrt_det * np.linalg.solve(g, field_.gradient(t, domain=domain))

    total = 0.0
    for i in range(th.size):
        total += directional_derivative(lambda t: flux(t)[i], th, i, step[i], domain)
    return float(total / np.sqrt(np.linalg.det(metric(th))))


@dataclass
class SuperharmonicReport:
    verdict: bool
    positive: bool
    min_margin: float
    worst_node: np.ndarray
    max_laplacian: float
    min_h: float
    tol_super: float
    nodes: np.ndarray = field(repr=False)
    laplacians: np.ndarray = field(repr=False)
    h_values: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "verdict": "pass" if self.verdict else "fail",
            "positive": bool(self.positive),
            "min_margin": float(self.min_margin),
            "worst_node": [float(v) for v in self.worst_node],
            "max_laplacian": float(self.max_laplacian),
            "min_h": float(self.min_h),
            "tol_super": float(self.tol_super),
            "n_nodes": int(len(self.nodes)),
        }


def check_superharmonic(h, region, metric: Callable, tol_super: float = 1e-8,
                        domain: Optional[Callable] = None) -> SuperharmonicReport:
    """Evaluate ``Delta h`` and ``h`` on every node of ``region`` (shape (m, k)).

    Passes iff ``h > 0`` and ``Delta h <= tol_super`` at every node.  The margin
    reported per node is ``-Delta h`` so a positive minimum margin means strict
    superharmonicity on the grid.
    """
    field_ = h if isinstance(h, ScalarField) else ScalarField(h)
    nodes = np.atleast_2d(np.asarray(region, dtype=float))
    lap = np.array([laplace_beltrami(field_, t, metric, domain=domain) for t in nodes])
    vals = np.array([field_(t) for t in nodes])
    worst = int(np.argmax(lap))
    positive = bool(np.all(vals > 0))
    return SuperharmonicReport(
        verdict=positive and bool(np.all(lap <= tol_super)),
        positive=positive,
        min_margin=float(-lap[worst]),
        worst_node=nodes[worst],
        max_laplacian=float(lap[worst]),
        min_h=float(vals.min()),
        tol_super=tol_super,
        nodes=nodes,
        laplacians=lap,
        h_values=vals,
    )

"""ARMA spectral densities, their parameter derivatives and autocovariances.

Convention used throughout the package::

    S(w | theta) = sigma^2 / (2 pi) * |1 + sum_j b_j e^{-ijw}|^2 / |1 - sum_j a_j e^{-ijw}|^2
    gamma(h)     = int_{-pi}^{pi} e^{ihw} S(w | theta) dw

so that the Toeplitz covariance of a length-n sample has entries gamma(|s - t|).
Parameter coordinates are ordered ``(a_1..a_p, b_1..b_q[, log sigma^2])``.

Derivatives in theta are analytic: the log-spectrum splits into a
log|MA|^2 part, a log|AR|^2 part and the variance term, and each part is a
log of a quadratic form in its own coefficients.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidParameter,
    NonInvertible,
    NonStationary,
    OrderUnsupported,
)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ThetaVector:
    """A point of the parameter manifold together with its validation flag."""

    coords: np.ndarray
    validated: bool = False

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coords, dtype=dtype)

    def __len__(self):
        return len(self.coords)


@dataclass(frozen=True)
class SpectralEval:
    """S and its theta-partials; trailing axis runs over frequencies."""

    value: np.ndarray
    grad: np.ndarray
    hess: Optional[np.ndarray] = None
    third: Optional[np.ndarray] = None


def as_coords(theta) -> np.ndarray:
    return np.atleast_1d(np.asarray(theta, dtype=float))


def symmetric_fill(k: int, order: int, compute) -> np.ndarray:
    """Build a fully symmetric ``order``-tensor from its sorted-index entries.

    ``compute(idx)`` receives a sorted index tuple and returns an array (the
    trailing shape is taken from the first result).
    """
    out = None
    for idx in itertools.combinations_with_replacement(range(k), order):
        val = np.asarray(compute(idx))
        if out is None:
            out = np.zeros((k,) * order + val.shape)
        for perm in set(itertools.permutations(idx)):
            out[perm] = val
    return out


def log_partials_to_ratios(lp):
    """Turn partials of log S into the ratios d^r S / S.

    ``lp`` is ``[log S, l_i, l_ij, l_ijk]`` (any prefix).  Returns a list of the
    same length: ``[S, dS/S, d2S/S, d3S/S]``.
    """
    out = [np.exp(lp[0])]
    if len(lp) > 1:
        l1 = lp[1]
        out.append(l1)
    if len(lp) > 2:
        l2 = lp[2]
        out.append(l2 + np.einsum("i...,j...->ij...", l1, l1))
    if len(lp) > 3:
        l3 = lp[3]
        cross = np.einsum("ij...,k...->ijk...", l2, l1)
        d3 = (
            l3
            + cross
            + np.einsum("ijk...->ikj...", cross)
            + np.einsum("ijk...->kji...", cross)
            + np.einsum("i...,j...,k...->ijk...", l1, l1, l1)
        )
        out.append(d3)
    return out


class SpectralModel:
    """Common machinery for parametric spectral families.

    Subclasses implement ``k``, ``check``, ``log_spectral_partials`` and
    ``autocovariance_partials``.
    """

    k: int
    coord_names: tuple

    def check(self, theta) -> np.ndarray:
        raise NotImplementedError

    def is_valid(self, theta) -> bool:
        try:
            self.check(theta)
        except InvalidParameter:
            return False
        return True

    def validate(self, theta) -> ThetaVector:
        return ThetaVector(self.check(theta), validated=True)

    def log_spectral_partials(self, theta, omega, order: int = 0) -> list:
        raise NotImplementedError

    def autocovariance_partials(self, theta, max_lag: int, order: int = 0) -> list:
        raise NotImplementedError

    # derived quantities -------------------------------------------------

    def spectral_density(self, theta, omega):
        omega = np.asarray(omega, dtype=float)
        return np.exp(self.log_spectral_partials(theta, omega, 0)[0])

    def spectral_partials(self, theta, omega, max_order: int = 1) -> SpectralEval:
        if not 1 <= max_order <= 3:
            raise OrderUnsupported(f"max_order must be 1..3, got {max_order}")
        lp = self.log_spectral_partials(theta, np.asarray(omega, dtype=float), max_order)
        ratios = log_partials_to_ratios(lp)
        s = ratios[0]
        derivs = [r * s for r in ratios[1:]]
        derivs += [None] * (3 - len(derivs))
        return SpectralEval(s, derivs[0], derivs[1], derivs[2])

    def autocovariances(self, theta, max_lag: int) -> np.ndarray:
        return self.autocovariance_partials(theta, max_lag, 0)[0]

    def autocovariances_quadrature(self, theta, max_lag: int, order: int = 0,
                                   nodes: Optional[int] = None) -> list:
        """Autocovariances (and their theta-partials) by periodic trapezoid rule.

        The rule is evaluated with an FFT; ``nodes`` defaults to a power of two
        large enough that aliasing from lags beyond ``nodes - max_lag`` is
        negligible for parameters away from the region boundary.
        """
        if nodes is None:
            nodes = max(4096, 1 << int(np.ceil(np.log2(4 * (max_lag + 1)))))
        if nodes <= 2 * max_lag:
            raise ValueError("nodes must exceed twice max_lag")
        omega = -np.pi + TWO_PI * np.arange(nodes) / nodes
        ratios = log_partials_to_ratios(self.log_spectral_partials(theta, omega, order))
        s = ratios[0]
        sign = np.where(np.arange(max_lag + 1) % 2 == 0, 1.0, -1.0)
        out = []
        for r, ratio in enumerate(ratios):
            field = s if r == 0 else ratio * s
            coef = TWO_PI * np.fft.ifft(field, axis=-1).real[..., : max_lag + 1]
            out.append(coef * sign)
        return out


def _roots_inside(coeffs: np.ndarray) -> np.ndarray:
    """Moduli of the inverse roots of ``1 + c_1 z + ... + c_m z^m``."""
    if len(coeffs) == 0:
        return np.zeros(0)
    return np.abs(np.roots(np.r_[1.0, coeffs]))


def _log_quadratic_partials(coef: np.ndarray, omega: np.ndarray, sign: float, order: int):
    """Partials of ``log |sum_j c_j e^{-ijw}|^2`` with ``c = (1, sign * x)``.

    Returns ``[value, d_m, d_mr, d_mrt]`` with respect to the free coefficients
    ``x_1..x_m`` (first axes), frequencies on the last axis.
    """
    m = len(coef) - 1
    lags = np.arange(m + 1)
    diff = lags[:, None] - lags[None, :]
    cosd = np.cos(diff[..., None] * omega)  # (m+1, m+1, nw)
    R = np.einsum("j,l,jlw->w", coef, coef, cosd)
    out = [np.log(R)]
    if order == 0:
        return out
    R1 = sign * 2.0 * np.einsum("l,mlw->mw", coef, cosd)[1:]
    R2 = 2.0 * cosd[1:, 1:]
    out.append(R1 / R)
    if order >= 2:
        out.append(R2 / R - np.einsum("mw,rw->mrw", R1, R1) / R**2)
    if order >= 3:
        t = np.einsum("mrw,tw->mrtw", R2, R1)
        out.append(
            -(t + np.einsum("mrtw->mtrw", t) + np.einsum("mrtw->trmw", t)) / R**2
            + 2.0 * np.einsum("mw,rw,tw->mrtw", R1, R1, R1) / R**3
        )
    return out


def _shift_fold(c: np.ndarray, lag: int, length: int) -> np.ndarray:
    """``out[h] = c[|h - lag|]`` for ``h < length``."""
    return c[..., np.abs(np.arange(length) - lag)]


class ARMAModel(SpectralModel):
    """ARMA(p, q) spectral family.

    Parameters
    ----------
    p, q : int
        AR and MA orders.
    sigma2 : float or None
        Fixed innovation variance, or ``None`` to make ``log sigma^2`` the last
        free coordinate.
    root_margin : float
        Inverse roots must satisfy ``|z| < 1 - root_margin``.
    """

    def __init__(self, p: int, q: int = 0, sigma2: Optional[float] = 1.0,
                 root_margin: float = 1e-6):
        if p < 0 or q < 0:
            raise ValueError("AR and MA orders must be non-negative")
        if sigma2 is not None and not sigma2 > 0:
            raise ValueError("fixed sigma2 must be positive")
        self.p = int(p)
        self.q = int(q)
        self.sigma2 = None if sigma2 is None else float(sigma2)
        self.root_margin = float(root_margin)
        self.k = self.p + self.q + (1 if self.sigma_free else 0)
        if self.k < 1:
            raise ValueError("model has no free parameters")
        names = [f"a{j}" for j in range(1, p + 1)] + [f"b{j}" for j in range(1, q + 1)]
        if self.sigma_free:
            names.append("log_sigma2")
        self.coord_names = tuple(names)

    @property
    def sigma_free(self) -> bool:
        return self.sigma2 is None

    def __repr__(self):
        sig = "free" if self.sigma_free else repr(self.sigma2)
        return f"ARMAModel(p={self.p}, q={self.q}, sigma2={sig})"

    def __eq__(self, other):
        return (isinstance(other, ARMAModel)
                and (self.p, self.q, self.sigma2, self.root_margin)
                == (other.p, other.q, other.sigma2, other.root_margin))

    def __hash__(self):
        return hash((ARMAModel, self.p, self.q, self.sigma2, self.root_margin))

    def split(self, theta):
        """Return ``(a, b, sigma2)`` for a coordinate vector."""
        th = as_coords(theta)
        if th.shape != (self.k,):
            raise DimensionMismatch(f"expected {self.k} coordinates, got {th.shape}")
        a = th[: self.p]
        b = th[self.p: self.p + self.q]
        s2 = float(np.exp(th[-1])) if self.sigma_free else self.sigma2
        return a, b, s2

    def check(self, theta) -> np.ndarray:
        a, b, _ = self.split(theta)
        th = as_coords(theta)
        if not np.all(np.isfinite(th)):
            raise InvalidParameter("non-finite coordinate")
        limit = 1.0 - self.root_margin
        ar = _roots_inside(-a)
        if ar.size and ar.max() >= limit:
            raise NonStationary(f"AR inverse root modulus {ar.max():.6g} >= {limit}")
        ma = _roots_inside(b)
        if ma.size and ma.max() >= limit:
            raise NonInvertible(f"MA inverse root modulus {ma.max():.6g} >= {limit}")
        return th.copy()

    def max_root_modulus(self, theta) -> float:
        a, b, _ = self.split(theta)
        moduli = np.r_[_roots_inside(-a), _roots_inside(b), 0.0]
        return float(moduli.max())

    # spectral side --------------------------------------------------------

    def log_spectral_partials(self, theta, omega, order: int = 0) -> list:
        if not 0 <= order <= 3:
            raise OrderUnsupported(f"order must be 0..3, got {order}")
        a, b, s2 = self.split(theta)
        omega = np.asarray(omega, dtype=float)
        shape = omega.shape
        w = omega.reshape(-1)
        k, p, q = self.k, self.p, self.q
        ma = _log_quadratic_partials(np.r_[1.0, b], w, 1.0, order)
        ar = _log_quadratic_partials(np.r_[1.0, -a], w, -1.0, order)
        out = [np.log(s2 / TWO_PI) + ma[0] - ar[0]]
        a_sl, b_sl = slice(0, p), slice(p, p + q)
        for r in range(1, order + 1):
            arr = np.zeros((k,) * r + (w.size,))
            arr[(a_sl,) * r] = -ar[r]
            arr[(b_sl,) * r] = ma[r]
            if self.sigma_free and r == 1:
                arr[k - 1] = 1.0
            out.append(arr)
        return [x.reshape(x.shape[:-1] + shape) for x in out]

    # autocovariance side ----------------------------------------------------

    def _ar_solve(self, a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Solve the folded Yule-Walker system ``M(a) x = rhs`` column-wise.

        Row h of M reads ``x(h) - sum_j a_j x(|h - j|)``.  Rows ``0..p`` close on
        ``x(0..p)``; later rows are a forward recursion.
        """
        p = self.p
        rhs = np.atleast_2d(rhs)
        length = rhs.shape[1]
        if p == 0:
            return rhs.copy()
        M = np.eye(p + 1)
        for h in range(p + 1):
            for j in range(1, p + 1):
                M[h, abs(h - j)] -= a[j - 1]
        x = np.zeros_like(rhs)
        x[:, : p + 1] = np.linalg.solve(M, rhs[:, : p + 1].T).T
        for h in range(p + 1, length):
            x[:, h] = rhs[:, h] + x[:, h - p: h][:, ::-1] @ a
        return x

    def _ar_kernel_partials(self, a: np.ndarray, length: int, order: int) -> dict:
        """Unit-innovation AR autocovariance and its a-partials.

        Returns a dict mapping sorted AR index tuples to lag arrays.  Since M is
        linear in a, ``M c_S = sum_{i in S} shift_i(c_{S minus i})``.
        """
        p = self.p
        out = {(): self._ar_solve(a, np.eye(1, length))[0]}
        for r in range(1, order + 1):
            keys = list(itertools.combinations_with_replacement(range(p), r))
            if not keys:
                break
            rhs = np.zeros((len(keys), length))
            for row, key in enumerate(keys):
                for pos, i in enumerate(key):
                    rest = key[:pos] + key[pos + 1:]
                    rhs[row] += _shift_fold(out[rest], i + 1, length)
            sol = self._ar_solve(a, rhs)
            for row, key in enumerate(keys):
                out[key] = sol[row]
        return out

    def autocovariance_partials(self, theta, max_lag: int, order: int = 0) -> list:
        """Exact autocovariances gamma(0..max_lag) and theta-partials up to ``order``.

        gamma(h) = sigma^2 sum_{j,l} b_j b_l c(|h + j - l|) with c the
        unit-innovation AR autocovariance; the b-dependence is bilinear.
        """
        if not 0 <= order <= 3:
            raise OrderUnsupported(f"order must be 0..3, got {order}")
        a, b, s2 = self.split(theta)
        p, q = self.p, self.q
        btil = np.r_[1.0, b]
        length = max(max_lag + q, p) + 1
        kern = self._ar_kernel_partials(a, length, order)
        h = np.arange(max_lag + 1)
        jl = np.arange(q + 1)
        fold = np.abs(h[:, None, None] + jl[None, :, None] - jl[None, None, :])

        def bform(c, bidx):
            if len(bidx) == 0:
                return np.einsum("j,l,hjl->h", btil, btil, c[fold])
            if len(bidx) == 1:
                m = bidx[0]
                up = np.abs(h[:, None] + m - jl[None, :])
                dn = np.abs(h[:, None] + jl[None, :] - m)
                return (c[up] + c[dn]) @ btil
            if len(bidx) == 2:
                m, r = bidx
                return c[np.abs(h + m - r)] + c[np.abs(h + r - m)]
            return np.zeros(max_lag + 1)

        def entry(idx):
            aidx = tuple(i for i in idx if i < p)
            bidx = tuple(i - p + 1 for i in idx if p <= i < p + q)
            return s2 * bform(kern[aidx], bidx)

        out = [entry(())]
        for r in range(1, order + 1):
            out.append(symmetric_fill(self.k, r, entry))
        return out


class ConstantSpectrumModel(SpectralModel):
    """One-parameter flat family ``S(w | theta) = theta`` (white noise, sigma^2 = 2 pi theta)."""

    k = 1
    coord_names = ("level",)

    def __repr__(self):
        return "ConstantSpectrumModel()"

    def __eq__(self, other):
        return isinstance(other, ConstantSpectrumModel)

    def __hash__(self):
        return hash(ConstantSpectrumModel)

    def check(self, theta) -> np.ndarray:
        th = as_coords(theta)
        if th.shape != (1,):
            raise DimensionMismatch(f"expected 1 coordinate, got {th.shape}")
        if not (np.isfinite(th[0]) and th[0] > 0):
            raise InvalidParameter("spectral level must be positive")
        return th.copy()

    def log_spectral_partials(self, theta, omega, order: int = 0) -> list:
        if not 0 <= order <= 3:
            raise OrderUnsupported(f"order must be 0..3, got {order}")
        t = float(self.check(theta)[0])
        ones = np.ones_like(np.asarray(omega, dtype=float))
        vals = [np.log(t), 1.0 / t, -1.0 / t**2, 2.0 / t**3]
        return [vals[0] * ones] + [
            np.full((1,) * r + ones.shape, vals[r]) for r in range(1, order + 1)
        ]

    def autocovariance_partials(self, theta, max_lag: int, order: int = 0) -> list:
        if not 0 <= order <= 3:
            raise OrderUnsupported(f"order must be 0..3, got {order}")
        t = float(self.check(theta)[0])
        gam = np.zeros(max_lag + 1)
        gam[0] = TWO_PI * t
        out = [gam]
        for r in range(1, order + 1):
            d = np.zeros((1,) * r + (max_lag + 1,))
            if r == 1:
                d[0, 0] = TWO_PI
            out.append(d)
        return out


# module-level operations ---------------------------------------------------

def validate_params(model: SpectralModel, theta) -> ThetaVector:
    """Validate a coordinate vector; raises NonStationary/NonInvertible/DimensionMismatch."""
    return model.validate(theta)


def spectral_density(model: SpectralModel, theta, omega):
    return model.spectral_density(theta, omega)


def spectral_partials(model: SpectralModel, theta, omega, max_order: int = 1) -> SpectralEval:
    return model.spectral_partials(theta, omega, max_order)


def autocovariances(model: SpectralModel, theta, max_lag: int,
                    method: str = "recursion") -> np.ndarray:
    """gamma(0..max_lag) by the exact recursion or by spectral quadrature."""
    if method == "recursion":
        return model.autocovariances(theta, max_lag)
    if method == "quadrature":
        return model.autocovariances_quadrature(theta, max_lag)[0]
    raise ValueError(f"unknown method {method!r}")


def coerce_theta(model: SpectralModel, theta: Sequence[float] | ThetaVector) -> np.ndarray:
    """Validated float coordinates; skips the root check for pre-validated vectors."""
    if isinstance(theta, ThetaVector) and theta.validated:
        return np.asarray(theta.coords, dtype=float)
    return model.check(theta)

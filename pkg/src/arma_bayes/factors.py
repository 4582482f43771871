"""Named prior factors ``h`` and the working regions they are checked on.

Every factor here has been checked with :func:`check_superharmonic` on the
grid returned by :func:`interior_grid` (see the test suite).  The functions
are module level so that priors built from them pickle cleanly into worker
processes.
"""
from __future__ import annotations

import importlib
from typing import Callable

import numpy as np

from .geometry import ScalarField, constant_field
from .model import ARMAModel, SpectralModel


def _sqrt_one_minus_a1sq(th):
    return float(np.sqrt(1.0 - th[0] ** 2))


def _sqrt_one_minus_a1sq_grad(th):
    g = np.zeros(len(th))
    g[0] = -th[0] / np.sqrt(1.0 - th[0] ** 2)
    return g


def _one_plus_a2(th):
    return float(1.0 + th[1])


def _one_plus_a2_grad(th):
    g = np.zeros(len(th))
    g[1] = 1.0
    return g


def _sqrt_one_plus_a2(th):
    return float(np.sqrt(1.0 + th[1]))


def _sqrt_one_plus_a2_grad(th):
    g = np.zeros(len(th))
    g[1] = 0.5 / np.sqrt(1.0 + th[1])
    return g


def one() -> ScalarField:
    """h = 1, the degenerate (null-control) factor."""
    return constant_field(1.0)


def ar1_sqrt_one_minus_a2() -> ScalarField:
    """h(a) = sqrt(1 - a^2) for AR(1); its Laplacian under the AR(1) metric is -h."""
    return ScalarField(_sqrt_one_minus_a1sq, _sqrt_one_minus_a1sq_grad, "sqrt(1-a1^2)")


def ar2_one_plus_a2() -> ScalarField:
    """h = 1 + a2 for AR(2); its Laplacian is -h on the stationarity triangle."""
    return ScalarField(_one_plus_a2, _one_plus_a2_grad, "1+a2")


def ar2_sqrt_one_plus_a2() -> ScalarField:
    return ScalarField(_sqrt_one_plus_a2, _sqrt_one_plus_a2_grad, "sqrt(1+a2)")


REGISTRY: dict[str, Callable[[], ScalarField]] = {
    "one": one,
    "ar1_sqrt_one_minus_a2": ar1_sqrt_one_minus_a2,
    "ar2_one_plus_a2": ar2_one_plus_a2,
    "ar2_sqrt_one_plus_a2": ar2_sqrt_one_plus_a2,
}


def resolve_factor(name: str) -> ScalarField:
    """Look up a registered factor or import ``package.module:function``.

    An imported function must return a :class:`ScalarField`, or else it is
    itself treated as the value function of the field.
    """
    if name in REGISTRY:
        return REGISTRY[name]()
    if ":" not in name:
        raise KeyError(f"unknown factor {name!r}; known: {sorted(REGISTRY)}")
    mod_name, attr = name.split(":", 1)
    obj = getattr(importlib.import_module(mod_name), attr)
    if isinstance(obj, ScalarField):
        return obj
    made = obj()
    return made if isinstance(made, ScalarField) else ScalarField(obj, name=name)


def interior_grid(model: SpectralModel, per_axis: int = 21, max_modulus: float = 0.9,
                  center=None, radius=None) -> np.ndarray:
    """Grid of valid points, either a box around ``center`` or the whole region.

    Without a centre the box covers every coefficient range compatible with
    the region and keeps points whose inverse roots have modulus at most
    ``max_modulus`` (so finite-difference stencils stay inside).
    """
    k = model.k
    if center is not None:
        c = np.asarray(center, dtype=float)
        r = np.broadcast_to(0.1 if radius is None else radius, (k,))
        axes = [np.linspace(c[i] - r[i], c[i] + r[i], per_axis) for i in range(k)]
    elif isinstance(model, ARMAModel):
        from scipy.special import comb

        axes = []
        for j in range(1, model.p + 1):
            bound = comb(model.p, j) * max_modulus ** j
            axes.append(np.linspace(-bound, bound, per_axis))
        for j in range(1, model.q + 1):
            bound = comb(model.q, j) * max_modulus ** j
            axes.append(np.linspace(-bound, bound, per_axis))
        if model.sigma_free:
            axes.append(np.linspace(-1.0, 1.0, max(3, per_axis // 4)))
    else:
        axes = [np.linspace(0.2, 5.0, per_axis)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, k)

    def ok(t):
        if not model.is_valid(t):
            return False
        if isinstance(model, ARMAModel):
            return model.max_root_modulus(t) <= max_modulus + 1e-12
        return True

    return np.array([t for t in mesh if ok(t)])

"""Experiment configuration: JSON text, defaults, validation and hashing.

A config is a JSON object.  Every key except ``model``, ``theta0`` and
``jobs`` has a default, and the hash is taken over the canonical form of the
fully defaulted config, so leaving a key out and writing its default give the
same hash and the same results.

Keys
----
name            free text label
model           {"p": int, "q": int, "sigma2": float or null (null = free log sigma^2)}
theta0          list of coordinates (a..., b..., [log sigma^2])
jobs            subset of JOB_KINDS, run in the given order
h               prior factor for dominance and superharmonic jobs (registry name
                or "module:function")
h_candidates    further factors for superharmonic-check
n_grid          non-empty list of sample sizes
reps            positive int or "auto" (pilot-variance rule)
seed            master seed (non-negative int)
quad            {"nodes", "tol", "max_nodes"}
risk            {"form", "kl_nodes", "pilot_reps", "max_reps", "t_multiplier"}
superharmonic   {"per_axis", "max_modulus", "tol_super"}
bias            {"n", "reps"}
oracle          {"reps", "omega_nodes", "slope_max", "prior"}
geometry_points list of theta points for geometry-table (default [theta0])
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from typing import Any

from .errors import ConfigInvalid

JOB_KINDS = ("geometry-table", "superharmonic-check", "bias-check",
             "dominance-experiment", "expansion-vs-oracle")

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "h": "one",
    "h_candidates": [],
    "n_grid": [64, 128, 256],
    "reps": "auto",
    "seed": 0,
    "quad": {"nodes": 512, "tol": 1e-8, "max_nodes": 32768},
    "risk": {"form": "geometric", "kl_nodes": 512, "pilot_reps": 400, "max_reps": 20000,
             "t_multiplier": 5.0},
    "superharmonic": {"per_axis": 21, "max_modulus": 0.9, "tol_super": 1e-8},
    "bias": {"n": 128, "reps": 2000},
    "oracle": {"reps": 100, "omega_nodes": 128, "slope_max": -1.3, "prior": "jeffreys"},
    "geometry_points": None,
}
REQUIRED = ("model", "theta0", "jobs")
MODEL_KEYS = {"p": 0, "q": 0, "sigma2": 1.0}


def _merge(key, default, given):
    if not isinstance(given, dict):
        raise ConfigInvalid(key, "expected an object")
    unknown = set(given) - set(default)
    if unknown:
        raise ConfigInvalid(f"{key}.{sorted(unknown)[0]}", "unknown key")
    out = dict(default)
    out.update(given)
    return out


def _pos_int(key, v, minimum=1):
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigInvalid(key, f"expected an integer >= {minimum}, got {v!r}")
    return v


def _number(key, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigInvalid(key, f"expected a number, got {v!r}")
    return float(v)


def normalize(raw: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigInvalid` naming the key."""
    if not isinstance(raw, dict):
        raise ConfigInvalid("<root>", "config must be a JSON object")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigInvalid(key, "missing required key")
    unknown = set(raw) - set(DEFAULTS) - set(REQUIRED)
    if unknown:
        raise ConfigInvalid(sorted(unknown)[0], "unknown key")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(DEFAULTS.get(key), dict):
            cfg[key] = _merge(key, DEFAULTS[key], value)
        else:
            cfg[key] = copy.deepcopy(value)
    cfg["model"] = _merge("model", MODEL_KEYS, raw["model"])
    m = cfg["model"]
    _pos_int("model.p", m["p"], 0)
    _pos_int("model.q", m["q"], 0)
    if m["p"] + m["q"] == 0 and m["sigma2"] is not None:
        raise ConfigInvalid("model", "p + q = 0 with fixed sigma2 has no free coordinate")
    if m["sigma2"] is not None:
        m["sigma2"] = _number("model.sigma2", m["sigma2"])
        if m["sigma2"] <= 0:
            raise ConfigInvalid("model.sigma2", "must be positive")
    k = m["p"] + m["q"] + (m["sigma2"] is None)
    if not isinstance(cfg["theta0"], list) or len(cfg["theta0"]) != k:
        raise ConfigInvalid("theta0", f"expected a list of {k} numbers")
    cfg["theta0"] = [_number("theta0", v) for v in cfg["theta0"]]
    jobs = cfg["jobs"]
    if not isinstance(jobs, list) or not jobs:
        raise ConfigInvalid("jobs", "expected a non-empty list")
    for j in jobs:
        if j not in JOB_KINDS:
            raise ConfigInvalid("jobs", f"unknown job {j!r}; choose from {JOB_KINDS}")
    ng = cfg["n_grid"]
    if not isinstance(ng, list) or not ng:
        raise ConfigInvalid("n_grid", "expected a non-empty list of sample sizes")
    for v in ng:
        _pos_int("n_grid", v, 2)
    if cfg["reps"] != "auto":
        _pos_int("reps", cfg["reps"], 2)
    _pos_int("seed", cfg["seed"], 0)
    if not isinstance(cfg["h"], str):
        raise ConfigInvalid("h", "expected a factor name")
    if not isinstance(cfg["h_candidates"], list) or not all(isinstance(v, str) for v in cfg["h_candidates"]):
        raise ConfigInvalid("h_candidates", "expected a list of factor names")
    q = cfg["quad"]
    _pos_int("quad.nodes", q["nodes"], 8)
    _pos_int("quad.max_nodes", q["max_nodes"], q["nodes"])
    q["tol"] = _number("quad.tol", q["tol"])
    r = cfg["risk"]
    if r["form"] not in ("geometric", "observed"):
        raise ConfigInvalid("risk.form", "expected 'geometric' or 'observed'")
    _pos_int("risk.kl_nodes", r["kl_nodes"], 8)
    _pos_int("risk.pilot_reps", r["pilot_reps"], 2)
    _pos_int("risk.max_reps", r["max_reps"], r["pilot_reps"])
    r["t_multiplier"] = _number("risk.t_multiplier", r["t_multiplier"])
    s = cfg["superharmonic"]
    _pos_int("superharmonic.per_axis", s["per_axis"], 2)
    s["max_modulus"] = _number("superharmonic.max_modulus", s["max_modulus"])
    s["tol_super"] = _number("superharmonic.tol_super", s["tol_super"])
    _pos_int("bias.n", cfg["bias"]["n"], 2)
    _pos_int("bias.reps", cfg["bias"]["reps"], 2)
    o = cfg["oracle"]
    _pos_int("oracle.reps", o["reps"], 1)
    _pos_int("oracle.omega_nodes", o["omega_nodes"], 8)
    o["slope_max"] = _number("oracle.slope_max", o["slope_max"])
    if o["prior"] not in ("jeffreys", "h"):
        raise ConfigInvalid("oracle.prior", "expected 'jeffreys' or 'h'")
    pts = cfg["geometry_points"]
    if pts is not None:
        if not isinstance(pts, list) or not pts or any(
                not isinstance(p, list) or len(p) != k for p in pts):
            raise ConfigInvalid("geometry_points", f"expected a list of {k}-vectors")
        cfg["geometry_points"] = [[_number("geometry_points", v) for v in p] for p in pts]
    return cfg


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated, fully defaulted experiment configuration."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return cls(normalize(raw))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid("<text>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        """Canonical text: sorted keys, two-space indent, trailing newline."""
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    @property
    def hash(self) -> str:
        compact = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(compact.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = copy.deepcopy(self.data)
        raw.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(raw)

    def __getitem__(self, key):
        return self.data[key]

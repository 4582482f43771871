"""Batch driver: turns an :class:`ExperimentConfig` into a report bundle on disk.

CSV schema (version 1), one file per job, every row starting with the config
hash and ending with the cell seed:

* ``dominance.csv``: config_hash, n, reps, risk_jeffreys, risk_h, diff, diff_se,
  n2_diff, asymptote, floored_count, seed
* ``expansion_vs_oracle.csv``: config_hash, n, reps, err_observed,
  err_observed_se, err_geometric, err_geometric_se, truncated_count, seed
* ``bias.csv``: config_hash, n, reps, coord, mc_bias, mc_se, finite_n, geometric, z, seed
* ``superharmonic.csv``: config_hash, h, nodes, verdict, min_margin, max_laplacian,
  min_h, worst_node, seed
* ``geometry.csv``: config_hash, point, theta, name, value, seed  (long format:
  one row per tensor entry of g, T_i and the contracted mixture connection)

``summary.json`` holds the config hash, canonical config, package versions,
seeds and per-job verdicts; it has no timestamps.  ``metadata.json`` holds the
wall-clock data and is the only file expected to differ between runs.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import (
    DidNotConverge,
    HessianNotPD,
    InvalidParameter,
    OracleRegionTruncated,
    SingularMatrix,
    TooManyFitFailures,
)
from .factors import interior_grid, resolve_factor
from .geometry import (
    JEFFREYS,
    QuadConfig,
    check_superharmonic,
    converged_nodes,
    geometry_at,
    jeffreys_times,
    model_metric,
    omega_grid,
)
from .likelihood import sample_path
from .model import ARMAModel
from .posterior import (
    OracleConfig,
    bayes_spectral_expansion,
    bayes_spectral_oracle,
    fit_mle,
    mle_bias,
)
from .risk import RiskSettings, dominance_experiment, mean_se

CSV_SCHEMA_VERSION = 1
FIT_ERRORS = (DidNotConverge, HessianNotPD, InvalidParameter, SingularMatrix)
DOMINANCE_COLUMNS = ["config_hash", "n", "reps", "risk_jeffreys", "risk_h", "diff", "diff_se",
                     "n2_diff", "asymptote", "floored_count", "seed"]


@dataclass
class JobResult:
    job: str
    file_stem: str
    columns: list
    rows: list
    summary: dict
    verdict: bool
    plot: Optional[Callable] = field(default=None, repr=False)


@dataclass
class ReportBundle:
    config: ExperimentConfig
    jobs: list
    elapsed: float = 0.0

    @property
    def verdict(self) -> bool:
        return all(j.verdict for j in self.jobs)

    def summary(self) -> dict:
        import numpy
        import scipy

        return {
            "config_hash": self.config.hash,
            "config": self.config.data,
            "csv_schema_version": CSV_SCHEMA_VERSION,
            "versions": {"arma_bayes": __version__, "numpy": numpy.__version__,
                         "scipy": scipy.__version__},
            "seed": self.config["seed"],
            "verdict": "pass" if self.verdict else "fail",
            "jobs": {j.job: dict(j.summary, verdict="pass" if j.verdict else "fail")
                     for j in self.jobs},
        }


def cell_seed(master: int, job: str, n: int = 0) -> int:
    """Seed for one cell, derived from the master seed, the job and n."""
    tag = sum(ord(c) * 131 ** i for i, c in enumerate(job)) % (2 ** 31)
    return int(np.random.SeedSequence([master, tag, n]).generate_state(1)[0])


def build_model(cfg: ExperimentConfig) -> ARMAModel:
    m = cfg["model"]
    return ARMAModel(m["p"], m["q"], sigma2=m["sigma2"])


def _quad(cfg) -> QuadConfig:
    q = cfg["quad"]
    return QuadConfig(nodes=q["nodes"], tol=q["tol"], max_nodes=q["max_nodes"])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


# jobs -------------------------------------------------------------------------------

def job_geometry(cfg, model, log) -> JobResult:
    quad = _quad(cfg)
    points = cfg["geometry_points"] or [cfg["theta0"]]
    rows, ok = [], True
    names = model.coord_names
    for idx, pt in enumerate(points):
        geom = geometry_at(model, pt, quad)
        sym = np.allclose(geom.g, geom.g.T, atol=1e-12)
        pd = bool(np.all(np.linalg.eigvalsh(geom.g) > 0))
        ok &= sym and pd
        entries = [(f"g[{names[i]},{names[j]}]", geom.g[i, j])
                   for i in range(model.k) for j in range(model.k)]
        entries += [(f"T_i[{names[i]}]", geom.T_i[i]) for i in range(model.k)]
        entries += [(f"Gm_contracted[{names[i]}]", v) for i, v in enumerate(geom.Gm_contracted())]
        for name, value in entries:
            rows.append([cfg.hash, idx, pt, name, value, cfg["seed"]])
    return JobResult("geometry-table", "geometry",
                     ["config_hash", "point", "theta", "name", "value", "seed"], rows,
                     {"points": len(points)}, ok)


def job_superharmonic(cfg, model, log) -> JobResult:
    s = cfg["superharmonic"]
    region = interior_grid(model, per_axis=s["per_axis"], max_modulus=s["max_modulus"])
    nodes = 2 * converged_nodes(model, cfg["theta0"], _quad(cfg))
    metric = model_metric(model, nodes)
    rows, reports, ok = [], {}, True
    for name in [cfg["h"]] + list(cfg["h_candidates"]):
        rep = check_superharmonic(resolve_factor(name), region, metric, s["tol_super"],
                                  domain=model.is_valid)
        reports[name] = rep.as_dict()
        ok &= rep.verdict
        log(f"superharmonic {name}: {'pass' if rep.verdict else 'fail'} "
            f"(max laplacian {rep.max_laplacian:.3e})")
        rows.append([cfg.hash, name, len(region), "pass" if rep.verdict else "fail",
                     rep.min_margin, rep.max_laplacian, rep.min_h, rep.worst_node, cfg["seed"]])
    return JobResult("superharmonic-check", "superharmonic",
                     ["config_hash", "h", "nodes", "verdict", "min_margin", "max_laplacian",
                      "min_h", "worst_node", "seed"], rows, {"factors": reports}, ok)


def job_bias(cfg, model, log) -> JobResult:
    n, reps = cfg["bias"]["n"], cfg["bias"]["reps"]
    th0 = np.asarray(cfg["theta0"])
    seed = cell_seed(cfg["seed"], "bias-check", n)
    est = []
    for r in range(reps):
        x = sample_path(model, th0, n, seed, r)
        try:
            est.append(fit_mle(model, x).theta_hat.coords - th0)
        except FIT_ERRORS:  # counted below; the cell aborts if too many fail
            continue
    failures = reps - len(est)
    if failures > 0.01 * reps:
        raise TooManyFitFailures(f"bias-check n={n}: {failures} of {reps} fits failed")
    est = np.array(est)
    b = mle_bias(model, th0, n, _quad(cfg))
    rows, zs = [], []
    for i, name in enumerate(model.coord_names):
        m, se = mean_se(est[:, i])
        z = (m - b.finite_n[i]) / se
        zs.append(z)
        rows.append([cfg.hash, n, reps, name, m, se, b.finite_n[i], b.geometric[i], z, seed])
    route_gap = float(np.max(np.abs(b.finite_n - b.geometric)))
    ok = bool(np.all(np.abs(zs) <= 3.0))
    log(f"bias: max |z| = {max(abs(z) for z in zs):.2f}")
    return JobResult("bias-check", "bias",
                     ["config_hash", "n", "reps", "coord", "mc_bias", "mc_se", "finite_n",
                      "geometric", "z", "seed"], rows,
                     {"max_abs_z": float(max(abs(z) for z in zs)), "route_gap": route_gap,
                      "n2_route_gap": route_gap * n * n, "failures": failures}, ok)


def job_dominance(cfg, model, log, workers) -> JobResult:
    r = cfg["risk"]
    settings = RiskSettings(form=r["form"], kl_nodes=r["kl_nodes"], quad=_quad(cfg))
    h = resolve_factor(cfg["h"])
    rows, details = [], []
    result = None
    for n in cfg["n_grid"]:
        seed = cell_seed(cfg["seed"], "dominance-experiment", n)
        result = dominance_experiment(model, cfg["theta0"], h, [n], reps=cfg["reps"], seed=seed,
                                      pilot_reps=r["pilot_reps"], max_reps=r["max_reps"],
                                      t_multiplier=r["t_multiplier"], settings=settings,
                                      workers=workers, progress=log)
        row = result.rows[0]
        rows.append([cfg.hash, row.n, row.reps, row.risk_jeffreys, row.risk_h, row.diff,
                     row.diff_se, row.n2_diff, row.asymptote, row.floored_count, row.seed])
        details.append(row)
    asym = result.asymptote
    null = asym.diff_vs_jeffreys == 0.0
    if null:
        ok = all(abs(d.t) < 3.0 for d in details)
    else:
        ok = all(d.t > 2.0 for d in details)
    summary = {
        "mode": "null-control" if null else "dominance",
        "h": cfg["h"],
        "asymptote": asym.diff_vs_jeffreys,
        "asymptote_components": list(asym.components),
        "superharmonic": result.superharmonic.as_dict() if result.superharmonic else None,
        "cells": [{"n": d.n, "reps": d.reps, "t": d.t, "unpaired_se": d.unpaired_se,
                   "paired_se": d.diff_se, "n2_diff": d.n2_diff, "n2_diff_se": d.n2_diff_se,
                   "z_vs_asymptote": d.z_vs_asymptote, "failures": d.failures}
                  for d in details],
        "paired_se_below_unpaired": all(d.diff_se < d.unpaired_se or d.diff_se == 0
                                        for d in details),
        "asymptote_consistent": all(abs(d.z_vs_asymptote) <= 3.0 for d in details),
    }

    def plot(path):
        from .report import dominance_plot

        dominance_plot(details, cfg["h"], path)

    return JobResult("dominance-experiment", "dominance", list(DOMINANCE_COLUMNS), rows,
                     summary, ok, plot)


def job_expansion(cfg, model, log) -> JobResult:
    o = cfg["oracle"]
    omega = omega_grid(o["omega_nodes"])
    prior = JEFFREYS if o["prior"] == "jeffreys" else jeffreys_times(resolve_factor(cfg["h"]))
    quad = _quad(cfg)
    rows, means = [], {}
    for n in cfg["n_grid"]:
        seed = cell_seed(cfg["seed"], "expansion-vs-oracle", n)
        e_obs, e_geo, trunc = [], [], 0
        for rep in range(o["reps"]):
            x = sample_path(model, cfg["theta0"], n, seed, rep)
            fit = fit_mle(model, x, third=True)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OracleRegionTruncated)
                orc = bayes_spectral_oracle(model, x, prior, omega, OracleConfig(), fit=fit)
            trunc += orc.truncated
            a = bayes_spectral_expansion(model, x, prior, omega, "observed", fit, quad)
            b = bayes_spectral_expansion(model, x, prior, omega, "geometric", fit, quad)
            e_obs.append(np.max(np.abs(a.values - orc.values)))
            e_geo.append(np.max(np.abs(b.values - orc.values)))
        mo, so = mean_se(e_obs)
        mg, sg = mean_se(e_geo)
        means[n] = (mo, mg)
        log(f"expansion n={n}: observed {mo:.3e}, geometric {mg:.3e}, truncated {trunc}")
        rows.append([cfg.hash, n, o["reps"], mo, so, mg, sg, trunc, seed])
    ns = np.array(sorted(means), dtype=float)
    slopes = {}
    if len(ns) >= 2:
        for j, form in enumerate(("observed", "geometric")):
            ys = np.log([means[int(n)][j] for n in ns])
            slopes[form] = float(np.polyfit(np.log(ns), ys, 1)[0])
    ok = bool(slopes) and all(s <= o["slope_max"] for s in slopes.values())
    return JobResult("expansion-vs-oracle", "expansion_vs_oracle",
                     ["config_hash", "n", "reps", "err_observed", "err_observed_se",
                      "err_geometric", "err_geometric_se", "truncated_count", "seed"],
                     rows, {"slopes": slopes, "slope_max": o["slope_max"]}, ok)


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None,
                   log: Callable[[str], None] = lambda s: None) -> ReportBundle:
    """Run every job in ``cfg['jobs']`` in order and collect the results."""
    start = time.perf_counter()
    model = build_model(cfg)
    model.validate(cfg["theta0"])
    runners = {
        "geometry-table": lambda: job_geometry(cfg, model, log),
        "superharmonic-check": lambda: job_superharmonic(cfg, model, log),
        "bias-check": lambda: job_bias(cfg, model, log),
        "dominance-experiment": lambda: job_dominance(cfg, model, log, workers),
        "expansion-vs-oracle": lambda: job_expansion(cfg, model, log),
    }
    jobs = []
    for name in cfg["jobs"]:
        log(f"job {name}")
        jobs.append(runners[name]())
    return ReportBundle(cfg, jobs, time.perf_counter() - start)


# output -----------------------------------------------------------------------------

def atomic_write(path: str, data, mode: str = "w"):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({"encoding": "utf-8", "newline": ""} if "b" not in mode else {})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def _clean(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_clean(v) for v in o]
    return o


def emit_report(bundle: ReportBundle, out_dir: str, formats=("csv", "json", "svg")) -> list:
    """Write the bundle; returns the paths written."""
    formats = set(formats)
    unknown = formats - {"csv", "json", "svg"}
    if unknown:
        raise ValueError(f"unknown formats {sorted(unknown)}")
    written = []
    if "csv" in formats:
        for job in bundle.jobs:
            path = os.path.join(out_dir, f"{job.file_stem}.csv")
            atomic_write(path, csv_text(job.columns, job.rows))
            written.append(path)
    if "json" in formats:
        path = os.path.join(out_dir, "summary.json")
        text = json.dumps(_clean(json.loads(json.dumps(bundle.summary(), default=_json_default))),
                          sort_keys=True, indent=2) + "\n"
        atomic_write(path, text)
        written.append(path)
    if "svg" in formats:
        for job in bundle.jobs:
            if job.plot is not None:
                path = os.path.join(out_dir, f"{job.file_stem}.svg")
                job.plot(path)
                written.append(path)
    meta = {
        "config_hash": bundle.config.hash,
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "elapsed_seconds": round(bundle.elapsed, 3),
        "python": platform.python_version(),
        "platform": platform.platform(),
    }
    path = os.path.join(out_dir, "metadata.json")
    atomic_write(path, json.dumps(meta, sort_keys=True, indent=2) + "\n")
    written.append(path)
    return written

"""Experiment descriptions, parallel execution, aggregation and persistence.

Path ``i`` of a job always draws from ``RngStream(master_seed, i)``.  Paths
are cut into fixed-size chunks (independent of the worker count), chunks run
on a thread pool through the nogil kernels, and the per-path records are
reassembled in path order before any reduction.  Float reductions use
``math.fsum`` over that order, so the summary depends only on the job.
"""

import csv
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .carousel import (
    FLAG_CLAMPED,
    FLAG_NONFINITE,
    FLAG_UNCONVERGED,
    BELOW,
    ABOVE,
    IntensitySpec,
    SolverConfig,
    augmented_grid,
    carousel_chunk,
    limit_chunk,
    sse_chunk,
    with_early_exit,
)
from .ensemble import EnsembleParams, bulk_chunk, last_index
from .pointstats import fraction_ci, gap_probability, gap_slope_fit, EmpiricalCounts

SCHEMA_VERSION = 1
EXPERIMENTS = ("bulk-counts", "sine-counts", "carousel-counts", "gap-prob",
               "phase-transition", "compare", "limit-sde")
CHUNK = 128
ERROR_BUDGET = 0.01
_SOLVER_KEYS = ("dt_max", "dt_coef", "tail_tol", "angle_tol", "t_hard_max", "below_margin",
                "max_refine")


class JobFailed(RuntimeError):
    pass


class SummaryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class JobSpec:
    experiment: str
    params: dict
    n_paths: int
    master_seed: int = 0
    workers: int = 1
    output_path: str = None

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.experiment == "compare":
            raise ValueError("compare works on persisted summaries, not as a simulation job")
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ValueError("n_paths must be a positive integer")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must fit in 64 unsigned bits")
        if int(self.workers) < 1:
            raise ValueError("workers must be >= 1")
        return _PLANS[self.experiment](self.params)


@dataclass
class Cell:
    key: str
    mean: float
    stderr: float
    histogram: dict
    n: int = 0
    variance: float = 0.0


@dataclass
class RunSummary:
    experiment: str
    params: dict
    master_seed: int
    n_paths: int
    cells: list
    flags: dict
    wall_seconds: float = 0.0
    artifact_version: str = __version__
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)
    records: dict = field(default=None, compare=False, repr=False)

    def cell(self, key):
        for c in self.cells:
            if c.key == key:
                return c
        raise KeyError(key)

    def samples(self, key):
        """Values of one cell, rebuilt from its histogram (sorted)."""
        h = self.cell(key).histogram
        vals = sorted(h)
        return np.repeat(np.array(vals, dtype=np.int64), [h[v] for v in vals])


# -- parameter plans -----------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def _grid(values):
    g = [float(v) for v in values]
    if not g or any(not math.isfinite(v) for v in g):
        raise ValueError("lambda grid must be a nonempty list of finite numbers")
    if any(b < a for a, b in zip(g, g[1:])):
        raise ValueError("lambda grid must be sorted")
    return g


def _positive(params, key):
    v = float(params[key])
    if not v > 0:
        raise ValueError(f"{key} must be positive")
    return v


def _solver(params):
    kw = {k: params[k] for k in _SOLVER_KEYS if params.get(k) is not None}
    return SolverConfig(**kw)


@dataclass
class _Plan:
    params: dict
    keys: list
    kind: str
    run: object
    int_valued: bool = True
    post: object = None


def _plan_counts(params, carousel):
    p = dict(params)
    beta = _positive(p, "beta")
    lams = _grid(p["lambdas"])
    cfg = _solver(p)
    spec = IntensitySpec.exponential(beta)
    full, idx = augmented_grid(lams)
    pc = cfg.packed(spec, float(np.max(np.abs(full))))
    kind, b, tg, tf, tt = spec.kernel_args()
    single = 1 if p.get("single") else 0
    z0 = p.get("z0", [-1.0, 0.0])
    z0 = complex(float(z0[0]), float(z0[1]))
    if abs(abs(z0) - 1.0) > 1e-9:
        raise ValueError("z0 must lie on the unit circle")
    if carousel and single:
        raise ValueError("the carousel has no single-lambda mode")
    gamma0 = math.atan2(z0.imag, z0.real)
    nl = full.shape[0]

    def run(seed, start, stop):
        m = stop - start
        counts = np.empty((m, nl), np.int64)
        conv = np.empty((m, nl), np.int64)
        appr = np.empty((m, nl), np.int64)
        st = np.empty(m)
        fl = np.empty(m, np.int64)
        al = np.empty((m, nl))
        if carousel:
            carousel_chunk(seed, start, stop, kind, b, tg, tf, tt, full, pc, gamma0,
                           counts, conv, appr, st, fl, al)
        else:
            sse_chunk(seed, start, stop, single, kind, b, tg, tf, tt, full, pc,
                      counts, conv, appr, st, fl, al)
        return {"values": counts[:, idx], "flags": fl, "approach": appr[:, idx], "stop": st}

    echo = {"beta": beta, "lambdas": lams, **{k: p[k] for k in _SOLVER_KEYS if p.get(k) is not None}}
    if carousel:
        echo["z0"] = [z0.real, z0.imag]
    else:
        echo["single"] = bool(single)
    return _Plan(echo, [f"N({_fmt(x)})" for x in lams], "carousel" if carousel else "sse", run)


def _plan_bulk(params):
    p = dict(params)
    n = int(p["n"])
    if n < 2:
        raise ValueError("n must be >= 2")
    beta = _positive(p, "beta")
    mu = float(p.get("mu", 0.0))
    ep = EnsembleParams(n, beta, mu)
    if not ep.n0 > 1:
        raise ValueError("mu is outside the bulk (n0 = n - mu^2/4 - 1/2 must exceed 1)")
    lams = _grid(p["lambdas"])
    lam_arr = np.array(lams)
    Lams = np.ascontiguousarray(ep.Lambda(lam_arr), dtype=float)
    alpha_t = p.get("alpha_t")
    steps = -1
    if alpha_t is not None:
        alpha_t = float(alpha_t)
        if not 0 < alpha_t < 1:
            raise ValueError("alpha_t must lie in (0, 1)")
        steps = min(int(math.floor(alpha_t * ep.n0)), last_index(ep.n0))
    nl = len(lams)

    def run(seed, start, stop):
        m = stop - start
        counts = np.empty((m, nl), np.int64)
        alphas = np.zeros((m, nl))
        bulk_chunk(seed, start, stop, n, beta, mu, Lams, lam_arr, steps, counts, alphas)
        out = {"values": counts, "flags": np.zeros(m, np.int64)}
        if steps >= 0:
            out["alpha"] = alphas
        return out

    echo = {"n": n, "beta": beta, "mu": mu, "lambdas": lams}
    keys = [f"N({_fmt(x)})" for x in lams]
    if steps >= 0:
        echo["alpha_t"] = alpha_t
        echo["alpha_step"] = steps

    def post(summary, recs):
        if steps < 0:
            return
        for j, x in enumerate(lams):
            summary.cells.append(_float_cell(f"alpha({_fmt(x)})", recs["alpha"][:, j],
                                             recs["flags"]))

    return _Plan(echo, keys, "finite-n", run, post=post)


def _plan_gap(params):
    p = dict(params)
    beta = _positive(p, "beta")
    lams = _grid(sorted(float(x) for x in p["lambdas"]))
    if any(x <= 0 for x in lams):
        raise ValueError("gap lambdas must be positive")
    ks = sorted({int(k) for k in np.atleast_1d(p.get("k", [0]))})
    if ks[0] < 0:
        raise ValueError("k must be >= 0")
    cfg = with_early_exit(_solver(p), ks[-1] + 1)
    spec = IntensitySpec.exponential(beta)
    full, idx = augmented_grid(lams)
    pc = cfg.packed(spec, float(np.max(full)))
    kind, b, tg, tf, tt = spec.kernel_args()
    nl = full.shape[0]

    def run(seed, start, stop):
        m = stop - start
        counts = np.empty((m, nl), np.int64)
        conv = np.empty((m, nl), np.int64)
        appr = np.empty((m, nl), np.int64)
        st = np.empty(m)
        fl = np.empty(m, np.int64)
        al = np.empty((m, nl))
        sse_chunk(seed, start, stop, 0, kind, b, tg, tf, tt, full, pc,
                  counts, conv, appr, st, fl, al)
        # censored counts are exact up to the exit level
        return {"values": np.minimum(counts[:, idx], ks[-1] + 1), "flags": fl, "stop": st}

    def post(summary, recs):
        ok = (recs["flags"] & FLAG_NONFINITE) == 0
        ests = {}
        for j, x in enumerate(lams):
            s = EmpiricalCounts(x, recs["values"][ok, j], "sse")
            ests[_fmt(x)] = {str(k): asdict(gap_probability(s, k)) for k in ks}
        summary.extra["gap"] = ests
        fits = {}
        for k in ks:
            es = [gap_probability(EmpiricalCounts(x, recs["values"][ok, j], "sse"), k)
                  for j, x in enumerate(lams)]
            try:
                f = gap_slope_fit(es)
                fits[str(k)] = {"slope": f.slope, "stderr": f.stderr, "intercept": f.intercept,
                                "target": beta / 64.0}
            except ValueError as e:
                fits[str(k)] = {"error": str(e)}
        summary.extra["slope_fit"] = fits

    echo = {"beta": beta, "lambdas": lams, "k": ks, "early_exit_level": ks[-1] + 1,
            **{k: p[k] for k in _SOLVER_KEYS if p.get(k) is not None}}
    return _Plan(echo, [f"N({_fmt(x)})" for x in lams], "sse", run, post=post)


def _plan_phase(params):
    p = dict(params)
    beta = _positive(p, "beta")
    lam = float(p["lambda"])
    if not lam > 0:
        raise ValueError("lambda must be positive")
    dts = [float(x) for x in p["dt_list"]]
    if not dts or any(not d > 0 for d in dts):
        raise ValueError("dt_list must hold positive step sizes")
    base = _solver(p)
    spec = IntensitySpec.exponential(beta)
    full = np.array([0.0, lam])
    kind, b, tg, tf, tt = spec.kernel_args()
    # halving dt halves both the cap and the drift-resolution coefficient
    packs = [replace(base, dt_max=d, dt_coef=base.dt_coef * d / base.dt_max).packed(spec, lam)
             for d in dts]

    def run(seed, start, stop):
        m = stop - start
        vals = np.empty((m, len(dts)), np.int64)
        fl = np.zeros(m, np.int64)
        for j, pc in enumerate(packs):
            counts = np.empty((m, 2), np.int64)
            conv = np.empty((m, 2), np.int64)
            appr = np.empty((m, 2), np.int64)
            st = np.empty(m)
            f = np.empty(m, np.int64)
            al = np.empty((m, 2))
            sse_chunk(seed, start, stop, 1, kind, b, tg, tf, tt, full, pc,
                      counts, conv, appr, st, f, al)
            vals[:, j] = appr[:, 1]
            fl |= f
        return {"values": vals, "flags": fl}

    def post(summary, recs):
        ok = (recs["flags"] & FLAG_NONFINITE) == 0
        out = {}
        for j, d in enumerate(dts):
            v = recs["values"][ok, j]
            n = int(v.size)
            row = {}
            for name, code in (("below", BELOW), ("above", ABOVE), ("undecided", 0)):
                h = int(np.count_nonzero(v == code))
                pp, lo, hi = fraction_ci(h, n) if n else (0.0, 0.0, 1.0)
                row[name] = {"count": h, "fraction": pp, "ci_low": lo, "ci_high": hi}
            out[_fmt(d)] = row
        summary.extra["approach"] = out

    echo = {"beta": beta, "lambda": lam, "dt_list": dts,
            **{k: p[k] for k in _SOLVER_KEYS if p.get(k) is not None and k != "dt_max"}}
    return _Plan(echo, [f"approach(dt={_fmt(d)})" for d in dts], "sse", run, post=post)


def _plan_limit(params):
    p = dict(params)
    beta = _positive(p, "beta")
    lam = float(p["lambda"])
    form = p.get("form", "phase")
    if form not in ("phase", "relative"):
        raise ValueError("form must be 'phase' or 'relative'")
    nu = p.get("nu", "inf")
    nu = math.inf if str(nu).lower() in ("inf", "infinity") else float(nu)
    if not nu >= 0:
        raise ValueError("nu must be in [0, inf]")
    t = np.array([float(x) for x in p.get("t_grid", [0.5])])
    if t.size == 0 or np.any(t < 0) or np.any(t >= 1) or np.any(np.diff(t) < 0):
        raise ValueError("t_grid must be sorted inside [0, 1)")
    dt_max = float(p.get("dt_max") or 1e-3)
    grid = -2.0 / beta * np.log1p(-t) if form == "relative" else -np.log1p(-t)
    code = 0 if form == "relative" else 1

    def run(seed, start, stop):
        m = stop - start
        out = np.empty((m, t.size))
        limit_chunk(seed, start, stop, code, nu, beta, lam, grid, dt_max, out)
        fl = np.where(np.all(np.isfinite(out), axis=1), 0, FLAG_NONFINITE).astype(np.int64)
        return {"values": out, "flags": fl}

    echo = {"beta": beta, "lambda": lam, "form": form,
            "nu": "inf" if math.isinf(nu) else nu, "t_grid": [float(x) for x in t], "dt_max": dt_max}
    name = "alpha" if form == "relative" else "phi"
    return _Plan(echo, [f"{name}({_fmt(x)})" for x in t], "limit", run, int_valued=False)


_PLANS = {
    "bulk-counts": _plan_bulk,
    "sine-counts": lambda p: _plan_counts(p, carousel=False),
    "carousel-counts": lambda p: _plan_counts(p, carousel=True),
    "gap-prob": _plan_gap,
    "phase-transition": _plan_phase,
    "limit-sde": _plan_limit,
}


# -- execution -----------------------------------------------------------------

def max_workers(requested):
    cap = os.environ.get("SINE_BETA_THREADS")
    w = int(requested)
    if cap:
        try:
            w = min(w, max(1, int(cap)))
        except ValueError:
            raise ValueError("SINE_BETA_THREADS must be an integer") from None
    return max(1, w)


def _int_cell(key, values, ok):
    v = values[ok]
    n = int(v.size)
    if n == 0:
        return Cell(key, float("nan"), float("nan"), {}, 0, float("nan"))
    mean = math.fsum(v.tolist()) / n
    var = math.fsum(((v - mean) ** 2).tolist()) / (n - 1) if n > 1 else 0.0
    u, c = np.unique(v, return_counts=True)
    return Cell(key, mean, math.sqrt(var / n), {int(a): int(b) for a, b in zip(u, c)}, n, var)


def _float_cell(key, values, flags):
    ok = ((flags & FLAG_NONFINITE) == 0) & np.isfinite(values)
    v = values[ok]
    n = int(v.size)
    if n == 0:
        return Cell(key, float("nan"), float("nan"), {}, 0, float("nan"))
    mean = math.fsum(v.tolist()) / n
    var = math.fsum(((v - mean) ** 2).tolist()) / (n - 1) if n > 1 else 0.0
    # histogram over the 2 pi level of each value
    lv = np.floor(v / (2.0 * math.pi)).astype(np.int64)
    u, c = np.unique(lv, return_counts=True)
    return Cell(key, mean, math.sqrt(var / n), {int(a): int(b) for a, b in zip(u, c)}, n, var)


def run_job(job, progress=None):
    """Run every path of ``job`` and reduce to a :class:`RunSummary`."""
    plan = job.validate()
    n = int(job.n_paths)
    seed = np.uint64(int(job.master_seed))
    bounds = [(a, min(a + CHUNK, n)) for a in range(0, n, CHUNK)]
    workers = max_workers(job.workers)
    t0 = time.perf_counter()
    parts = [None] * len(bounds)
    done = 0
    if workers == 1:
        for i, (a, b) in enumerate(bounds):
            parts[i] = plan.run(seed, a, b)
            done += b - a
            if progress:
                progress(done, n)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(plan.run, seed, a, b) for a, b in bounds]
            for i, f in enumerate(futs):
                parts[i] = f.result()
                done += bounds[i][1] - bounds[i][0]
                if progress:
                    progress(done, n)
    recs = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    wall = time.perf_counter() - t0

    fl = recs["flags"]
    errored = (fl & FLAG_NONFINITE) != 0
    n_err = int(np.count_nonzero(errored))
    flags = {
        "unconverged": int(np.count_nonzero(((fl & FLAG_UNCONVERGED) != 0) & ~errored)),
        "clamped": int(np.count_nonzero((fl & FLAG_CLAMPED) != 0)),
        "errored": n_err,
    }
    ok = ~errored
    if plan.int_valued:
        cells = [_int_cell(k, recs["values"][:, j], ok) for j, k in enumerate(plan.keys)]
    else:
        cells = [_float_cell(k, recs["values"][:, j], fl) for j, k in enumerate(plan.keys)]
    summary = RunSummary(
        experiment=job.experiment,
        params=_jsonable(plan.params),
        master_seed=int(job.master_seed),
        n_paths=n,
        cells=cells,
        flags=flags,
        wall_seconds=wall,
        extra={"source": plan.kind},
        records=dict(recs, path_index=np.arange(n)),
    )
    if plan.post is not None:
        plan.post(summary, recs)
    summary.extra = _jsonable(summary.extra)
    if n_err > ERROR_BUDGET * n:
        raise JobFailed(f"{n_err} of {n} paths errored (budget {ERROR_BUDGET:.0%})")
    return summary


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    return x


# -- persistence -----------------------------------------------------------------

_REQUIRED = ("schema_version", "experiment", "params", "master_seed", "n_paths", "cells",
             "flags", "wall_seconds", "artifact_version")


def to_document(summary, timing=True):
    doc = {
        "schema_version": summary.schema_version,
        "experiment": summary.experiment,
        "params": summary.params,
        "master_seed": summary.master_seed,
        "n_paths": summary.n_paths,
        "cells": [{"key": c.key, "mean": c.mean, "stderr": c.stderr,
                   "histogram": {str(k): v for k, v in sorted(c.histogram.items())},
                   "n": c.n, "variance": c.variance} for c in summary.cells],
        "flags": summary.flags,
        "wall_seconds": summary.wall_seconds if timing else 0.0,
        "artifact_version": summary.artifact_version,
        "extra": summary.extra,
    }
    return doc


def dumps(summary, timing=True):
    # repr floats round-trip exactly; NaN is written as the JSON extension token
    return json.dumps(to_document(summary, timing), indent=1, sort_keys=False) + "\n"


def persist(summary, path, timing=True, records=False):
    """Write the summary as JSON; ``records=True`` adds a per-path CSV sidecar."""
    text = dumps(summary, timing)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
    if records:
        write_records(summary, sidecar_path(path))
    return path


def sidecar_path(path):
    return f"{path}.paths.csv"


def write_records(summary, path_or_file):
    recs = summary.records
    if recs is None:
        raise ValueError("summary carries no per-path records")
    keys = [c.key for c in summary.cells[:recs["values"].shape[1]]]
    own = not hasattr(path_or_file, "write")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(["path_index", "flags"] + keys)
        vals = recs["values"]
        fmt = (lambda x: str(int(x))) if vals.dtype.kind in "iu" else _fmt
        for i in range(vals.shape[0]):
            w.writerow([int(recs["path_index"][i]), int(recs["flags"][i])]
                       + [fmt(x) for x in vals[i]])
    finally:
        if own:
            fh.close()


def from_document(doc):
    if not isinstance(doc, dict):
        raise SummaryFormatError("summary document must be a JSON object")
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise SummaryFormatError(f"missing required field(s): {', '.join(missing)}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SummaryFormatError(
            f"schema_version {doc['schema_version']!r} is not supported (expected {SCHEMA_VERSION})")
    try:
        cells = [Cell(c["key"], float(c["mean"]), float(c["stderr"]),
                      {int(k): int(v) for k, v in c["histogram"].items()},
                      int(c.get("n", sum(c["histogram"].values()))),
                      float(c.get("variance", float("nan"))))
                 for c in doc["cells"]]
        flags = {k: int(doc["flags"][k]) for k in ("unconverged", "clamped", "errored")}
    except (KeyError, TypeError, ValueError) as e:
        raise SummaryFormatError(f"malformed cell or flag record: {e}") from None
    return RunSummary(doc["experiment"], doc["params"], int(doc["master_seed"]),
                      int(doc["n_paths"]), cells, flags, float(doc["wall_seconds"]),
                      doc["artifact_version"], int(doc["schema_version"]), doc.get("extra", {}))


def load(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise SummaryFormatError(f"{path}: not a complete JSON document ({e})") from None
    return from_document(doc)

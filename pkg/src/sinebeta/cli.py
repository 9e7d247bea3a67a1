"""Command-line front end: ``sinebeta <subcommand> [flags]``.

Exit status: 0 success, 1 invalid input, 2 job failure.
"""

import argparse
import csv
import json
import math
import sys
import time

import numpy as np

from . import __version__
from .mcharness import (
    JobFailed,
    JobSpec,
    SummaryFormatError,
    dumps,
    load,
    run_job,
    write_records,
)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def fmt17(x):
    return format(float(x), ".17g")


def parse_grid(text):
    """``a:b:step`` (endpoints kept within half a step) or a comma list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid {text!r} is not of the form a:b:step")
        a, b, step = (float(p) for p in parts)
        if not (math.isfinite(a) and math.isfinite(b) and step > 0 and b >= a):
            raise ValueError(f"grid {text!r} needs finite a <= b and step > 0")
        count = int(math.floor((b - a) / step + 0.5))
        return [a + i * step for i in range(count + 1)]
    vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise ValueError("empty grid")
    return vals


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text):
    out = []
    for v in text.split(","):
        if v.strip():
            x = float(v)
            if x != int(x):
                raise ValueError(f"{v!r} is not an integer")
            out.append(int(x))
    return out


def _z0(text):
    z = complex(text.replace(" ", ""))
    if abs(abs(z) - 1.0) > 1e-9:
        raise ValueError("z0 must lie on the unit circle")
    return z


def _common(p):
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    g.add_argument("--paths", type=int, default=1000, help="number of paths (default 1000)")
    g.add_argument("--workers", type=int, default=1,
                   help="worker threads (default 1; capped by SINE_BETA_THREADS)")
    g.add_argument("--out", default=None, help="output file (default stdout)")
    g.add_argument("--format", choices=("json", "csv"), default="json",
                   help="json summary or per-path csv records (default json)")
    g.add_argument("--quiet", action="store_true", help="no progress on stderr")
    g.add_argument("--timing", action="store_true",
                   help="record wall_seconds (otherwise written as 0 so reruns are byte-identical)")
    g.add_argument("--records", action="store_true",
                   help="with --format json and --out, also write <out>.paths.csv")


def _solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--dt-max", type=float, default=None, help="largest step (default 1e-3)")
    g.add_argument("--tail-tol", type=float, default=None, help="tail tolerance (default 1e-4)")
    g.add_argument("--angle-tol", type=float, default=None, help="tube around 2 pi Z (default 0.05)")
    g.add_argument("--t-hard-max", type=float, default=None,
                   help="time cap (default 40 (4/beta)(1 + log(1 + lambda_max)))")
    g.add_argument("--max-refine", type=int, default=None, help="bridge splits per step (default 30)")
    g.add_argument("--below-margin", type=float, default=None,
                   help="'below' needs this gap at the window start (default 1e-3)")


def _solver_params(a):
    out = {}
    for k in ("dt_max", "tail_tol", "angle_tol", "t_hard_max", "max_refine", "below_margin"):
        v = getattr(a, k, None)
        if v is not None:
            out[k] = v
    return out


def build_parser():
    p = _Parser(prog="sinebeta", description="Sine-beta and beta-ensemble experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("sample-ensemble", help="emit one tridiagonal matrix")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--conjugated", action="store_true", help="emit X, Y, s instead")
    _common(s)
    s.set_defaults(format="csv")

    s = sub.add_parser("bulk-counts", help="finite-n scaled counting samples")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--mu", type=float, default=0.0)
    s.add_argument("--lambdas", type=parse_grid, required=True, help="a:b:step or comma list")
    s.add_argument("--alpha-t", type=float, default=None,
                   help="also record the relative phase at ell = floor(t n0)")
    _common(s)

    for name, help_ in (("sine-counts", "counts from the stochastic sine equation"),
                        ("carousel-counts", "counts from the Brownian carousel")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--beta", type=float, required=True)
        s.add_argument("--lambdas", type=parse_grid, required=True, help="a:b:step or comma list")
        if name == "carousel-counts":
            s.add_argument("--z0", type=_z0, default=complex(-1.0, 0.0),
                           help="boundary start, e.g. -1 or 0.6+0.8j (default -1)")
        else:
            s.add_argument("--single", action="store_true", help="one-lambda equation")
        _solver_flags(s)
        _common(s)

    s = sub.add_parser("gap-prob", help="gap probabilities and the slope fit")
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--lambda-list", type=_float_list, required=True)
    s.add_argument("--k", type=_int_list, default=[0], help="comma list (default 0)")
    _solver_flags(s)
    _common(s)

    s = sub.add_parser("phase-transition", help="approach classification per step size")
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--dt-list", type=_float_list, required=True)
    s.add_argument("--angle-tol", type=float, default=None)
    s.add_argument("--tail-tol", type=float, default=None)
    s.add_argument("--below-margin", type=float, default=None)
    _common(s)

    s = sub.add_parser("compare", help="two-sample report between persisted runs")
    s.add_argument("--file-a", required=True)
    s.add_argument("--file-b", required=True)
    s.add_argument("--key", action="append", default=None, help="cell key (default: all shared)")
    s.add_argument("--threshold", type=float, default=None, help="KS decision threshold")
    s.add_argument("--out", default=None)
    s.add_argument("--quiet", action="store_true")

    s = sub.add_parser("limit-sde", help="limiting phase SDE summary")
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--nu", default="inf", help="number or inf (default inf)")
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--t-grid", type=_float_list, default=[0.5])
    s.add_argument("--form", choices=("phase", "relative"), default="phase")
    s.add_argument("--dt-max", type=float, default=None)
    _common(s)

    s = sub.add_parser("selftest", help="exact invariant checks")
    s.add_argument("--quiet", action="store_true")
    return p


def _job(a):
    c = a.command
    if c == "bulk-counts":
        params = {"n": a.n, "beta": a.beta, "mu": a.mu, "lambdas": sorted(a.lambdas)}
        if a.alpha_t is not None:
            params["alpha_t"] = a.alpha_t
    elif c in ("sine-counts", "carousel-counts"):
        params = {"beta": a.beta, "lambdas": sorted(a.lambdas), **_solver_params(a)}
        if c == "carousel-counts":
            params["z0"] = [a.z0.real, a.z0.imag]
        elif a.single:
            params["single"] = True
    elif c == "gap-prob":
        params = {"beta": a.beta, "lambdas": sorted(a.lambda_list), "k": a.k, **_solver_params(a)}
    elif c == "phase-transition":
        params = {"beta": a.beta, "lambda": a.lam, "dt_list": a.dt_list, **_solver_params(a)}
    elif c == "limit-sde":
        params = {"beta": a.beta, "nu": a.nu, "lambda": a.lam, "t_grid": a.t_grid, "form": a.form}
        if a.dt_max is not None:
            params["dt_max"] = a.dt_max
    else:
        raise AssertionError(c)
    return JobSpec(c, params, a.paths, a.seed, a.workers, a.out)


def _write(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _sample_ensemble(a):
    from .ensemble import EnsembleParams, conjugate, sample_ensemble
    from .rng import RngStream

    if a.n < 2 or not a.beta > 0:
        raise ValueError("need n >= 2 and beta > 0")
    m = sample_ensemble(EnsembleParams(a.n, a.beta, 0.0, a.seed), RngStream(a.seed, 0))
    if a.conjugated:
        c = conjugate(m)
        cols = {"X": c.X, "Y": c.Y, "s": c.s}
    else:
        cols = {"diag": m.diag, "offdiag": np.append(m.offdiag, np.nan)}
    if a.format == "json":
        doc = {k: [None if math.isnan(x) else float(x) for x in v] for k, v in cols.items()}
        doc.update({"n": a.n, "beta": a.beta, "master_seed": a.seed,
                    "conjugated": bool(a.conjugated)})
        _write(json.dumps(doc) + "\n", a.out)
        return EXIT_OK
    rows = []
    names = list(cols)
    rows.append(",".join(["row"] + names))
    for i in range(a.n):
        rows.append(",".join([str(i)] + ["" if math.isnan(cols[k][i]) else fmt17(cols[k][i])
                                         for k in names]))
    _write("\n".join(rows) + "\n", a.out)
    return EXIT_OK


def _compare(a):
    from .pointstats import ks_two_sample

    sa, sb = load(a.file_a), load(a.file_b)
    keys = a.key or [c.key for c in sa.cells if any(d.key == c.key for d in sb.cells)]
    if not keys:
        raise ValueError("the two files share no cell keys")
    out = []
    for k in keys:
        try:
            xa, xb = sa.samples(k), sb.samples(k)
        except KeyError:
            raise ValueError(f"cell {k!r} missing from one of the files") from None
        r = ks_two_sample(xa, xb, a.threshold)
        out.append({"key": k, "ks_stat": r.ks_stat, "wasserstein1": r.wasserstein1,
                    "n1": r.n1, "n2": r.n2, "threshold": r.threshold, "passed": r.passed})
    doc = {"file_a": a.file_a, "file_b": a.file_b, "reports": out}
    _write(json.dumps(doc, indent=1) + "\n", a.out)
    failed = [r for r in out if r["passed"] is False]
    return EXIT_FAILED if failed else EXIT_OK


def _progress(quiet):
    if quiet:
        return None
    t0 = time.perf_counter()
    state = {"last": 0.0}

    def report(done, total):
        now = time.perf_counter()
        if done == total or now - state["last"] > 2.0:
            state["last"] = now
            print(f"  {done}/{total} paths  {now - t0:.1f}s", file=sys.stderr, flush=True)

    return report


_VALUE_FLAGS = ("--lambdas", "--lambda-list", "--lambda", "--mu", "--t-grid", "--z0")


def _attach_negative_values(argv):
    # argparse reads "-2,2" as an option; glue such values to their flag
    out = []
    it = iter(argv)
    for tok in it:
        if tok in _VALUE_FLAGS:
            nxt = next(it, None)
            if nxt is None:
                out.append(tok)
            elif nxt[:1] == "-" and nxt[1:2] in "0123456789.":
                out.append(f"{tok}={nxt}")
            else:
                out += [tok, nxt]
        else:
            out.append(tok)
    return out


def main(argv=None):
    parser = build_parser()
    argv = _attach_negative_values(sys.argv[1:] if argv is None else list(argv))
    try:
        a = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:
        # --help / --version
        return EXIT_OK if not e.code else EXIT_INVALID
    try:
        if a.command == "selftest":
            from .selftest import run_selftest
            return EXIT_OK if run_selftest(quiet=a.quiet) else EXIT_FAILED
        if a.command == "sample-ensemble":
            return _sample_ensemble(a)
        if a.command == "compare":
            return _compare(a)
        job = _job(a)
        job.validate()
    except (ValueError, SummaryFormatError, OSError, KeyError) as e:
        print(f"sinebeta: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        summary = run_job(job, progress=_progress(a.quiet))
    except JobFailed as e:
        print(f"sinebeta: job failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    if not a.quiet:
        print(f"  done in {summary.wall_seconds:.2f}s", file=sys.stderr)
    if not a.timing:
        summary.wall_seconds = 0.0
    try:
        if a.format == "csv":
            if a.out is None:
                write_records(summary, sys.stdout)
            else:
                write_records(summary, a.out)
        else:
            _write(dumps(summary), a.out)
            if a.records and a.out is not None:
                write_records(summary, f"{a.out}.paths.csv")
    except OSError as e:
        print(f"sinebeta: error: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

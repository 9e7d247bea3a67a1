"""Exact, non-statistical invariants used by ``sinebeta selftest``."""

import math
import sys

import numpy as np


def _ash_forms(rng, cases=2000):
    from .hyperbolic import MobiusMap, ash, ash_alternate, cayley, mobius_apply

    worst = 0.0
    for _ in range(cases):
        a, b, c = rng.normal(size=3)
        d = (1.0 + b * c) / a if abs(a) > 1e-3 else 1.0
        if abs(a) <= 1e-3:
            a, b, c = 1.0, 0.0, 0.0
        T = MobiusMap(a, b, c, d)
        v, w = np.exp(1j * rng.uniform(-math.pi, math.pi, 2))
        x = ash(T, v, w)
        y = ash_alternate(T, v, w)
        # direct definition: change of the angle difference under T
        tv = cayley(mobius_apply(T, _inv_cayley(v)))
        tw = cayley(mobius_apply(T, _inv_cayley(w)))
        direct = (np.angle(tw / tv) % (2 * math.pi)) - (np.angle(w / v) % (2 * math.pi))
        e1 = abs(math.remainder(x - y, 2 * math.pi))
        e2 = abs(math.remainder(x - direct, 2 * math.pi))
        worst = max(worst, e1, e2)
    return worst < 1e-10, f"max deviation {worst:.2e}"


def _inv_cayley(w):
    from .hyperbolic import cayley_inverse
    z = cayley_inverse(w)
    return z if not isinstance(z, complex) else complex(z.real, 0.0)


def _quasiperiodic(rng, cases=2000):
    from .hyperbolic import lifted_apply_affine

    a = np.exp(rng.normal(size=cases))
    b = rng.normal(size=cases)
    phi = rng.uniform(-20, 20, cases)
    d = lifted_apply_affine(a, b, phi + 2 * math.pi) - lifted_apply_affine(a, b, phi) - 2 * math.pi
    worst = float(np.max(np.abs(d)))
    return worst < 1e-12, f"max deviation {worst:.2e}"


def _counting(rng, mats=10):
    from .ensemble import EnsembleParams, conjugate, phase_count_below, sample_ensemble, sturm_count_below
    from .rng import RngStream

    bad = 0
    for i in range(mats):
        n = int(rng.integers(2, 60))
        m = sample_ensemble(EnsembleParams(n, 2.0), RngStream(11, i))
        c = conjugate(m)
        lo, hi = m.gershgorin()
        for Lam in rng.uniform(lo, hi, 10):
            bad += phase_count_below(c, Lam) != sturm_count_below(m, Lam)
    return bad == 0, f"{bad} mismatches"


def _rng_oracle():
    from .rng import RngStream, stream_key

    key = stream_key(3, 4)
    ref = np.random.Generator(np.random.Philox(key=key)).bit_generator.random_raw(8)
    ours = RngStream(3, 4).raw(8)
    return bool(np.array_equal(ref, ours)), "Philox words vs numpy"


def _sse_lattice():
    from .carousel import sse_increment, single_increment

    ok = sse_increment(0.0, 0.0, 0.3, 1e-3, 0.7, -0.2) == 0.0
    ok &= sse_increment(2 * math.pi * 3, 2.0, 0.5, 1e-3, 0.4, 0.9) == 2.0 * 0.5 * 1e-3 + (
        math.cos(6 * math.pi) - 1.0) * 0.4 + math.sin(6 * math.pi) * 0.9
    ok &= single_increment(0.0, 1.5, 0.2, 1e-3, 0.8) == 1.5 * 0.2 * 1e-3
    return bool(ok), "zero-lambda and lattice steps"


def _zero_lambda():
    from .carousel import IntensitySpec, solve_counts, carousel_counts
    from .rng import RngStream

    spec = IntensitySpec.exponential(2.0)
    r = solve_counts(spec, [0.0, 1.0], stream=RngStream(5, 0))
    s = carousel_counts(spec, [0.0, 1.0], stream=RngStream(5, 1))
    ok = r.counts[0] == 0 and r.alpha[0] == 0.0 and s.counts[0] == 0
    return bool(ok), "N(0) = 0 for both integrators"


def _stats():
    from .pointstats import gap_probability, ks_two_sample

    r = ks_two_sample([0, 0], [1, 1])
    g = gap_probability(np.zeros(10, int), 0)
    ok = r.ks_stat == 1.0 and r.wasserstein1 == 1.0 and g.p_hat == 1.0
    return bool(ok), "two-sample and gap estimator identities"


CHECKS = [
    ("ash closed forms agree with the direct definition", _ash_forms),
    ("lifted affine action is 2 pi quasiperiodic", _quasiperiodic),
    ("phase counts equal Sturm counts", _counting),
    ("Philox stream matches numpy", _rng_oracle),
    ("SSE steps at zero lambda and on the lattice", _sse_lattice),
    ("zero-lambda counts", _zero_lambda),
    ("estimator identities", _stats),
]


def run_selftest(quiet=False, out=sys.stdout):
    rng = np.random.default_rng(20240101)
    all_ok = True
    for name, fn in CHECKS:
        try:
            args = (rng,) if fn.__code__.co_argcount else ()
            ok, detail = fn(*args)
        except Exception as e:  # a crash is a failure, reported like one
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= ok
        if not quiet or not ok:
            print(f"{'PASS' if ok else 'FAIL'}  {name} ({detail})", file=out)
    return all_ok

import math

import numpy as np
import pytest
from scipy import integrate, stats

from sinebeta.carousel import (
    CarouselState,
    IntensitySpec,
    SolverConfig,
    SsePathState,
    augmented_grid,
    carousel_counts,
    carousel_rate,
    classify_approach,
    phase_limit_coefficients,
    simulate_single_path,
    solve_counts,
    solve_phase_limit_sde,
    solve_relative_phase_limit,
    sse_increment,
    step_carousel,
    step_coupled_sse,
    step_hyperbolic_bm,
    step_single_sse,
)
from sinebeta.mcharness import JobSpec, run_job
from sinebeta.rng import RngStream

TWO_PI = 2 * math.pi
PI = math.pi


def counts_job(lams, n, seed, beta=2.0, experiment="sine-counts", **extra):
    return run_job(JobSpec(experiment, {"beta": beta, "lambdas": list(lams), **extra}, n, seed))


@pytest.fixture(scope="module")
def coupled():
    return counts_job([PI, TWO_PI, 2 * TWO_PI], 10_000, 0)


# -- intensity ---------------------------------------------------------------------

def test_exponential_intensity_norms():
    for beta in (0.5, 2.0, 4.0):
        spec = IntensitySpec.exponential(beta)
        assert spec.l1 == 1.0
        assert spec.l2sq == beta / 8
        l1 = integrate.quad(spec.f, 0, np.inf)[0]
        l2 = integrate.quad(lambda t: spec.f(t) ** 2, 0, np.inf)[0]
        assert l1 == pytest.approx(1.0, rel=1e-9)
        assert l2 == pytest.approx(beta / 8, rel=1e-9)
        assert spec.tail(3.0) == pytest.approx(integrate.quad(spec.f, 3.0, np.inf)[0], rel=1e-9)


def test_tabulated_intensity():
    spec = IntensitySpec.tabulated([0, 1, 3], [2.0, 1.0, 0.0])
    assert spec.l1 == pytest.approx(1.5 + 1.0)
    assert spec.l2sq == pytest.approx(integrate.quad(lambda t: spec.f(t) ** 2, 0, 3, points=[1])[0])
    assert spec.tail(1.0) == pytest.approx(1.0)
    assert spec.tail(10.0) == 0.0
    assert spec.f(5.0) == 0.0
    for grid, vals in [([1, 2], [1, 1]), ([0, 0], [1, 1]), ([0, 1], [1, -1]), ([0, 1], [1])]:
        with pytest.raises(ValueError):
            IntensitySpec.tabulated(grid, vals)
    with pytest.raises(ValueError):
        IntensitySpec.exponential(0)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt_max=0)
    with pytest.raises(ValueError):
        SolverConfig(angle_tol=4.0)
    with pytest.raises(ValueError):
        SolverConfig(max_refine=-1)


def test_augmented_grid():
    full, idx = augmented_grid([-1.0, 2.0, 5.0])
    assert list(full) == [-1.0, 0.0, 2.0, 5.0]
    assert list(full[idx]) == [-1.0, 2.0, 5.0]
    full, idx = augmented_grid([0.0, 1.0])
    assert list(full) == [0.0, 1.0]
    with pytest.raises(ValueError):
        augmented_grid([2.0, 1.0])
    with pytest.raises(ValueError):
        augmented_grid([])


# -- single steps -----------------------------------------------------------------

def test_coupled_step_examples():
    h, lam, f, dt = 0.01, 3.0, 0.5, 1e-3
    assert sse_increment(PI, lam, f, dt, h, 0.0) == pytest.approx(lam * f * dt - 2 * h, abs=1e-17)
    # lattice: pure drift whatever the noise
    for a in (0.0, TWO_PI, -2 * TWO_PI):
        assert sse_increment(a, lam, f, dt, 0.3, -0.7) == pytest.approx(lam * f * dt, abs=1e-15)
    s = step_coupled_sse(SsePathState(0.0, np.zeros(3), np.array([0.0, 1.0, 2.0])),
                         np.array([0.0, 1.0, 2.0]), f, dt, 0.4 - 0.2j)
    assert s.alphas[0] == 0.0
    assert s.alphas[1] == pytest.approx(f * dt)
    assert s.t == dt


def test_single_step_examples():
    assert step_single_sse(0.0, 2.0, 0.5, 0.01, 0.3) == pytest.approx(0.01)
    assert step_single_sse(TWO_PI, 2.0, 0.5, 0.01, 0.3) == pytest.approx(TWO_PI + 0.01)
    assert step_single_sse(PI, 0.0, 0.5, 0.01, 0.3) == pytest.approx(PI + 0.6)


def test_hyperbolic_bm_step():
    B, clamped = step_hyperbolic_bm(0.0, 1e-3, 0.02 + 0.04j)
    assert B == pytest.approx(0.01 + 0.02j) and not clamped
    # near the circle the coefficient vanishes
    nb, _ = step_hyperbolic_bm(0.999999, 1e-3, 0.1)
    assert abs(nb - 0.999999) < 1e-7
    nb, clamped = step_hyperbolic_bm(0.9, 1e-3, 20.0)
    assert clamped and abs(nb) < 1
    with pytest.raises(ValueError):
        step_hyperbolic_bm(1.0, 1e-3, 0)


def test_carousel_rate_and_step():
    assert carousel_rate(0.7, 0.0, 0.0, 3.0, 0.5) == pytest.approx(1.5)
    assert carousel_rate(0.7, 0.3, -0.2, 0.0, 0.5) == 0.0
    st = CarouselState(0.0, 0.0j, np.array([1.0, 2.0]), np.array([0.0, 4.0]))
    nxt = step_carousel(st, 0.5, 0.01, 0.1j)
    assert nxt.gammas[0] == 1.0
    assert nxt.gammas[1] == pytest.approx(2.0 + 4.0 * 0.5 * 0.01)
    assert nxt.B == pytest.approx(0.05j)


def test_hyperbolic_distance_grows_like_half_time():
    rng_paths, T, dt = 200, 10.0, 2e-3
    steps = int(T / dt)
    d_half, d_end = [], []
    for p in range(rng_paths):
        s = RngStream(77, p)
        z = (s.normal(steps) + 1j * s.normal(steps)) * math.sqrt(dt)
        B = 0j
        for k in range(steps):
            B, _ = step_hyperbolic_bm(B, dt, z[k])
            if k == steps // 2 - 1:
                d_half.append(2 * math.atanh(abs(B)))
        d_end.append(2 * math.atanh(abs(B)))
    growth = np.mean(d_end) - np.mean(d_half)
    assert growth == pytest.approx(T / 4, abs=0.6)


# -- single-path solver ---------------------------------------------------------------

def test_zero_lambda_is_exactly_zero():
    spec = IntensitySpec.exponential(2.0)
    for single in (False, True):
        r = solve_counts(spec, [0.0, 3.0], stream=RngStream(1, 1), single=single)
        assert r.counts[0] == 0 and r.alpha[0] == 0.0 and r.converged[0]
    r = carousel_counts(spec, [0.0, 3.0], stream=RngStream(1, 1))
    assert r.counts[0] == 0 and r.converged[0]


def test_solver_result_shape_and_monotone_counts():
    spec = IntensitySpec.exponential(1.0)
    grid = [-8.0, -2.0, 1.0, 5.0, 12.0]
    for p in range(10):
        r = solve_counts(spec, grid, stream=RngStream(4, p))
        assert r.counts.shape == (5,)
        assert np.all(np.diff(r.counts) >= 0)
        assert np.all(r.counts[:2] <= 0) and np.all(r.counts[2:] >= 0)
        assert np.all(np.abs(r.alpha - TWO_PI * r.counts) < SolverConfig().angle_tol)


def test_solver_is_deterministic():
    spec = IntensitySpec.exponential(2.0)
    a = solve_counts(spec, [1.0, 7.0], stream=RngStream(9, 3))
    b = solve_counts(spec, [1.0, 7.0], stream=RngStream(9, 3))
    assert np.array_equal(a.alpha, b.alpha) and a.stop_time == b.stop_time


def test_hard_time_limit_sets_unconverged():
    spec = IntensitySpec.exponential(2.0)
    r = solve_counts(spec, [20.0], SolverConfig(t_hard_max=0.5), RngStream(0, 0))
    assert not r.converged[0] and r.flags & 1
    assert r.stop_time <= 0.5 + 1e-9


def test_carousel_rejects_interior_start():
    with pytest.raises(ValueError):
        carousel_counts(IntensitySpec.exponential(2.0), [1.0], z0=0.5)


# -- distributional checks --------------------------------------------------------------

@pytest.mark.parametrize("lam", [PI, TWO_PI, 2 * TWO_PI])
def test_expected_count(coupled, lam):
    c = coupled.cell(f"N({lam:.17g})")
    assert abs(c.mean - lam / TWO_PI) < 3 * c.stderr


def test_monotone_coupling_pathwise(coupled):
    v = coupled.records["values"]
    assert np.all(np.diff(v, axis=1) >= 0)
    assert coupled.flags["clamped"] == 0


def test_exponential_tail(coupled):
    # P(N >= a k) <= 2 (|f|_1 / (2 pi a))^k for the lambda = 4 pi counting variable
    n = coupled.records["values"][:, 2]
    lam = 2 * TWO_PI
    for a, k in [(3, 1), (3, 2), (4, 2), (5, 1)]:
        bound = 2 * (lam / (TWO_PI * a)) ** k
        p = np.mean(n >= a * k)
        se = math.sqrt(max(p * (1 - p), 1.0 / n.size) / n.size)
        assert p <= bound + 3 * se


def test_single_lambda_equation_has_the_same_law(coupled):
    single = counts_job([TWO_PI], 10_000, 1, single=True)
    res = stats.ks_2samp(single.samples(f"N({TWO_PI:.17g})"), coupled.records["values"][:, 1])
    assert res.statistic < 0.03


def test_carousel_matches_sse(coupled):
    car = counts_job([TWO_PI], 5000, 2, experiment="carousel-counts")
    assert car.flags["clamped"] == 0
    x = car.samples(f"N({TWO_PI:.17g})")
    assert stats.ks_2samp(x, coupled.records["values"][:5000, 1]).statistic <= 0.05
    c = car.cell(f"N({TWO_PI:.17g})")
    # 4 SE: one of many mean checks in the suite
    assert abs(c.mean - 1.0) < 4 * c.stderr


def test_carousel_start_point_does_not_change_the_law():
    a = counts_job([TWO_PI], 2000, 3, experiment="carousel-counts", z0=[0.0, 1.0])
    b = counts_job([TWO_PI], 2000, 4, experiment="carousel-counts")
    assert stats.ks_2samp(a.samples(f"N({TWO_PI:.17g})"),
                          b.samples(f"N({TWO_PI:.17g})")).pvalue > 1e-3


def test_translation_invariance(coupled):
    lam0 = 3.0
    r = counts_job([lam0, lam0 + TWO_PI], 5000, 5)
    v = r.records["values"]
    diff = v[:, 1] - v[:, 0]
    assert stats.ks_2samp(diff, coupled.records["values"][:5000, 1]).pvalue > 1e-3


def test_reflection_symmetry():
    r = counts_job([-TWO_PI, TWO_PI], 5000, 6)
    v = r.records["values"]
    assert stats.ks_2samp(-v[:, 0], v[:, 1]).pvalue > 1e-3


@pytest.mark.slow
def test_points_are_simple():
    # fraction of grid gaps holding >= 2 points shrinks at least like the
    # square of the gap width
    step = 0.01
    grid = np.round(np.arange(1, 315) * step, 10)
    r = counts_job(grid, 200, 7, beta=1.0)
    v = np.concatenate([np.zeros((200, 1), np.int64), r.records["values"]], axis=1)
    fracs = []
    for m in (4, 2, 1):
        d = v[:, m::m] - v[:, :-m:m][:, : v[:, m::m].shape[1]]
        fracs.append(np.mean(d >= 2))
    # per-gap probability of a single point is ~ width/(2 pi); doubles are rarer
    # than width^2 up to a constant
    for f, w in zip(fracs, (0.04, 0.02, 0.01)):
        assert f <= 2 * w * w + 3 * math.sqrt(w / TWO_PI / v.size)
    assert np.all(np.diff(r.records["values"], axis=1) >= 0)


# -- approach classification -------------------------------------------------------

def test_classify_approach_examples():
    cfg = SolverConfig()
    assert classify_approach(np.full(200, TWO_PI), cfg) == "above"
    up = TWO_PI + np.linspace(0.5, 0.0, 200)
    assert classify_approach(up, cfg) == "above"
    low = TWO_PI - np.linspace(0.04, 0.002, 200)
    assert classify_approach(low, cfg) == "below"
    assert classify_approach(TWO_PI - np.linspace(0.04, 0.0005, 200) + 0.0, cfg) == "below"
    tiny = TWO_PI - np.full(200, 1e-4)
    assert classify_approach(tiny, cfg) == "undecided"
    assert classify_approach(np.full(10, 3.0), cfg) == "undecided"
    assert classify_approach(np.full(10, TWO_PI), cfg, converged=False) == "undecided"
    # the window starts after the last crossing of the level
    cross = TWO_PI + np.concatenate([np.linspace(-0.03, 0.01, 50), np.linspace(0.01, 0.0, 50)])
    assert classify_approach(cross, cfg) == "above"


def test_recorded_single_path():
    t, a = simulate_single_path(2.0, 4.0, stream=RngStream(2, 0), t_end=5.0, record_dt=0.01)
    assert t.shape == a.shape and a[0] == 0.0
    t0, a0 = simulate_single_path(2.0, 0.0, stream=RngStream(2, 0), t_end=1.0)
    assert np.all(a0 == 0)


# -- time-changed limits ----------------------------------------------------------------

def test_relative_limit_zero_lambda():
    _, a = solve_relative_phase_limit(2.0, 0.0, stream=RngStream(0, 0), t_grid=[0.1, 0.5, 0.9])
    assert np.all(a == 0)
    with pytest.raises(ValueError):
        solve_relative_phase_limit(2.0, 1.0, t_grid=[1.0])


def test_relative_limit_terminal_law_matches_counts(coupled):
    eps = 1e-9
    r = run_job(JobSpec("limit-sde", {"beta": 2.0, "lambda": TWO_PI, "form": "relative",
                                      "t_grid": [1 - eps]}, 3000, 8))
    alpha = r.records["values"][:, 0]
    n = np.rint(alpha / TWO_PI)
    assert stats.ks_2samp(n, coupled.records["values"][:3000, 1]).pvalue > 1e-3


def test_relative_limit_monotone_in_lambda():
    grid = [0.2, 0.6, 0.95]
    a = [solve_relative_phase_limit(1.0, lam, stream=RngStream(3, 5), t_grid=grid)[1]
         for lam in (1.0, 2.0, 5.0)]
    # separate runs share the stream, so this is the coupled system read at
    # one lambda at a time
    assert np.all(a[0] <= a[1]) and np.all(a[1] <= a[2])


def test_phase_limit_coefficients_at_infinity():
    drift, cz, cb = phase_limit_coefficients(math.inf, 2.0, 0.0, 0.0)
    assert drift == 0.0
    assert cz == pytest.approx(math.sqrt(2 / 2.0))
    assert cb == pytest.approx(2 / math.sqrt(2.0))
    _, phi = solve_phase_limit_sde(math.inf, 1.0, 2.0, stream=RngStream(0, 0), t_grid=[0.0, 0.3])
    assert phi[0] == PI


def test_phase_limit_mean_increment_matches_quadrature():
    beta, nu, lam = 1.0, 1.0, 1.0

    def drift_dt(t):
        return (lam / 2 + (1 / beta - 0.5) * math.sqrt(nu) / (nu + 1 - t)) / math.sqrt(1 - t)

    expected = integrate.quad(drift_dt, 0, 0.5)[0]
    r = run_job(JobSpec("limit-sde", {"beta": beta, "lambda": lam, "nu": nu, "form": "phase",
                                      "t_grid": [0.5]}, 4000, 9))
    c = r.cell("phi(0.5)")
    assert abs(c.mean - PI - expected) < 3 * c.stderr

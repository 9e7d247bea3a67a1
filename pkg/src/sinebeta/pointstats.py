"""Estimators over explicit count samples.

Nothing in here simulates: every function takes sample arrays, so each
one can be checked on synthetic data.  Confidence intervals are Wilson
score intervals at 95%.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

Z95 = 1.959963984540054
SOURCES = ("finite-n", "sse", "carousel", "synthetic")


@dataclass(frozen=True)
class EmpiricalCounts:
    lam: float
    samples: np.ndarray
    source: str = "sse"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 1:
            raise ValueError("samples must be 1-d")
        if s.size and not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        object.__setattr__(self, "samples", s)

    @property
    def n(self):
        return int(self.samples.size)


@dataclass(frozen=True)
class GapEstimate:
    lam: float
    k: int
    p_hat: float
    ci_low: float
    ci_high: float
    n: int
    neg_log_p: float = None


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    lambdas: tuple
    excluded: tuple = ()

    def within(self, lo, hi):
        return lo <= self.slope <= hi


@dataclass(frozen=True)
class TailCheck:
    passed: bool
    frequency: float
    bound: float
    stderr: float
    margin: float


@dataclass(frozen=True)
class TwoSampleReport:
    ks_stat: float
    wasserstein1: float
    n1: int
    n2: int
    threshold: float = None

    @property
    def passed(self):
        return None if self.threshold is None else self.ks_stat <= self.threshold


@dataclass(frozen=True)
class LipschitzReport:
    passed: bool
    mean_abs_diff: float
    mean_diff: float
    stderr: float
    bound: float
    expected_mean: float
    mean_ok: bool
    wasserstein1: float


def wilson_interval(successes, n, z=Z95):
    if n <= 0:
        raise ValueError("need at least one sample")
    p = successes / n
    z2 = z * z
    den = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / den
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def _as_counts(samples):
    if isinstance(samples, EmpiricalCounts):
        return samples.lam, samples.samples
    return float("nan"), np.asarray(samples)


def gap_probability(samples, k):
    """P(N <= k) with a Wilson interval; p_hat = 0 gets the 3/n upper bound."""
    if int(k) != k or k < 0:
        raise ValueError("k must be a nonnegative integer")
    lam, s = _as_counts(samples)
    n = s.size
    if n == 0:
        raise ValueError("empty sample")
    hits = int(np.count_nonzero(s <= k))
    p = hits / n
    if hits == 0:
        return GapEstimate(lam, int(k), 0.0, 0.0, min(1.0, 3.0 / n), n, None)
    lo, hi = wilson_interval(hits, n)
    lo, hi = min(lo, p), max(hi, p)
    return GapEstimate(lam, int(k), p, lo, hi, n, -math.log(p))


def gap_slope_fit(estimates):
    """Weighted least squares of -log p_hat against lambda^2 (with intercept).

    Weights come from the delta method, var(-log p_hat) ~ (1 - p)/(n p).
    Points with p_hat = 0 are dropped with a warning.
    """
    keep, dropped = [], []
    for e in estimates:
        (keep if e.p_hat > 0 else dropped).append(e)
    if dropped:
        warnings.warn(f"dropping {len(dropped)} estimate(s) with p_hat = 0 from the slope fit",
                      stacklevel=2)
    if len(keep) < 3:
        raise ValueError("need at least 3 estimates with p_hat > 0")
    x = np.array([e.lam ** 2 for e in keep], dtype=float)
    y = np.array([e.neg_log_p for e in keep], dtype=float)
    var = np.array([max(1.0 - e.p_hat, 1.0 / e.n) / (e.n * e.p_hat) for e in keep])
    w = 1.0 / var
    sw = w.sum()
    xm = (w * x).sum() / sw
    ym = (w * y).sum() / sw
    sxx = (w * (x - xm) ** 2).sum()
    if not sxx > 0:
        raise ValueError("lambda values must not all coincide")
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    return SlopeFit(float(slope), float(math.sqrt(1.0 / sxx)), float(ym - slope * xm),
                    tuple(e.lam for e in keep), tuple(e.lam for e in dropped))


def tail_bound_check(samples, a, k, f_l1):
    """Empirical P(|N| >= a k) against 2 (||f||_1 / (2 pi a))^k + 3 SE."""
    if int(a) != a or int(k) != k or a < 1 or k < 1:
        raise ValueError("a and k must be integers >= 1")
    _, s = _as_counts(samples)
    n = s.size
    bound = 2.0 * (f_l1 / (2.0 * math.pi * a)) ** k
    if n == 0:
        return TailCheck(True, 0.0, bound, 0.0, bound)
    freq = float(np.count_nonzero(np.abs(s) >= a * k)) / n
    se = math.sqrt(freq * (1.0 - freq) / n)
    margin = bound + 3.0 * se - freq
    return TailCheck(bool(margin >= 0.0), freq, bound, se, margin)


def _cdfs(a, b):
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    support = np.union1d(a, b)
    fa = np.searchsorted(a, support, side="right") / a.size
    fb = np.searchsorted(b, support, side="right") / b.size
    return support, fa, fb


def ks_two_sample(a, b, threshold=None):
    """KS distance and W1 between two empirical laws.

    Both are read off the two CDFs on the pooled support.  For integer
    samples W1 is the sum over integers of |F_a - F_b|; the same gap-weighted
    sum is the 1-d W1 for real-valued samples too.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    support, fa, fb = _cdfs(a, b)
    diff = np.abs(fa - fb)
    ks = float(diff.max())
    w1 = math.fsum(diff[:-1] * np.diff(support))
    return TwoSampleReport(ks, float(w1), int(a.size), int(b.size), threshold)


def lipschitz_continuity_check(n_low, n_high, lambda1, lambda2, f_l1=1.0):
    """Coupled samples N(lambda1), N(lambda2) on the same paths.

    Passes when E|N(l2) - N(l1)| <= (l2 - l1) ||f||_1 + 3 SE.  The mean
    identity E(N(l2) - N(l1)) = (l2 - l1) ||f||_1 / (2 pi) is reported as
    ``mean_ok`` (within 3 SE).
    """
    if not lambda1 <= lambda2:
        raise ValueError("need lambda1 <= lambda2")
    lo = np.asarray(n_low, dtype=float)
    hi = np.asarray(n_high, dtype=float)
    if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
        raise ValueError("coupled samples must be equal-length nonempty 1-d arrays")
    d = hi - lo
    n = d.size
    ad = np.abs(d)
    mean_abs = math.fsum(ad) / n
    mean = math.fsum(d) / n
    se_abs = float(ad.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    se = float(d.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    gap = (lambda2 - lambda1) * f_l1
    expected = gap / (2.0 * math.pi)
    w1 = ks_two_sample(lo, hi).wasserstein1
    passed = mean_abs <= gap + 3.0 * se_abs and w1 <= gap + 3.0 * se_abs
    return LipschitzReport(bool(passed), mean_abs, mean, se, gap, expected,
                           bool(abs(mean - expected) <= 3.0 * se + 1e-15), float(w1))


def fraction_ci(hits, n):
    """Fraction with its Wilson interval, as a tuple (p, lo, hi)."""
    lo, hi = wilson_interval(hits, n)
    p = hits / n
    return p, min(lo, p), max(hi, p)

"""Tridiagonal beta-ensemble, lifted phase recursions and eigenvalue counting.

Index convention (0-based).  For size n the matrix M has

    diag[j]    ~ N(0, 2) / sqrt(beta)                 j = 0..n-1
    offdiag[j] ~ chi_{(n-1-j) beta} / sqrt(beta)      j = 0..n-2, couples rows j, j+1

so for n = 3 the offdiagonals carry chi_{2 beta} and chi_{beta}.

The conjugated model uses s_j = sqrt(n - j - 1/2) and

    X_j = diag[j],   Y_j = offdiag[j]**2 / s_{j+1} - s_j,   Y_{n-1} = 0,

which is a diagonal similarity of M (same spectrum).  With it the
eigenvector ratio obeys r_{j+1} = (-1/r_j + (Lam - X_j)/s_j) / (1 + Y_j/s_j),
r_0 = INF, and Lam is an eigenvalue iff r_n = 0.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .hyperbolic import lift_affine
from .rng import RngStream, init_state, next_chi, next_normal


@dataclass(frozen=True)
class EnsembleParams:
    n: int
    beta: float
    mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    @property
    def n0(self):
        return self.n - self.mu**2 / 4.0 - 0.5

    @property
    def edge_distance(self):
        """n^(1/6) (2 sqrt(n) - |mu|); should be large for bulk experiments."""
        return self.n ** (1.0 / 6.0) * (2.0 * math.sqrt(self.n) - abs(self.mu))

    def Lambda(self, lam):
        """Spectral parameter for the local coordinate lam."""
        n0 = self.n0
        if not n0 > 0:
            raise ValueError(f"n0 = {n0!r} must be positive")
        return self.mu + np.asarray(lam, dtype=float) / (2.0 * math.sqrt(n0))


@dataclass(frozen=True)
class TridiagonalSymmetric:
    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.diag, dtype=float)
        o = np.ascontiguousarray(self.offdiag, dtype=float)
        if o.shape != (max(d.shape[0] - 1, 0),):
            raise ValueError("offdiag must have length len(diag) - 1")
        if np.any(~(o > 0)):
            raise ValueError("offdiagonal entries must be positive")
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "offdiag", o)

    @property
    def n(self):
        return self.diag.shape[0]

    def dense(self):
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)

    def gershgorin(self):
        off = np.zeros(self.n)
        off[:-1] += self.offdiag
        off[1:] += self.offdiag
        return float(np.min(self.diag - off)), float(np.max(self.diag + off))


@dataclass(frozen=True)
class ConjugatedModel:
    X: np.ndarray
    Y: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        Y = np.ascontiguousarray(self.Y, dtype=float).copy()
        s = np.ascontiguousarray(self.s, dtype=float)
        if not X.shape == Y.shape == s.shape or X.ndim != 1:
            raise ValueError("X, Y, s must be 1-d arrays of equal length")
        if np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("s must be positive and strictly decreasing")
        Y[-1] = 0.0
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "s", s)

    @property
    def n(self):
        return self.X.shape[0]

    def matrix(self):
        """The symmetric tridiagonal matrix this model is conjugate to."""
        b2 = self.s[1:] * (self.s[:-1] + self.Y[:-1])
        return TridiagonalSymmetric(self.X, np.sqrt(b2))


def s_coefficients(n):
    return np.sqrt(n - np.arange(n) - 0.5)


def conjugate(matrix):
    """ConjugatedModel sharing the spectrum of ``matrix``."""
    n = matrix.n
    s = s_coefficients(n)
    Y = np.zeros(n)
    Y[:-1] = matrix.offdiag**2 / s[1:] - s[:-1]
    return ConjugatedModel(matrix.diag.copy(), Y, s)


@dataclass(frozen=True)
class PhaseTrajectory:
    parameter: float
    phases: np.ndarray
    kind: str


@dataclass(frozen=True)
class RegularizedPhaseState:
    ell: int
    rho: complex
    eta: complex
    phi: float
    phi0: float

    @property
    def alpha(self):
        return self.phi - self.phi0


@dataclass(frozen=True)
class CountingSample:
    lambdas: np.ndarray
    counts: np.ndarray
    scaling: dict = field(default_factory=dict)


# -- sampling ---------------------------------------------------------------

@njit(cache=True, nogil=True)
def _sample_tridiag(state, spare, n, beta, diag, off):
    sd = math.sqrt(2.0 / beta)
    rb = 1.0 / math.sqrt(beta)
    for j in range(n):
        diag[j] = sd * next_normal(state, spare)
    for j in range(n - 1):
        off[j] = rb * next_chi(state, spare, (n - 1 - j) * beta)


def _stream(params, stream):
    if stream is None:
        return RngStream(params.seed, 0)
    return stream


def sample_ensemble(params, stream=None):
    """One draw of M(n); ``stream`` defaults to path 0 of ``params.seed``."""
    stream = _stream(params, stream)
    n = int(params.n)
    diag = np.empty(n)
    off = np.empty(n - 1)
    _sample_tridiag(stream.state, stream.spare, n, float(params.beta), diag, off)
    return TridiagonalSymmetric(diag, off)


def sample_conjugated(params, stream=None):
    """Conjugated form of the draw :func:`sample_ensemble` would produce."""
    return conjugate(sample_ensemble(params, stream))


# -- lifted phase recursions -------------------------------------------------

@njit(cache=True, nogil=True)
def _wild_forward(X, Y, s, Lam, out):
    n = X.shape[0]
    phi = math.pi
    out[0] = phi
    for j in range(n):
        c = 1.0 + Y[j] / s[j]
        if not c > 0.0:
            return j
        phi = lift_affine(1.0 / c, (Lam - X[j]) / s[j], phi + math.pi)
        out[j + 1] = phi
    return -1


@njit(cache=True, nogil=True)
def _wild_final(X, Y, s, Lam):
    phi = math.pi
    for j in range(X.shape[0]):
        c = 1.0 + Y[j] / s[j]
        phi = lift_affine(1.0 / c, (Lam - X[j]) / s[j], phi + math.pi)
    return phi


@njit(cache=True, nogil=True)
def _target_backward(X, Y, s, Lam, ell):
    phi = 0.0
    for j in range(X.shape[0] - 1, ell - 1, -1):
        c = 1.0 / (1.0 + Y[j] / s[j])
        phi = lift_affine(1.0 / c, -c * (Lam - X[j]) / s[j], phi) - math.pi
    return phi


def _check_model(model):
    bad = np.nonzero(~(1.0 + model.Y / model.s > 0))[0]
    if bad.size:
        raise ValueError(f"invalid sample: 1 + Y/s <= 0 at index {int(bad[0])}")


def wild_phase_forward(model, Lambda):
    """Lifted phases phi_hat_0 = pi, ..., phi_hat_n of the ratio recursion."""
    _check_model(model)
    out = np.empty(model.n + 1)
    _wild_forward(model.X, model.Y, model.s, float(Lambda), out)
    return PhaseTrajectory(float(Lambda), out, "wild-forward")


def target_phase_backward(model, Lambda, ell):
    """phi_hat_target at index ``ell``, from 0 at index n."""
    if not 0 <= ell <= model.n:
        raise ValueError(f"ell must be in [0, {model.n}], got {ell!r}")
    _check_model(model)
    return float(_target_backward(model.X, model.Y, model.s, float(Lambda), int(ell)))


# -- counting ----------------------------------------------------------------

@njit(cache=True, nogil=True)
def _sturm(diag, off, Lam, pivmin):
    n = diag.shape[0]
    count = 0
    # a vanishing pivot is pushed positive, so an eigenvalue equal to Lam
    # is not counted
    d = diag[0] - Lam
    if abs(d) < pivmin:
        d = pivmin
    if d < 0.0:
        count += 1
    for j in range(1, n):
        d = (diag[j] - Lam) - off[j - 1] * off[j - 1] / d
        if abs(d) < pivmin:
            d = pivmin
        if d < 0.0:
            count += 1
    return count


def _pivmin(matrix):
    big = max(1.0, float(np.max(matrix.offdiag**2)) if matrix.n > 1 else 1.0)
    return np.finfo(float).tiny / np.finfo(float).eps * big


def sturm_count_below(matrix, Lambda):
    """Number of eigenvalues strictly below ``Lambda`` (Sturm sequence)."""
    return int(_sturm(matrix.diag, matrix.offdiag, float(Lambda), _pivmin(matrix)))


def _phase_baseline(model):
    lo, _ = model.matrix().gershgorin()
    return lo - 1.0


def phase_count_below(model, Lambda):
    """Eigenvalues strictly below ``Lambda`` from the winding of phi_hat_n.

    phi_hat_n is increasing in Lambda and hits 2 pi Z exactly at
    eigenvalues, so the count is the number of 2 pi levels passed since a
    baseline below the whole spectrum.
    """
    _check_model(model)
    lo = _phase_baseline(model)
    Lambda = float(Lambda)
    if Lambda <= lo:
        return 0
    top = _wild_final(model.X, model.Y, model.s, Lambda)
    base = _wild_final(model.X, model.Y, model.s, lo)
    return int(math.ceil(top / (2 * math.pi)) - math.ceil(base / (2 * math.pi)))


def _count_at_most(matrix, x, pivmin):
    return _sturm(matrix.diag, matrix.offdiag, float(np.nextafter(x, np.inf)), pivmin)


def eigenvalues_in_window(matrix, center, halfwidth, tol=None):
    """Eigenvalues in [center - halfwidth, center + halfwidth] by bisection."""
    if not halfwidth > 0:
        raise ValueError("halfwidth must be positive")
    lo_g, hi_g = matrix.gershgorin()
    if tol is None:
        tol = 1e-10 * max(1.0, 0.5 * (hi_g - lo_g))
    if not tol > 0:
        raise ValueError("tol must be positive")
    pivmin = _pivmin(matrix)
    a = max(center - halfwidth, lo_g - 1.0)
    b = min(center + halfwidth, hi_g + 1.0)
    if a > b:
        return np.empty(0)
    k_lo = _sturm(matrix.diag, matrix.offdiag, a, pivmin)
    k_hi = _count_at_most(matrix, b, pivmin)
    out = np.empty(k_hi - k_lo)
    for i, k in enumerate(range(k_lo, k_hi)):
        # bracket the (k+1)-th smallest eigenvalue: count(lo) <= k < count(hi)
        lo, hi = a, float(np.nextafter(b, np.inf))
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if _sturm(matrix.diag, matrix.offdiag, mid, pivmin) > k:
                hi = mid
            else:
                lo = mid
        out[i] = min(max(0.5 * (lo + hi), a), b)
    return out


@njit(cache=True, nogil=True)
def _counts_at_most(diag, off, Lams, pivmin, out):
    for i in range(Lams.shape[0]):
        x = np.nextafter(Lams[i], np.inf)
        out[i] = _sturm(diag, off, x, pivmin)


@njit(cache=True, nogil=True)
def bulk_counts_path(state, spare, n, beta, Lams, Lam0, diag, off, out):
    """Kernel: one matrix draw, then N(lam) = #eig <= Lam(lam) - #eig <= Lam(0)."""
    _sample_tridiag(state, spare, n, beta, diag, off)
    big = 1.0
    for j in range(n - 1):
        if off[j] * off[j] > big:
            big = off[j] * off[j]
    pivmin = 2.2250738585072014e-308 / 2.220446049250313e-16 * big
    base = _sturm(diag, off, np.nextafter(Lam0, np.inf), pivmin)
    for i in range(Lams.shape[0]):
        out[i] = _sturm(diag, off, np.nextafter(Lams[i], np.inf), pivmin) - base


def scaled_counting_sample(params, stream=None, lambdas=(0.0,)):
    """Counting function of one matrix draw in the local coordinate lam."""
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.ndim != 1 or np.any(np.diff(lambdas) < 0):
        raise ValueError("lambdas must be a sorted 1-d grid")
    stream = _stream(params, stream)
    n = int(params.n)
    Lams = np.ascontiguousarray(params.Lambda(lambdas), dtype=float)
    counts = np.empty(lambdas.shape[0], dtype=np.int64)
    bulk_counts_path(stream.state, stream.spare, n, float(params.beta), Lams,
                     float(params.mu), np.empty(n), np.empty(max(n - 1, 0)), counts)
    scaling = {"mu": float(params.mu), "n0": params.n0, "factor": 2.0 * math.sqrt(params.n0)}
    return CountingSample(lambdas, counts, scaling)


# -- regularized and relative phase ------------------------------------------

def rho_ell(ell, n0, mu):
    """Unit-modulus fixed point rho_ell in the closed upper half-plane."""
    if not 0 <= ell <= n0:
        raise ValueError(f"ell = {ell!r} outside [0, n0 = {n0!r}]")
    den = mu * mu / 4.0 + n0 - ell
    # signed real part: the fixed point of r -> -1/r + mu/s_ell has Re = mu / (2 s_ell)
    return complex(0.5 * mu / math.sqrt(den), math.sqrt((n0 - ell) / den))


def last_index(n0):
    """Largest ell with a state: steps need Im rho_{ell} > 0 at the target index."""
    top = math.floor(n0)
    return top - 1 if top == n0 else top


@njit(cache=True, nogil=True)
def _regularized(X, Y, s, n0, mu, lam, steps, phi_out):
    q = mu * mu / 4.0
    c_lam = lam / (2.0 * math.sqrt(n0))
    phi = math.pi
    phi_out[0] = phi
    theta = 0.0
    den = q + n0
    re0 = 0.5 * mu / math.sqrt(den)
    im0 = math.sqrt(n0 / den)
    for j in range(steps):
        den1 = q + n0 - (j + 1)
        re1 = 0.5 * mu / math.sqrt(den1)
        im1 = math.sqrt((n0 - (j + 1)) / den1)
        theta += 2.0 * math.atan2(im0, re0)
        w = 1.0 + Y[j] / s[j]
        p = im0 / (w * im1)
        qq = ((re0 + c_lam / s[j] - X[j] / s[j]) / w - re1) / im1
        # phi + ash(S, -1, e^{i(phi - theta)}) == lift of S at (phi - theta), shifted back
        phi = lift_affine(p, qq / p, phi - theta) + theta
        phi_out[j + 1] = phi
        re0 = re1
        im0 = im1
    return theta


def regularized_phase_arrays(model, params, lam, steps=None):
    """Arrays (phi, eta) of the regularized phase for ell = 0..steps."""
    n0 = params.n0
    if model.n != params.n:
        raise ValueError("model size does not match params.n")
    top = last_index(n0)
    if steps is None:
        steps = top
    if not 0 <= steps <= top:
        raise ValueError(f"ell beyond {top} is outside the rotation regime")
    _check_model(model)
    phi = np.empty(steps + 1)
    _regularized(model.X, model.Y, model.s, float(n0), float(params.mu), float(lam), int(steps), phi)
    rho = np.array([rho_ell(j, n0, params.mu) for j in range(steps + 1)])
    eta = np.cumprod(rho**2)
    return phi, rho, eta


def regularized_phase_run(model, params, lam, steps=None):
    """RegularizedPhaseState for ell = 0..steps (default: the whole range)."""
    phi, rho, eta = regularized_phase_arrays(model, params, lam, steps)
    phi0, _, _ = regularized_phase_arrays(model, params, 0.0, steps)
    return [RegularizedPhaseState(j, complex(rho[j]), complex(eta[j]), float(phi[j]), float(phi0[j]))
            for j in range(phi.shape[0])]


def wild_from_regularized(phi_ell, ell, n0, mu):
    """Recover phi_hat_ell from phi_ell: undo the rotations, then T_ell.

    The lifted J_ell equals T_ell Q(2 pi - 2 Arg rho_ell) T_ell^-1, so the
    factored-out rotation is theta_{ell-1} - 2 pi ell.
    """
    theta = 0.0
    for j in range(ell):
        r = rho_ell(j, n0, mu)
        theta += 2.0 * math.atan2(r.imag, r.real)
    r = rho_ell(ell, n0, mu)
    psi = phi_ell - theta + 2.0 * math.pi * ell
    # T_ell^-1 = A(Im rho, Re rho / Im rho)
    return lift_affine(r.imag, r.real / r.imag, psi)


def valve_check(states):
    """True iff floor(alpha / 2 pi) never decreases along the run."""
    alpha = np.array([st.alpha for st in states]) if not isinstance(states, np.ndarray) else states
    levels = np.floor(alpha / (2 * math.pi))
    return bool(np.all(np.diff(levels) >= 0))


@njit(cache=True, nogil=True)
def relative_phase_path(state, spare, n, beta, mu, lam, steps, diag, off, phi, phi0):
    """Kernel: one draw, alpha_{steps, lam} of the regularized phase."""
    _sample_tridiag(state, spare, n, beta, diag, off)
    X = diag
    s = np.empty(n)
    Y = np.zeros(n)
    for j in range(n):
        s[j] = math.sqrt(n - j - 0.5)
    for j in range(n - 1):
        Y[j] = off[j] * off[j] / s[j + 1] - s[j]
    n0 = n - mu * mu / 4.0 - 0.5
    _regularized(X, Y, s, n0, mu, lam, steps, phi)
    _regularized(X, Y, s, n0, mu, 0.0, steps, phi0)
    return phi[steps] - phi0[steps]


@njit(cache=True, nogil=True)
def bulk_chunk(seed, start, stop, n, beta, mu, Lams, lam_grid, steps, counts, alphas):
    """Paths start..stop-1: counts on the Lambda grid and, if steps >= 0,
    the relative phase alpha_{steps, lam} of the same draw for every lam."""
    st = np.zeros(11, np.uint64)
    spare = np.zeros(2)
    diag = np.empty(n)
    off = np.empty(max(n - 1, 0))
    s = np.empty(n)
    Y = np.zeros(n)
    for j in range(n):
        s[j] = math.sqrt(n - j - 0.5)
    n0 = n - mu * mu / 4.0 - 0.5
    phi = np.empty(max(steps, 0) + 1)
    phi0 = np.empty(max(steps, 0) + 1)
    for p in range(start, stop):
        i = p - start
        init_state(st, spare, seed, p)
        bulk_counts_path(st, spare, n, beta, Lams, mu, diag, off, counts[i])
        if steps >= 0:
            for j in range(n - 1):
                Y[j] = off[j] * off[j] / s[j + 1] - s[j]
            _regularized(diag, Y, s, n0, mu, 0.0, steps, phi0)
            for k in range(lam_grid.shape[0]):
                _regularized(diag, Y, s, n0, mu, lam_grid[k], steps, phi)
                alphas[i, k] = phi[steps] - phi0[steps]

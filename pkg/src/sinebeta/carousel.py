"""Integrators for the stochastic sine equation and the Brownian carousel.

All path simulators are numba kernels that draw from a per-path
:class:`~sinebeta.rng.RngStream`.  A kernel reads Gaussians through a
small buffer (``fill_normals``), so the sequence consumed by a path is the
stream's Gaussian sequence in order, whatever the chunking.

Flag bits returned by the path kernels are listed in ``FLAG_*``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .rng import RngStream, fill_normals, init_state as _init

TWO_PI = 2.0 * math.pi

FLAG_UNCONVERGED = 1
FLAG_CLAMPED = 2
FLAG_REFINE_LIMIT = 4
FLAG_VALVE = 8
FLAG_CENSORED = 16
FLAG_NONFINITE = 32

ABOVE, UNDECIDED, BELOW = 1, 0, -1
APPROACH_NAMES = {ABOVE: "above", UNDECIDED: "undecided", BELOW: "below"}

_NBUF = 256
_CLAMP = 1.0 - 1e-9


# -- intensity ---------------------------------------------------------------

@dataclass(frozen=True)
class IntensitySpec:
    """Rate function f(t) >= 0: exponential (beta/4) e^{-beta t/4} or tabulated."""

    kind: str
    beta: float = float("nan")
    grid: np.ndarray = None
    values: np.ndarray = None

    @classmethod
    def exponential(cls, beta):
        if not beta > 0:
            raise ValueError(f"beta must be positive, got {beta!r}")
        return cls("exponential", float(beta))

    @classmethod
    def tabulated(cls, grid, values):
        """Piecewise-linear f on ``grid`` (starting at 0), zero afterwards."""
        grid = np.ascontiguousarray(grid, dtype=float)
        values = np.ascontiguousarray(values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or grid.shape[0] < 2:
            raise ValueError("grid and values must be 1-d arrays of equal length >= 2")
        if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must start at 0 and be strictly increasing")
        if np.any(~np.isfinite(values)) or np.any(values < 0):
            raise ValueError("values must be finite and nonnegative")
        return cls("tabulated", float("nan"), grid, values)

    def __post_init__(self):
        if self.kind not in ("exponential", "tabulated"):
            raise ValueError(f"unknown intensity kind {self.kind!r}")

    def f(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "exponential":
            return self.beta / 4.0 * np.exp(-self.beta * t / 4.0)
        return np.interp(t, self.grid, self.values, right=0.0)

    def tail(self, t):
        """Integral of f over [t, inf)."""
        if self.kind == "exponential":
            return np.exp(-self.beta * np.asarray(t, dtype=float) / 4.0)
        out = [_intensity(1, 0.0, self.grid, self.values, self._tails(), float(x))[1]
               for x in np.atleast_1d(t)]
        return np.asarray(out).reshape(np.shape(t))

    def _tails(self):
        seg = 0.5 * np.diff(self.grid) * (self.values[1:] + self.values[:-1])
        return np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])

    @property
    def l1(self):
        return 1.0 if self.kind == "exponential" else float(self._tails()[0])

    @property
    def l2sq(self):
        if self.kind == "exponential":
            return self.beta / 8.0
        # exact for piecewise-linear f
        a, b = self.values[:-1], self.values[1:]
        return float(np.sum(np.diff(self.grid) * (a * a + a * b + b * b) / 3.0))

    def decay_constant(self):
        """Smallest c with f(t) <= c / (1 + t^2) on the table (or closed form)."""
        if self.kind == "exponential":
            t = np.linspace(0.0, 200.0 / self.beta, 20001)
            return float(np.max(self.f(t) * (1 + t * t)))
        return float(np.max(self.values * (1 + self.grid**2)))

    def total_variation(self):
        if self.kind == "exponential":
            return self.beta / 4.0
        return float(np.sum(np.abs(np.diff(self.values))) + self.values[-1])

    def kernel_args(self):
        if self.kind == "exponential":
            z = np.zeros(2)
            return 0, self.beta, z, z, z
        return 1, 0.0, self.grid, self.values, self._tails()

    def t_hard_default(self, lam_max):
        scale = 4.0 / self.beta if self.kind == "exponential" else 1.0 + float(self.grid[-1])
        return 40.0 * scale * (1.0 + math.log1p(lam_max))


@njit(cache=True, nogil=True)
def _intensity(kind, beta, tg, tf, tt, t):
    if kind == 0:
        e = math.exp(-0.25 * beta * t)
        return 0.25 * beta * e, e
    m = tg.shape[0]
    if t >= tg[m - 1]:
        return 0.0, 0.0
    i = np.searchsorted(tg, t, side="right") - 1
    if i < 0:
        i = 0
    w = (t - tg[i]) / (tg[i + 1] - tg[i])
    f = tf[i] + w * (tf[i + 1] - tf[i])
    return f, tt[i + 1] + (tg[i + 1] - t) * 0.5 * (f + tf[i + 1])


# -- configuration and results -----------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    dt_max: float = 1e-3
    dt_coef: float = 0.05
    tail_tol: float = 1e-4
    angle_tol: float = 0.05
    t_hard_max: float = None
    below_margin: float = 1e-3
    max_refine: int = 30
    # stop a path once every positive lambda has passed this many 2 pi levels
    # (counts are then censored lower bounds; enough for gap events)
    early_exit_level: int = -1

    def __post_init__(self):
        for name in ("dt_max", "dt_coef", "tail_tol", "angle_tol", "below_margin"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.t_hard_max is not None and not self.t_hard_max > 0:
            raise ValueError("t_hard_max must be positive")
        if self.angle_tol >= math.pi:
            raise ValueError("angle_tol must be below pi")
        if self.tail_tol >= TWO_PI * self.angle_tol:
            raise ValueError("tail_tol must be well below the angle tolerance scale")
        if int(self.max_refine) < 0:
            raise ValueError("max_refine must be >= 0")

    def packed(self, spec, lam_max):
        t_max = self.t_hard_max if self.t_hard_max is not None else spec.t_hard_default(lam_max)
        return np.array([self.dt_max, self.dt_coef, self.tail_tol, self.angle_tol, t_max,
                         self.below_margin, float(self.max_refine), float(self.early_exit_level)])


@dataclass
class CountResult:
    lambda_grid: np.ndarray
    counts: np.ndarray
    converged: np.ndarray
    approach: list
    stop_time: float
    alpha: np.ndarray = None
    flags: int = 0
    meta: dict = field(default_factory=dict)


@dataclass
class SsePathState:
    t: float
    alphas: np.ndarray
    lambda_grid: np.ndarray
    shared_noise: tuple = ()


@dataclass
class CarouselState:
    t: float
    B: complex
    gammas: np.ndarray
    lambda_grid: np.ndarray
    z0: complex = -1.0 + 0.0j


def augmented_grid(lambda_grid):
    """Sorted grid with 0 added, plus the positions of the user's values."""
    lam = np.asarray(lambda_grid, dtype=float)
    if lam.ndim != 1 or lam.size == 0 or np.any(~np.isfinite(lam)):
        raise ValueError("lambda grid must be a nonempty finite 1-d array")
    if np.any(np.diff(lam) < 0):
        raise ValueError("lambda grid must be sorted")
    full = np.unique(np.concatenate([lam, [0.0]]))
    return full, np.searchsorted(full, lam)


# -- single steps -------------------------------------------------------------

@njit(cache=True, nogil=True)
def sse_increment(alpha, lam, f, dt, zr, zi):
    """lam f dt + Re((e^{-i alpha} - 1)(zr + i zi))."""
    return lam * f * dt + (math.cos(alpha) - 1.0) * zr + math.sin(alpha) * zi


@njit(cache=True, nogil=True)
def single_increment(alpha, lam, f, dt, w):
    """lam f dt + 2 sin(alpha/2) w."""
    return lam * f * dt + 2.0 * math.sin(0.5 * alpha) * w


@njit(cache=True, nogil=True)
def carousel_rate(gamma, br, bi, lam, f):
    """lam f |e^{i gamma} - B|^2 / (1 - |B|^2)."""
    dx = math.cos(gamma) - br
    dy = math.sin(gamma) - bi
    return lam * f * (dx * dx + dy * dy) / (1.0 - (br * br + bi * bi))


def step_coupled_sse(state, lambdas, f_value, dt, dZ):
    """One Euler step of the coupled equation with a shared increment ``dZ``."""
    dZ = complex(dZ)
    a = np.array([sse_increment(x, l, f_value, dt, dZ.real, dZ.imag) + x
                  for x, l in zip(np.asarray(state.alphas, float), lambdas)])
    return SsePathState(state.t + dt, a, state.lambda_grid, (dZ,))


def step_single_sse(alpha, lam, f_value, dt, dW):
    return float(alpha) + single_increment(float(alpha), float(lam), float(f_value), float(dt), float(dW))


def step_hyperbolic_bm(B, dt, dZtilde):
    """Euler step dB = (1 - |B|^2)/2 dZ; radial clamp below the unit circle.

    Returns ``(B_new, clamped)``.
    """
    B = complex(B)
    if abs(B) >= 1.0:
        raise ValueError("B must be interior")
    nb = B + 0.5 * (1.0 - abs(B) ** 2) * complex(dZtilde)
    r = abs(nb)
    if r >= _CLAMP:
        return nb * (_CLAMP / r), True
    return nb, False


def step_carousel(state, f_value, dt, dZtilde):
    """Rotate every gamma at its current rate, then move B."""
    B = complex(state.B)
    g = np.array([x + carousel_rate(x, B.real, B.imag, l, f_value) * dt
                  for x, l in zip(np.asarray(state.gammas, float), state.lambda_grid)])
    nb, _ = step_hyperbolic_bm(B, dt, dZtilde)
    return CarouselState(state.t + dt, nb, g, state.lambda_grid, state.z0)


# -- approach tracking (shared by the kernels) --------------------------------

@njit(cache=True, nogil=True)
def _track(alpha, delta, intube, lev, wstart, wmin, wmax, last_d):
    # scalar in, scalar out: array arguments make numba calls expensive
    k = math.floor(alpha / TWO_PI + 0.5)
    d = alpha - TWO_PI * k
    if abs(d) < delta:
        if intube == 0 or lev != k:
            return 1, k, d, d, d, d
        if (last_d >= 0.0) != (d >= 0.0):
            # crossed the level itself: the window restarts here
            return 1, k, d, d, d, d
        return 1, k, wstart, min(wmin, d), max(wmax, d), d
    return 0, lev, wstart, wmin, wmax, d


@njit(cache=True, nogil=True)
def _classify(conv, wstart, wmin, wmax, margin):
    if not conv:
        return 0
    if wmin >= 0.0:
        return 1
    if wmax < 0.0 and wstart < -margin:
        return -1
    return 0


@njit(cache=True, nogil=True)
def _finish(alpha, lams, conv_all, censored, intube, wstart, wmin, wmax, maxlev,
            margin, counts, conv, appr):
    flags = 0
    for j in range(lams.shape[0]):
        a = alpha[j]
        if not math.isfinite(a):
            flags |= FLAG_NONFINITE
            counts[j] = 0
            conv[j] = 0
            appr[j] = 0
            continue
        if censored:
            counts[j] = math.floor(a / TWO_PI) if lams[j] > 0 else math.floor(a / TWO_PI + 0.5)
        else:
            counts[j] = math.floor(a / TWO_PI + 0.5)
        conv[j] = 1 if conv_all else 0
        appr[j] = _classify(conv_all and intube[j] == 1, wstart[j], wmin[j], wmax[j], margin)
        if lams[j] > 0 and counts[j] < maxlev[j]:
            flags |= FLAG_VALVE
    if not conv_all:
        flags |= FLAG_UNCONVERGED
    if censored:
        flags |= FLAG_CENSORED
    return flags


# -- stochastic sine equation -------------------------------------------------

@njit(cache=True, nogil=True)
def sse_path(state, spare, single, kind, beta, tg, tf, tt, lams, cfg,
             alpha, counts, conv, appr, buf):
    """Integrate one path to the stopping rule.

    ``single`` = 0 runs the coupled equation (complex noise shared by all
    lambdas); ``single`` = 1 runs the one-lambda equation with real noise
    (shared as well, so only marginals are meaningful).  Returns
    ``(stop_time, flags)`` and fills counts / conv / appr / alpha.
    """
    nl = lams.shape[0]
    dt_max, coef, tail_tol, delta, t_max, margin = cfg[0], cfg[1], cfg[2], cfg[3], cfg[4], cfg[5]
    max_depth = int(cfg[6])
    early = int(cfg[7])
    lmax = 0.0
    lpos_min = np.inf
    for j in range(nl):
        alpha[j] = 0.0
        if abs(lams[j]) > lmax:
            lmax = abs(lams[j])
        if lams[j] > 0 and lams[j] < lpos_min:
            lpos_min = lams[j]
    trial = np.empty(nl)
    intube = np.zeros(nl, np.int64)
    lev = np.zeros(nl, np.int64)
    wstart = np.zeros(nl)
    wmin = np.zeros(nl)
    wmax = np.zeros(nl)
    last_d = np.zeros(nl)
    maxlev = np.zeros(nl, np.int64)
    for j in range(nl):
        intube[j], lev[j], wstart[j], wmin[j], wmax[j], last_d[j] = _track(
            0.0, delta, 0, 0, 0.0, 0.0, 0.0, 0.0)
    sdt = np.empty(max_depth + 2)
    szr = np.empty(max_depth + 2)
    szi = np.empty(max_depth + 2)
    sdep = np.empty(max_depth + 2, np.int64)
    nb = buf.shape[0]
    bpos = nb
    flags = 0
    t = 0.0
    conv_all = False
    censored = False
    while True:
        if kind == 0:
            tail = math.exp(-0.25 * beta * t)
            f = 0.25 * beta * tail
        else:
            f, tail = _intensity(kind, beta, tg, tf, tt, t)
        if lmax * tail < tail_tol:
            ok = True
            for j in range(nl):
                k = math.floor(alpha[j] / TWO_PI + 0.5)
                if abs(alpha[j] - TWO_PI * k) >= delta:
                    ok = False
                    break
            if ok:
                conv_all = True
                break
        if early >= 0 and lpos_min < np.inf:
            done = True
            for j in range(nl):
                if lams[j] > 0 and alpha[j] < TWO_PI * early + delta:
                    done = False
                    break
            if done:
                conv_all = True
                censored = True
                break
        if t >= t_max:
            break
        dt = coef / (1.0 + lmax * f)
        if dt > dt_max:
            dt = dt_max
        sq = math.sqrt(dt)
        if bpos >= nb:
            fill_normals(state, spare, buf)
            bpos = 0
        zr = sq * buf[bpos]
        bpos += 1
        zi = 0.0
        if single == 0:
            if bpos >= nb:
                fill_normals(state, spare, buf)
                bpos = 0
            zi = sq * buf[bpos]
            bpos += 1
        sp = 0
        sdt[0] = dt
        szr[0] = zr
        szi[0] = zi
        sdep[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            h = sdt[sp]
            xr = szr[sp]
            xi = szi[sp]
            dep = sdep[sp]
            if kind == 0:
                fh = 0.25 * beta * math.exp(-0.25 * beta * t)
            else:
                fh, _ = _intensity(kind, beta, tg, tf, tt, t)
            for j in range(nl):
                if single == 0:
                    trial[j] = alpha[j] + sse_increment(alpha[j], lams[j], fh, h, xr, xi)
                else:
                    trial[j] = alpha[j] + single_increment(alpha[j], lams[j], fh, h, xr)
            bad = False
            for j in range(nl - 1):
                if trial[j] > trial[j + 1]:
                    bad = True
                    break
            if bad and dep < max_depth:
                # Brownian bridge: split the increment over two half steps
                s4 = math.sqrt(0.25 * h)
                if bpos >= nb:
                    fill_normals(state, spare, buf)
                    bpos = 0
                yr = 0.5 * xr + s4 * buf[bpos]
                bpos += 1
                yi = 0.0
                if single == 0:
                    if bpos >= nb:
                        fill_normals(state, spare, buf)
                        bpos = 0
                    yi = 0.5 * xi + s4 * buf[bpos]
                    bpos += 1
                sdt[sp] = 0.5 * h
                szr[sp] = xr - yr
                szi[sp] = xi - yi
                sdep[sp] = dep + 1
                sdt[sp + 1] = 0.5 * h
                szr[sp + 1] = yr
                szi[sp + 1] = yi
                sdep[sp + 1] = dep + 1
                sp += 2
                continue
            if bad:
                flags |= FLAG_REFINE_LIMIT
            for j in range(nl):
                alpha[j] = trial[j]
                intube[j], lev[j], wstart[j], wmin[j], wmax[j], last_d[j] = _track(
                    alpha[j], delta, intube[j], lev[j], wstart[j], wmin[j], wmax[j], last_d[j])
                if lams[j] > 0:
                    m = math.floor(alpha[j] / TWO_PI)
                    if m > maxlev[j]:
                        maxlev[j] = m
            t += h
        if not math.isfinite(alpha[nl - 1]) or not math.isfinite(alpha[0]):
            break
    flags |= _finish(alpha, lams, conv_all, censored, intube, wstart, wmin, wmax, maxlev,
                     margin, counts, conv, appr)
    return t, flags


@njit(cache=True, nogil=True)
def sse_chunk(seed, start, stop, single, kind, beta, tg, tf, tt, lams, cfg,
              counts, conv, appr, stop_time, flags, alpha_out):
    nl = lams.shape[0]
    st = np.zeros(11, np.uint64)
    spare = np.zeros(2)
    buf = np.empty(_NBUF)
    alpha = np.empty(nl)
    for p in range(start, stop):
        i = p - start
        _init(st, spare, seed, p)
        t, fl = sse_path(st, spare, single, kind, beta, tg, tf, tt, lams, cfg,
                         alpha, counts[i], conv[i], appr[i], buf)
        stop_time[i] = t
        flags[i] = fl
        for j in range(nl):
            alpha_out[i, j] = alpha[j]


# -- carousel -----------------------------------------------------------------

@njit(cache=True, nogil=True)
def _transport(br, bi, zr, zi, z0r, z0i):
    # T(B, z) = S(B, z) / S(B, z0), S(w, z) = (z - w) / (1 - conj(w) z)
    w = complex(br, bi)
    z = complex(zr, zi)
    z0 = complex(z0r, z0i)
    wc = w.conjugate()
    return ((z - w) * (1.0 - wc * z0)) / ((1.0 - wc * z) * (z0 - w))


@njit(cache=True, nogil=True)
def _transport_inverse(br, bi, ur, ui, z0r, z0i):
    # z with T(B, z) = u
    w = complex(br, bi)
    z0 = complex(z0r, z0i)
    wc = w.conjugate()
    v = complex(ur, ui) * ((z0 - w) / (1.0 - wc * z0))
    return (v + w) / (1.0 + wc * v)


@njit(cache=True, nogil=True)
def _wrap(x):
    return x - TWO_PI * math.floor(x / TWO_PI + 0.5)


@njit(cache=True, nogil=True)
def carousel_path(state, spare, kind, beta, tg, tf, tt, lams, cfg, gamma0,
                  alpha, counts, conv, appr, buf):
    """One carousel path; alpha is the continuously lifted arg of T(B, e^{i gamma}).

    The path is run in the frame centred at B, where T(B, .) is the identity
    up to the normalisation at z0, so no point ever approaches the circle.
    Splitting step: with B frozen the boundary ODE is a rotation about B,
    which advances every transported angle by exactly lam * (integral of f
    over the step).  Then B takes its Euler step, which seen from the old
    centre is delta = dZ/2, and the frame is re-centred with S(delta, .) and
    renormalised at z0.  alpha continues along the branch of smallest change.
    ``gamma0`` (the angle of z0) drops out of the transported angles.
    """
    nl = lams.shape[0]
    dt_max, coef, tail_tol, delta, t_max, margin = cfg[0], cfg[1], cfg[2], cfg[3], cfg[4], cfg[5]
    max_depth = int(cfg[6])
    early = int(cfg[7])
    lmax = 0.0
    for j in range(nl):
        alpha[j] = 0.0
        if abs(lams[j]) > lmax:
            lmax = abs(lams[j])
    ta = np.empty(nl)
    intube = np.zeros(nl, np.int64)
    lev = np.zeros(nl, np.int64)
    wstart = np.zeros(nl)
    wmin = np.zeros(nl)
    wmax = np.zeros(nl)
    last_d = np.zeros(nl)
    maxlev = np.zeros(nl, np.int64)
    for j in range(nl):
        intube[j], lev[j], wstart[j], wmin[j], wmax[j], last_d[j] = _track(
            0.0, delta, 0, 0, 0.0, 0.0, 0.0, 0.0)
    sdt = np.empty(max_depth + 2)
    szr = np.empty(max_depth + 2)
    szi = np.empty(max_depth + 2)
    sdep = np.empty(max_depth + 2, np.int64)
    nb = buf.shape[0]
    bpos = nb
    flags = 0
    t = 0.0
    conv_all = False
    censored = False
    while True:
        if kind == 0:
            tail = math.exp(-0.25 * beta * t)
            f = 0.25 * beta * tail
        else:
            f, tail = _intensity(kind, beta, tg, tf, tt, t)
        if lmax * tail < tail_tol:
            ok = True
            for j in range(nl):
                k = math.floor(alpha[j] / TWO_PI + 0.5)
                if abs(alpha[j] - TWO_PI * k) >= delta:
                    ok = False
                    break
            if ok:
                conv_all = True
                break
        if early >= 0:
            done = True
            anypos = False
            for j in range(nl):
                if lams[j] > 0:
                    anypos = True
                    if alpha[j] < TWO_PI * early + delta:
                        done = False
                        break
            if done and anypos:
                conv_all = True
                censored = True
                break
        if t >= t_max:
            break
        dt = coef / (1.0 + lmax * f)
        if dt > dt_max:
            dt = dt_max
        sq = math.sqrt(dt)
        if bpos + 1 >= nb:
            fill_normals(state, spare, buf)
            bpos = 0
        sdt[0] = dt
        szr[0] = sq * buf[bpos]
        szi[0] = sq * buf[bpos + 1]
        bpos += 2
        sdep[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            h = sdt[sp]
            xr = szr[sp]
            xi = szi[sp]
            dep = sdep[sp]
            if kind == 0:
                t0 = math.exp(-0.25 * beta * t)
                dF = t0 - math.exp(-0.25 * beta * (t + h))
            else:
                _, t0 = _intensity(kind, beta, tg, tf, tt, t)
                _, t1 = _intensity(kind, beta, tg, tf, tt, t + h)
                dF = t0 - t1
            dr = 0.5 * xr
            di = 0.5 * xi
            bad = dr * dr + di * di >= 0.25
            # normaliser S(delta, 1)
            ncr = 1.0 - dr
            nci = -di
            ndr = 1.0 - dr
            ndi = di
            for j in range(nl):
                a = alpha[j] + lams[j] * dF
                ur = math.cos(a)
                ui = math.sin(a)
                # S(delta, u) = (u - delta) / (1 - conj(delta) u)
                pr = ur - dr
                pi_ = ui - di
                qr = 1.0 - (dr * ur + di * ui)
                qi = -(dr * ui - di * ur)
                # v = S(delta, u) / S(delta, 1) = (p * nd) / (q * nc)
                vr = pr * ndr - pi_ * ndi
                vi = pr * ndi + pi_ * ndr
                wr = qr * ncr - qi * nci
                wi = qr * nci + qi * ncr
                ang = math.atan2(vi * wr - vr * wi, vr * wr + vi * wi)
                d = _wrap(ang - a)
                if abs(d) > 0.5 * math.pi:
                    bad = True
                ta[j] = a + d
            if not bad:
                for j in range(nl - 1):
                    if ta[j] > ta[j + 1]:
                        bad = True
                        break
            if bad and dep < max_depth:
                s4 = math.sqrt(0.25 * h)
                if bpos + 1 >= nb:
                    fill_normals(state, spare, buf)
                    bpos = 0
                yr = 0.5 * xr + s4 * buf[bpos]
                yi = 0.5 * xi + s4 * buf[bpos + 1]
                bpos += 2
                sdt[sp] = 0.5 * h
                szr[sp] = xr - yr
                szi[sp] = xi - yi
                sdep[sp] = dep + 1
                sdt[sp + 1] = 0.5 * h
                szr[sp + 1] = yr
                szi[sp + 1] = yi
                sdep[sp + 1] = dep + 1
                sp += 2
                continue
            if bad:
                flags |= FLAG_REFINE_LIMIT
            for j in range(nl):
                alpha[j] = ta[j]
                intube[j], lev[j], wstart[j], wmin[j], wmax[j], last_d[j] = _track(
                    alpha[j], delta, intube[j], lev[j], wstart[j], wmin[j], wmax[j], last_d[j])
                if lams[j] > 0:
                    m = math.floor(alpha[j] / TWO_PI)
                    if m > maxlev[j]:
                        maxlev[j] = m
            t += h
        if not math.isfinite(alpha[0]) or not math.isfinite(alpha[nl - 1]):
            break
    flags |= _finish(alpha, lams, conv_all, censored, intube, wstart, wmin, wmax, maxlev,
                     margin, counts, conv, appr)
    return t, flags


@njit(cache=True, nogil=True)
def carousel_chunk(seed, start, stop, kind, beta, tg, tf, tt, lams, cfg, gamma0,
                   counts, conv, appr, stop_time, flags, alpha_out):
    nl = lams.shape[0]
    st = np.zeros(11, np.uint64)
    spare = np.zeros(2)
    buf = np.empty(_NBUF)
    alpha = np.empty(nl)
    for p in range(start, stop):
        i = p - start
        _init(st, spare, seed, p)
        t, fl = carousel_path(st, spare, kind, beta, tg, tf, tt, lams, cfg, gamma0,
                              alpha, counts[i], conv[i], appr[i], buf)
        stop_time[i] = t
        flags[i] = fl
        for j in range(nl):
            alpha_out[i, j] = alpha[j]



# -- Python entry points -------------------------------------------------------

def _run_single(kernel_path, spec, lambda_grid, config, stream, extra=()):
    config = config or SolverConfig()
    full, idx = augmented_grid(lambda_grid)
    cfg = config.packed(spec, float(np.max(np.abs(full))))
    kind, beta, tg, tf, tt = spec.kernel_args()
    nl = full.shape[0]
    alpha = np.empty(nl)
    counts = np.empty(nl, np.int64)
    conv = np.empty(nl, np.int64)
    appr = np.empty(nl, np.int64)
    buf = np.empty(_NBUF)
    t, fl = kernel_path(stream.state, stream.spare, *extra[:1], kind, beta, tg, tf, tt,
                        full, cfg, *extra[1:], alpha, counts, conv, appr, buf)
    return CountResult(
        lambda_grid=np.asarray(lambda_grid, dtype=float),
        counts=counts[idx].copy(),
        converged=conv[idx].astype(bool),
        approach=[APPROACH_NAMES[int(a)] for a in appr[idx]],
        stop_time=float(t),
        alpha=alpha[idx].copy(),
        flags=int(fl),
    )


def solve_counts(spec, lambda_grid, config=None, stream=None, single=False):
    """Counting function N(lambda) = alpha_lambda(inf) / 2 pi for one path.

    ``single=True`` integrates the one-lambda equation instead of the
    coupled one (same marginal law for each lambda).
    """
    stream = stream if stream is not None else RngStream(0, 0)
    return _run_single(sse_path, spec, lambda_grid, config, stream, (1 if single else 0,))


def carousel_counts(spec, lambda_grid, config=None, stream=None, z0=-1.0 + 0.0j):
    """Counting function from the winding of the carousel for one path."""
    z0 = complex(z0)
    if abs(abs(z0) - 1.0) > 1e-9:
        raise ValueError("z0 must lie on the unit circle")
    stream = stream if stream is not None else RngStream(0, 0)
    gamma0 = math.atan2(z0.imag, z0.real)

    def path(state, spare, kind, beta, tg, tf, tt, lams, cfg, alpha, counts, conv, appr, buf):
        return carousel_path(state, spare, kind, beta, tg, tf, tt, lams, cfg, gamma0,
                             alpha, counts, conv, appr, buf)

    return _run_single(path, spec, lambda_grid, config, stream)


def classify_approach(alpha_path, config=None, converged=True):
    """Approach direction of a sampled single-lambda path (array of alpha values).

    Same rule the kernels apply online: the window starts at the later of
    the last entry into the angle_tol tube around the final level and the
    last crossing of that level.
    """
    config = config or SolverConfig()
    a = np.asarray(alpha_path, dtype=float)
    if not converged or a.size == 0 or not np.all(np.isfinite(a)):
        return "undecided"
    level = TWO_PI * math.floor(a[-1] / TWO_PI + 0.5)
    d = a - level
    if abs(d[-1]) >= config.angle_tol:
        return "undecided"
    outside = np.nonzero(np.abs(d) >= config.angle_tol)[0]
    start = outside[-1] + 1 if outside.size else 0
    w = d[start:]
    sign = w >= 0
    flips = np.nonzero(sign[1:] != sign[:-1])[0]
    if flips.size:
        w = w[flips[-1] + 1:]
    if np.all(w >= 0):
        return "above"
    if np.all(w < 0) and w[0] < -config.below_margin:
        return "below"
    return "undecided"


def simulate_single_path(beta, lam, config=None, stream=None, t_end=None, record_dt=0.01):
    """Recorded path of the one-lambda equation (for plots and classification)."""
    config = config or SolverConfig()
    stream = stream if stream is not None else RngStream(0, 0)
    spec = IntensitySpec.exponential(beta)
    if t_end is None:
        t_end = -4.0 / beta * math.log(config.tail_tol / max(abs(lam), 1e-300))
    n_rec = int(math.ceil(t_end / record_dt)) + 1
    out = np.empty(n_rec)
    _record_single(stream.state, stream.spare, float(beta), float(lam), float(config.dt_max),
                   float(config.dt_coef), float(record_dt), out, np.empty(_NBUF))
    return np.arange(n_rec) * record_dt, out


@njit(cache=True, nogil=True)
def _record_single(state, spare, beta, lam, dt_max, coef, record_dt, out, buf):
    nb = buf.shape[0]
    bpos = nb
    a = 0.0
    t = 0.0
    out[0] = 0.0
    for k in range(1, out.shape[0]):
        target = k * record_dt
        while t < target - 1e-15:
            f = 0.25 * beta * math.exp(-0.25 * beta * t)
            dt = coef / (1.0 + abs(lam) * f)
            if dt > dt_max:
                dt = dt_max
            if dt > target - t:
                dt = target - t
            if bpos >= nb:
                fill_normals(state, spare, buf)
                bpos = 0
            a += single_increment(a, lam, f, dt, math.sqrt(dt) * buf[bpos])
            bpos += 1
            t += dt
        out[k] = a


# -- time-changed limits --------------------------------------------------------

@njit(cache=True, nogil=True)
def _relative_limit(state, spare, beta, lam, tau_grid, dt_max, out, buf):
    # the relative-phase limit in tau = -(2/beta) log(1 - t) is the coupled
    # equation with the exponential intensity
    nb = buf.shape[0]
    bpos = nb
    a = 0.0
    tau = 0.0
    for k in range(tau_grid.shape[0]):
        target = tau_grid[k]
        while tau < target - 1e-15:
            f = 0.25 * beta * math.exp(-0.25 * beta * tau)
            dt = 0.05 / (1.0 + abs(lam) * f)
            if dt > dt_max:
                dt = dt_max
            if dt > target - tau:
                dt = target - tau
            sq = math.sqrt(dt)
            if bpos + 1 >= nb:
                fill_normals(state, spare, buf)
                bpos = 0
            a += sse_increment(a, lam, f, dt, sq * buf[bpos], sq * buf[bpos + 1])
            bpos += 2
            tau += dt
        out[k] = a


def solve_relative_phase_limit(beta, lam, config=None, stream=None, t_grid=(0.5,)):
    """alpha_lambda(t) of the relative-phase limit on ``t_grid`` in [0, 1)."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    config = config or SolverConfig()
    stream = stream if stream is not None else RngStream(0, 0)
    t = np.asarray(t_grid, dtype=float)
    if np.any(t < 0) or np.any(t >= 1) or np.any(np.diff(t) < 0):
        raise ValueError("t_grid must be sorted inside [0, 1)")
    tau = -2.0 / beta * np.log1p(-t)
    out = np.empty(t.shape[0])
    _relative_limit(stream.state, stream.spare, float(beta), float(lam), tau,
                    float(config.dt_max), out, np.empty(_NBUF))
    return t, out


@njit(cache=True, nogil=True)
def phase_limit_coefficients(nu, beta, lam, t):
    """Drift and the two noise coefficients of the phase SDE in s = -log(1 - t).

    Returns (drift per ds, coefficient of Re(e^{-i phi} dZ), coefficient of dB).
    """
    if math.isinf(nu):
        extra = 0.0
        cb = 2.0 / math.sqrt(beta)
    else:
        extra = (1.0 / beta - 0.5) * math.sqrt(nu) / (nu + 1.0 - t)
        cb = math.sqrt(2.0 * (2.0 * nu + 1.0 - t) / (beta * (nu + 1.0 - t)))
    drift = (0.5 * lam + extra) * math.sqrt(1.0 - t)
    return drift, math.sqrt(2.0 / beta), cb


@njit(cache=True, nogil=True)
def _phase_limit(state, spare, nu, beta, lam, s_grid, ds_max, out, buf):
    nb = buf.shape[0]
    bpos = nb
    phi = math.pi
    s = 0.0
    for k in range(s_grid.shape[0]):
        target = s_grid[k]
        while s < target - 1e-15:
            h = ds_max
            if h > target - s:
                h = target - s
            t = -math.expm1(-s)
            drift, cz, cb = phase_limit_coefficients(nu, beta, lam, t)
            sq = math.sqrt(h)
            if bpos + 2 >= nb:
                fill_normals(state, spare, buf)
                bpos = 0
            zr = sq * buf[bpos]
            zi = sq * buf[bpos + 1]
            db = sq * buf[bpos + 2]
            bpos += 3
            phi += drift * h + cz * (math.cos(phi) * zr + math.sin(phi) * zi) + cb * db
            s += h
        out[k] = phi


def solve_phase_limit_sde(nu, lam, beta, config=None, stream=None, t_grid=(0.5,)):
    """phi_lambda(t) of the limiting phase SDE, phi(0) = pi, on ``t_grid`` in [0, 1)."""
    nu = float(nu)
    if not nu >= 0:
        raise ValueError("nu must be in [0, inf]")
    if not beta > 0:
        raise ValueError("beta must be positive")
    config = config or SolverConfig()
    stream = stream if stream is not None else RngStream(0, 0)
    t = np.asarray(t_grid, dtype=float)
    if np.any(t < 0) or np.any(t >= 1) or np.any(np.diff(t) < 0):
        raise ValueError("t_grid must be sorted inside [0, 1)")
    s = -np.log1p(-t)
    out = np.empty(t.shape[0])
    _phase_limit(stream.state, stream.spare, nu, float(beta), float(lam), s,
                 float(config.dt_max), out, np.empty(_NBUF))
    return t, out


def with_early_exit(config, level):
    return replace(config, early_exit_level=int(level))


@njit(cache=True, nogil=True)
def limit_chunk(seed, start, stop, form, nu, beta, lam, grid, dt_max, out):
    """Paths start..stop-1 of a time-changed limit on a prepared grid.

    form 0: relative-phase limit (grid in tau); form 1: phase SDE (grid in s).
    """
    st = np.zeros(11, np.uint64)
    spare = np.zeros(2)
    buf = np.empty(_NBUF)
    for p in range(start, stop):
        _init(st, spare, seed, p)
        if form == 0:
            _relative_limit(st, spare, beta, lam, grid, dt_max, out[p - start], buf)
        else:
            _phase_limit(st, spare, nu, beta, lam, grid, dt_max, out[p - start], buf)

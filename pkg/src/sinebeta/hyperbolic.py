"""Half-plane / disk geometry and lifted boundary actions.

Conventions
-----------
* Half-plane points are Python/numpy complex numbers with ``Im z >= 0``;
  the point at infinity is the sentinel :data:`INF`, never an IEEE inf.
* ``cayley(z) = (i - z)/(i + z)`` maps the half-plane to the unit disk,
  ``i -> 0``, ``0 -> 1``, ``INF -> -1``.  A real boundary point ``r``
  corresponds to the angle ``phi`` with ``cayley(r) = exp(i phi)``; larger
  ``r`` means larger ``phi`` (``r = 0`` at 0, ``r = 1`` at pi/2, ``INF`` at pi).
* Maps act on the right: ``(T1 * T2)`` applies ``T1`` first, so
  ``mobius_apply(T1 * T2, z) == mobius_apply(T2, mobius_apply(T1, z))``.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

BOUNDARY_TOL = 1e-9


class _Infinity:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INF"

    def __reduce__(self):
        return (_Infinity, ())


INF = _Infinity()


def is_inf(z):
    return z is INF


@dataclass(frozen=True)
class MobiusMap:
    """z -> (a z + b)/(c z + d) with real coefficients, stored with ad - bc = 1."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        det = self.a * self.d - self.b * self.c
        if not det > 0.0:
            raise ValueError(f"determinant must be positive, got {det!r}")
        k = 1.0 / math.sqrt(det)
        for name in "abcd":
            object.__setattr__(self, name, float(getattr(self, name)) * k)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 1.0)

    @classmethod
    def affine(cls, a, b):
        """A(a, b): z -> a (z + b), a > 0."""
        if not a > 0:
            raise ValueError(f"affine scale must be positive, got {a!r}")
        return cls(a, a * b, 0.0, 1.0)

    @classmethod
    def rotation(cls, alpha):
        """Q(alpha): rotation of the disk picture by ``alpha`` about 0 (= i)."""
        c, s = math.cos(alpha / 2.0), math.sin(alpha / 2.0)
        if abs(c) < 1e-300 and abs(s) < 1e-300:
            raise ValueError("degenerate rotation")
        return cls(c, s, -s, c)

    @classmethod
    def from_matrix(cls, m):
        return cls(m[0][0], m[0][1], m[1][0], m[1][1])

    def matrix(self):
        return np.array([[self.a, self.b], [self.c, self.d]])

    def __mul__(self, other):
        if not isinstance(other, MobiusMap):
            return NotImplemented
        # right action: self first, then other
        return MobiusMap.from_matrix(other.matrix() @ self.matrix())

    def inverse(self):
        return MobiusMap(self.d, -self.b, -self.c, self.a)

    def disk_matrix(self):
        """Complex 2x2 matrix of the same isometry acting on the disk."""
        cay = np.array([[-1.0, 1j], [1.0, 1j]])
        cay_inv = np.linalg.inv(cay)
        return cay @ self.matrix() @ cay_inv


def cayley(z):
    """Half-plane (or INF) to closed disk."""
    if z is INF:
        return complex(-1.0, 0.0)
    z = complex(z)
    return (1j - z) / (1j + z)


def cayley_inverse(w):
    """Closed disk to half-plane; -1 goes to INF."""
    w = complex(w)
    if w == -1.0:
        return INF
    return 1j * (1.0 - w) / (1.0 + w)


def mobius_apply(T, z):
    """Projective evaluation of ``T`` at ``z`` (half-plane point or INF)."""
    if z is INF:
        if T.c == 0.0:
            return INF
        return complex(T.a / T.c)
    z = complex(z)
    den = T.c * z + T.d
    if den == 0:
        return INF
    return (T.a * z + T.b) / den


def _disk_apply(T, w):
    """Action of ``T`` transported to the disk."""
    return cayley(mobius_apply(T, cayley_inverse(w)))


def _check_boundary(x, name):
    if abs(abs(x) - 1.0) > BOUNDARY_TOL:
        raise ValueError(f"{name} must lie on the unit circle, |{name}| = {abs(x)!r}")


def ash(T, v, w):
    """Angular shift of the boundary pair (v, w) under T.

    2 Arg((1 - sigma conj(w)) / (1 - sigma conj(v))) with sigma the disk
    preimage of 0 under T.  Evaluated without forming sigma explicitly, so
    maps that push the centre close to the boundary stay accurate.
    """
    v, w = complex(v), complex(w)
    _check_boundary(v, "v")
    _check_boundary(w, "w")
    zeta = mobius_apply(T.inverse(), 1j)
    if zeta is INF or zeta.imag <= 0.0:
        raise ValueError("degenerate map: preimage of the centre is not interior")
    p, q = 1j + zeta, 1j - zeta
    num = p - q * w.conjugate()
    den = p - q * v.conjugate()
    return 2.0 * float(np.angle(num / den))


def ash_sigma(T):
    """sigma = 0 o T^-1 in the disk."""
    zeta = mobius_apply(T.inverse(), 1j)
    if zeta is INF:
        return complex(-1.0, 0.0)
    sigma = cayley(zeta)
    if abs(sigma) >= 1.0:
        raise ValueError(f"degenerate map: |sigma| = {abs(sigma)!r}")
    return sigma


def ash_alternate(T, v, w):
    """The second closed form, 2 Arg((w - sigma) v / (w (v - sigma)))."""
    v, w = complex(v), complex(w)
    _check_boundary(v, "v")
    _check_boundary(w, "w")
    sigma = ash_sigma(T)
    return 2.0 * float(np.angle((w - sigma) * v / (w * (v - sigma))))


def ash_expansion(z, v, w, order):
    """Main terms of ash in the displacement ``z`` with (i + z).T = i."""
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1, 2 or 3, got {order!r}")
    if order == 1:
        return 0.0
    z, v, w = complex(z), complex(v), complex(w)
    dv = w.conjugate() - v.conjugate()
    if order == 2:
        return float(-(dv * z).real)
    quad = -1j * (2.0 + v.conjugate() + w.conjugate()) * z * z / 4.0
    return float((dv * (-z + quad)).real)


@njit(cache=True, nogil=True)
def lift_affine(a, b, phi):
    """phi * A(a, b) on the universal cover (scalar kernel).

    With zeta = i/a - b the preimage of i, the shift is
    2 Arg(((i + zeta) - (i - zeta) e^{-i phi}) / 2i), written in real form.
    """
    c = math.cos(phi)
    s = math.sin(phi)
    k = 1.0 - 1.0 / a
    y = b * (1.0 + c) + k * s
    x = (1.0 + 1.0 / a) - k * c + b * s
    return phi + 2.0 * math.atan2(y, x)


def lifted_apply_affine(a, b, phi):
    """Lift of A(a, b): z -> a (z + b) acting on angles, normalized to fix pi."""
    a = np.asarray(a, dtype=float)
    if np.any(~(a > 0)):
        raise ValueError("affine scale a must be positive")
    b = np.asarray(b, dtype=float)
    phi = np.asarray(phi, dtype=float)
    c, s = np.cos(phi), np.sin(phi)
    k = 1.0 - 1.0 / a
    y = b * (1.0 + c) + k * s
    x = (1.0 + 1.0 / a) - k * c + b * s
    out = phi + 2.0 * np.arctan2(y, x)
    return float(out) if out.ndim == 0 else out


def lifted_apply_rotation(alpha, phi):
    """Lift of Q(alpha): a plain shift."""
    return np.add(phi, alpha) if np.ndim(phi) else float(phi) + float(alpha)


def disk_transport(w, z, z0=-1.0):
    """T(w, z) = S(w, z)/S(w, z0), S(w, z) = (z - w)/(1 - conj(w) z)."""
    w, z, z0 = complex(w), complex(z), complex(z0)
    if abs(w) >= 1.0:
        raise ValueError(f"centre must be interior, |w| = {abs(w)!r}")
    wc = w.conjugate()
    return ((z - w) / (1.0 - wc * z)) / ((z0 - w) / (1.0 - wc * z0))


@njit(cache=True, nogil=True)
def disk_transport_nb(wr, wi, zr, zi):
    """Kernel form of :func:`disk_transport` with z0 = -1; returns (re, im)."""
    w = complex(wr, wi)
    z = complex(zr, zi)
    wc = w.conjugate()
    r = ((z - w) / (1.0 - wc * z)) * ((1.0 + wc) / (-1.0 - w))
    return r.real, r.imag

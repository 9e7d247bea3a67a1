"""Keyed counter-based random streams.

Every Monte Carlo path owns an independent stream derived from
``(master_seed, path_index)``.  The generator is Philox4x64-10; its raw
output is bit-compatible with :class:`numpy.random.Philox` for the same
key, which the test-suite uses as an oracle.  All samplers are numba
kernels so compiled path simulators can draw from per-path streams without
touching Python.

Stream state is a ``uint64[11]`` array::

    [ctr0, ctr1, ctr2, ctr3, key0, key1, buf0, buf1, buf2, buf3, pos]

plus a ``float64[2]`` array caching the spare polar-method Gaussian
``[has_spare, spare]``.
"""

import math

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic

_MASK64 = (1 << 64) - 1

PHILOX_M0 = np.uint64(0xD2E7470EE14C6C93)
PHILOX_M1 = np.uint64(0xCA5A826395121157)
PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)

STATE_SIZE = 11
_POS = 10


@intrinsic
def _mulhilo(typingctx, a, b):
    sig = types.UniTuple(types.uint64, 2)(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        x, y = args
        i128 = ir.IntType(128)
        prod = builder.mul(builder.zext(x, i128), builder.zext(y, i128))
        lo = builder.trunc(prod, ir.IntType(64))
        hi = builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), ir.IntType(64))
        return context.make_tuple(builder, signature.return_type, (hi, lo))

    return sig, codegen


@njit(cache=True, nogil=True)
def _philox(c0, c1, c2, c3, k0, k1):
    # scalar-only on purpose: array arguments make numba calls expensive
    for r in range(10):
        if r > 0:
            k0 += PHILOX_W0
            k1 += PHILOX_W1
        hi0, lo0 = _mulhilo(PHILOX_M0, c0)
        hi1, lo1 = _mulhilo(PHILOX_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def _increment(c0, c1, c2, c3):
    # 256-bit counter, incremented before each block (as numpy does)
    c0 += np.uint64(1)
    if c0 == np.uint64(0):
        c1 += np.uint64(1)
        if c1 == np.uint64(0):
            c2 += np.uint64(1)
            if c2 == np.uint64(0):
                c3 += np.uint64(1)
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def _philox_block(state):
    c0, c1, c2, c3 = _increment(state[0], state[1], state[2], state[3])
    state[0] = c0
    state[1] = c1
    state[2] = c2
    state[3] = c3
    x0, x1, x2, x3 = _philox(c0, c1, c2, c3, state[4], state[5])
    state[6] = x0
    state[7] = x1
    state[8] = x2
    state[9] = x3
    state[_POS] = np.uint64(0)


@njit(cache=True, nogil=True)
def next_raw(state):
    """Next raw 64-bit word of the stream."""
    if state[_POS] >= np.uint64(4):
        _philox_block(state)
    pos = state[_POS]
    state[_POS] = pos + np.uint64(1)
    return state[6 + np.int64(pos)]


@njit(cache=True, nogil=True)
def next_uniform(state):
    """Uniform double on [0, 1) with 53 random bits."""
    # signed conversion: numba's uint64 -> float64 path is several times slower
    return np.float64(np.int64(next_raw(state) >> np.uint64(11))) * (1.0 / 9007199254740992.0)


@njit(cache=True, nogil=True)
def next_normal(state, spare):
    """Standard normal by the Marsaglia polar method; caches the pair's second value."""
    if spare[0] != 0.0:
        spare[0] = 0.0
        return spare[1]
    while True:
        u = 2.0 * next_uniform(state) - 1.0
        v = 2.0 * next_uniform(state) - 1.0
        s = u * u + v * v
        if 0.0 < s < 1.0:
            break
    m = np.sqrt(-2.0 * np.log(s) / s)
    spare[0] = 1.0
    spare[1] = v * m
    return u * m


@njit(cache=True, nogil=True)
def next_gamma(state, spare, shape):
    """Unit-scale gamma variate (Marsaglia-Tsang squeeze; boosted for shape < 1)."""
    if shape <= 0.0:
        return 0.0
    boost = 1.0
    a = shape
    if a < 1.0:
        # G(a) = G(a + 1) * U**(1/a)
        u = next_uniform(state)
        while u == 0.0:
            u = next_uniform(state)
        boost = u ** (1.0 / a)
        a = a + 1.0
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    while True:
        x = next_normal(state, spare)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = next_uniform(state)
        x2 = x * x
        if u < 1.0 - 0.0331 * x2 * x2:
            return d * v * boost
        if u > 0.0 and np.log(u) < 0.5 * x2 + d * (1.0 - v + np.log(v)):
            return d * v * boost


@njit(cache=True, nogil=True)
def next_chi(state, spare, dof):
    """Chi variate with (real) ``dof`` degrees of freedom: sqrt(2 * Gamma(dof / 2))."""
    if dof <= 0.0:
        return 0.0
    return np.sqrt(2.0 * next_gamma(state, spare, 0.5 * dof))


@njit(cache=True, nogil=True)
def _splitmix64(x):
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def init_state(state, spare, master_seed, path_index):
    """Fill ``state`` for the stream keyed by ``(master_seed, path_index)``."""
    k0 = _splitmix64(np.uint64(master_seed))
    k1 = _splitmix64(np.uint64(path_index) ^ _splitmix64(k0))
    for i in range(STATE_SIZE):
        state[i] = np.uint64(0)
    state[4] = k0
    state[5] = k1
    state[_POS] = np.uint64(4)
    spare[0] = 0.0
    spare[1] = 0.0


def _as_u64(x):
    x = int(x)
    if not 0 <= x <= _MASK64:
        raise ValueError(f"value {x} does not fit in 64 unsigned bits")
    return np.uint64(x)


def stream_key(master_seed, path_index):
    """The 128-bit Philox key (two uint64 words) used for a path stream."""
    state = np.zeros(STATE_SIZE, dtype=np.uint64)
    spare = np.zeros(2)
    init_state(state, spare, _as_u64(master_seed), _as_u64(path_index))
    return state[4:6].copy()


class RngStream:
    """Independent, reproducible random stream for one Monte Carlo path.

    Two streams with the same ``(master_seed, path_index)`` produce the same
    sequence on every platform and thread count; distinct pairs use distinct
    Philox keys.
    """

    def __init__(self, master_seed, path_index=0):
        self.master_seed = int(master_seed)
        self.path_index = int(path_index)
        self.state = np.zeros(STATE_SIZE, dtype=np.uint64)
        self.spare = np.zeros(2)
        init_state(self.state, self.spare, _as_u64(master_seed), _as_u64(path_index))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, path_index={self.path_index})"

    def raw(self, size):
        return _fill_raw(self.state, int(size))

    def uniform(self, size=None):
        if size is None:
            return next_uniform(self.state)
        return _fill_uniform(self.state, int(size))

    def normal(self, size=None):
        if size is None:
            return next_normal(self.state, self.spare)
        return _fill_normal(self.state, self.spare, int(size))

    def gamma(self, shape, size=None):
        if size is None:
            return next_gamma(self.state, self.spare, float(shape))
        return _fill_gamma(self.state, self.spare, float(shape), int(size))

    def chi(self, dof, size=None):
        if size is None:
            return next_chi(self.state, self.spare, float(dof))
        return np.sqrt(2.0 * self.gamma(0.5 * float(dof), size))

    def complex_normal(self, dt=1.0):
        """Complex Gaussian increment with independent real/imaginary parts of variance ``dt``."""
        s = np.sqrt(dt)
        re = next_normal(self.state, self.spare)
        im = next_normal(self.state, self.spare)
        return complex(s * re, s * im)


@njit(cache=True, nogil=True)
def _fill_raw(state, size):
    out = np.empty(size, dtype=np.uint64)
    for i in range(size):
        out[i] = next_raw(state)
    return out


@njit(cache=True, nogil=True)
def _fill_uniform(state, size):
    out = np.empty(size)
    for i in range(size):
        out[i] = next_uniform(state)
    return out


@njit(cache=True, nogil=True)
def fill_normals(state, spare, out):
    """Fill ``out`` with the next ``len(out)`` Gaussians of the stream.

    Same sequence as calling :func:`next_normal` repeatedly, but the stream
    state lives in local variables for the whole loop, which is several
    times faster inside compiled path kernels.
    """
    n = out.shape[0]
    i = 0
    if n > 0 and spare[0] != 0.0:
        spare[0] = 0.0
        out[0] = spare[1]
        i = 1
    c0, c1, c2, c3 = state[0], state[1], state[2], state[3]
    k0, k1 = state[4], state[5]
    b0, b1, b2, b3 = state[6], state[7], state[8], state[9]
    pos = np.int64(state[_POS])
    scale = 1.0 / 9007199254740992.0
    x1 = np.uint64(0)
    x2 = np.uint64(0)
    while i < n:
        for half in range(2):
            if pos >= 4:
                c0, c1, c2, c3 = _increment(c0, c1, c2, c3)
                b0, b1, b2, b3 = _philox(c0, c1, c2, c3, k0, k1)
                pos = 0
            if pos == 0:
                x = b0
            elif pos == 1:
                x = b1
            elif pos == 2:
                x = b2
            else:
                x = b3
            pos += 1
            if half == 0:
                x1 = x
            else:
                x2 = x
        u = 2.0 * (np.float64(np.int64(x1 >> np.uint64(11))) * scale) - 1.0
        v = 2.0 * (np.float64(np.int64(x2 >> np.uint64(11))) * scale) - 1.0
        s = u * u + v * v
        if s >= 1.0 or s == 0.0:
            continue
        m = math.sqrt(-2.0 * math.log(s) / s)
        out[i] = u * m
        i += 1
        if i < n:
            out[i] = v * m
            i += 1
        else:
            spare[0] = 1.0
            spare[1] = v * m
    state[0] = c0
    state[1] = c1
    state[2] = c2
    state[3] = c3
    state[6] = b0
    state[7] = b1
    state[8] = b2
    state[9] = b3
    state[_POS] = np.uint64(pos)


@njit(cache=True, nogil=True)
def _fill_normal(state, spare, size):
    out = np.empty(size)
    fill_normals(state, spare, out)
    return out


@njit(cache=True, nogil=True)
def _fill_gamma(state, spare, shape, size):
    out = np.empty(size)
    for i in range(size):
        out[i] = next_gamma(state, spare, shape)
    return out

"""Counter-based keyed random numbers.

Every random quantity in the package is a pure function of a 64-bit seed and
an integer key (a stream tag plus coordinates).  Nothing is consumed from a
sequential generator, so any particle, field site or time step can be
regenerated in isolation and windows can be enlarged without disturbing
values that were already realized.

The mixing function is the splitmix64 finalizer.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# stream tags
TAG_COUNT = 1
TAG_FWD = 2
TAG_BWD = 3
TAG_FIELD = 4
TAG_PARTICLE = 5
TAG_AUX = 6
TAG_SLT = 7


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def absorb(h, v):
    """Fold one signed integer coordinate into the running hash ``h``."""
    return mix64(h ^ (np.uint64(np.int64(v)) + _GOLDEN))


@njit(cache=True, inline="always")
def to_unit(h):
    """Map 64 hashed bits to a float in [0, 1) with 53-bit resolution."""
    return np.float64(h >> _S11) * _INV53


@njit(cache=True)
def key2(seed, tag):
    return absorb(mix64(np.uint64(seed) + _GOLDEN), tag)


@njit(cache=True)
def key3(seed, tag, a):
    return absorb(key2(seed, tag), a)


@njit(cache=True)
def key4(seed, tag, a, b):
    return absorb(key3(seed, tag, a), b)


@njit(cache=True)
def uniform3(seed, tag, a):
    return to_unit(key3(seed, tag, a))


@njit(cache=True)
def uniform4(seed, tag, a, b):
    return to_unit(key4(seed, tag, a, b))


@njit(cache=True)
def uniform_at(key, t):
    """Uniform number ``t`` of the substream identified by ``key``."""
    return to_unit(absorb(key, t))


@njit(cache=True)
def poisson_inverse(u, mean):
    """Inverse CDF of Poisson(mean) evaluated at u, by sequential search.

    For large means the search starts 12 standard deviations below the mean;
    the neglected lower mass is below 1e-30.
    """
    if mean <= 0.0:
        return 0
    k = 0
    if mean > 200.0:
        k = int(mean - 12.0 * np.sqrt(mean))
    logp = -mean + k * np.log(mean) - _lgamma(k + 1.0)
    p = np.exp(logp)
    cdf = p
    while u >= cdf:
        k += 1
        p *= mean / k
        cdf += p
        if p < 1e-300 and k > mean:
            break
    return k


@njit(cache=True)
def _lgamma(x):
    # Stirling series after shifting the argument to x >= 10
    r = 0.0
    while x < 10.0:
        r -= np.log(x)
        x += 1.0
    return r + (x - 0.5) * np.log(x) - x + 0.5 * np.log(2 * np.pi) + 1.0 / (12 * x) - 1.0 / (360 * x ** 3)


@njit(cache=True)
def uniforms(seed, tag, count):
    """``count`` keyed uniforms indexed 0..count-1 (for vectorized helpers)."""
    out = np.empty(count)
    base = key2(seed, tag)
    for i in range(count):
        out[i] = to_unit(absorb(base, i))
    return out


def substream_seed(seed: int, *coords: int) -> int:
    """Derive a child 64-bit seed from a parent seed and integer coordinates."""
    h = int(key2(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), TAG_AUX))
    for c in coords:
        h = int(absorb(np.uint64(h), int(c)))
    return h


def numpy_generator(seed: int, *coords: int) -> np.random.Generator:
    """A sequential numpy generator for bulk work keyed like everything else."""
    return np.random.Generator(np.random.Philox(key=substream_seed(seed, *coords)))


def as_seed(seed: int) -> np.uint64:
    """Normalize any Python integer to an unsigned 64-bit seed."""
    return np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)

"""Cones, record times, influence fields and the regeneration time.

Cone geometry is exact.  The slope ``v_bar`` is held as a fraction ``a/b`` and
a space-time point ``(x, n)`` is summarised by its *level* ``b*x - a*n``.  A
particle trajectory ``w`` meets the forward cone of ``y = (x, n)`` iff
``b*w(t) - a*t >= level(y)`` for some ``t >= n``, and meets the backward cone
iff ``b*w(t) - a*t < level(y)`` for some ``t <= n``.

Events that involve the whole future or past of a trajectory are decided on a
finite stretch of it.  What happens beyond that stretch is controlled by an
exponential martingale bound, so every verdict comes with an upper bound on
the probability that it is wrong.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import numpy as np
from numba import njit
from scipy.optimize import brentq

from . import rng
from .env import Environment, StreamingCloud, _counts, lazy_step, particle_keys
from .errors import ParameterError, PreconditionError, WindowRangeError
from .walker import UniformField, WalkParams, field_value, parallel_map, replica_seeds, run_walk

INT_HI = np.iinfo(np.int64).max
INT_LO = np.iinfo(np.int64).min
EXTENSION_CAP = 4_000_000


# --------------------------------------------------------------------------
# parameters

def _as_fraction(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, int):
        return Fraction(v)
    return Fraction(str(float(v))).limit_denominator(10 ** 6)


@dataclass(frozen=True)
class ConeParams:
    v_star: float

    def __post_init__(self):
        if not (0 < float(self.v_star) <= 1):
            raise ParameterError(f"v_star={self.v_star} must lie in (0, 1]")

    @property
    def v_bar(self) -> Fraction:
        return _as_fraction(self.v_star) / 3

    @property
    def slope(self) -> tuple:
        """(a, b) with v_bar = a / b in lowest terms."""
        vb = self.v_bar
        return vb.numerator, vb.denominator


@dataclass(frozen=True)
class RegenConfig:
    """Good-record horizon and certificate budget.

    ``T`` must be large enough that ``T_dprime >= 1``.
    """

    T: int
    v_star: float
    p_min: float
    c2_hat: float | None = None
    cert_tol: float = 1e-3
    delta: float = dc_field(init=False)
    epsilon: float = dc_field(init=False)
    T_prime: int = dc_field(init=False)
    T_dprime: int = dc_field(init=False)

    def __post_init__(self):
        cone = ConeParams(self.v_star)
        if not (0 < self.p_min < 1):
            raise ParameterError("p_min must lie strictly between 0 and 1")
        if not (0 < self.cert_tol < 1):
            raise ParameterError("cert_tol must lie in (0, 1)")
        delta = 1.0 / (4.0 * math.log(1.0 / self.p_min))
        if self.T < math.exp(1.0 / delta):
            raise ParameterError(f"T={self.T} is below e^(1/delta)={math.exp(1 / delta):.4g}")
        c2 = float(cone.v_bar) / 2 if self.c2_hat is None else self.c2_hat
        if c2 <= 0:
            raise ParameterError("c2_hat must be positive")
        eps = min(c2 * delta, 1.0) / 4.0
        object.__setattr__(self, "c2_hat", c2)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "T_prime", int(math.floor(self.T ** eps)))
        object.__setattr__(self, "T_dprime", int(math.floor(delta * math.log(self.T))))

    @classmethod
    def for_walk(cls, params: WalkParams, v_star: float, T: int, **kw) -> "RegenConfig":
        return cls(T=T, v_star=v_star, p_min=params.p_min, **kw)

    @property
    def cone(self) -> ConeParams:
        return ConeParams(self.v_star)


@dataclass(frozen=True)
class KeyedCloud:
    """The full two-sided particle system of a seed (no window)."""

    rho: float
    q: float
    seed: int

    def __post_init__(self):
        if self.rho < 0:
            raise ParameterError("rho must be nonnegative")
        if not (0 <= self.q <= 1):
            raise ParameterError("q must lie in [0, 1]")


# --------------------------------------------------------------------------
# cones, records, kappa

def _levels(v_bar):
    vb = _as_fraction(v_bar)
    return vb.numerator, vb.denominator


def in_up_cone(base, y, v_bar) -> bool:
    a, b = _levels(v_bar)
    dx, dn = y[0] - base[0], y[1] - base[1]
    return dx >= 0 and dn >= 0 and b * dx >= a * dn


def in_down_cone(base, y, v_bar) -> bool:
    a, b = _levels(v_bar)
    dx, dn = y[0] - base[0], y[1] - base[1]
    return dx <= 0 and dn <= 0 and b * dx < a * dn


def in_shifted_cone(k: int, y, v_bar) -> bool:
    """Membership in the forward cone based at ((1 - v_bar) k, 0)."""
    a, b = _levels(v_bar)
    x, n = y
    shift = (b - a) * k
    return n >= 0 and b * x >= shift and b * x - a * n >= shift


def kappa(y, v_bar) -> int:
    """Index of the last shifted cone containing ``y``, by a floor division."""
    a, b = _levels(v_bar)
    x, n = y
    if n < 0:
        raise ParameterError("kappa is defined for nonnegative times")
    return (b * x - a * n) // (b - a)


@njit(cache=True)
def _records(xs, a, b):
    # k-th record: first n with b*X_n - a*n >= (b - a) k
    out_k = np.empty(xs.size, dtype=np.int64)
    out_n = np.empty(xs.size, dtype=np.int64)
    m = 0
    k = 1
    for n in range(xs.size):
        lvl = b * xs[n] - a * n
        while lvl >= (b - a) * k:
            out_k[m] = k
            out_n[m] = n
            m += 1
            k += 1
    return out_k[:m], out_n[:m]


def record_times(path, v_bar) -> list:
    """All ``(k, R_k)`` with ``R_k`` inside the path; ``path[n]`` is X_n, X_0 = 0."""
    xs = np.asarray(getattr(path, "xs", path), dtype=np.int64)
    a, b = _levels(v_bar)
    ks, ns = _records(xs - xs[0] if xs.size else xs, a, b)
    return list(zip(ks.tolist(), ns.tolist()))


# --------------------------------------------------------------------------
# martingale tail exponents

def particle_exponent(q: float, v_bar: float) -> float:
    """theta > 0 with E[exp(theta (step - v_bar))] = 1 for a lazy step.

    Then a trajectory level rises by ``d`` above its current value with
    probability at most ``exp(-theta d)`` (and likewise backwards in time).
    """
    v_bar = float(v_bar)
    if q >= 1:
        return math.inf
    f = lambda t: math.log((1 - q) / 2 * (math.exp(t) + math.exp(-t)) + q) - t * v_bar
    hi = 1.0
    while f(hi) <= 0:
        hi *= 2
    lo = hi
    while f(lo) >= 0:
        lo /= 2
    return brentq(f, lo, hi, xtol=1e-14)


def walker_exponent(p_min: float, v_bar: float) -> float:
    """Exponent for the walker dropping below a slope-``v_bar`` line.

    The walker dominates i.i.d. steps that go right with probability
    ``p_min``.  Returns 0 when that comparison walk is not faster than
    ``v_bar`` (no certificate possible) and infinity when ``p_min = 1``.
    """
    v_bar = float(v_bar)
    if p_min >= 1:
        return math.inf
    if 2 * p_min - 1 - v_bar <= 1e-12:
        return 0.0
    g = lambda t: math.log(p_min * math.exp(-t * (1 - v_bar)) + (1 - p_min) * math.exp(t * (1 + v_bar)))
    hi = 1.0
    while g(hi) <= 0:
        hi *= 2
    lo = hi
    while g(lo) >= 0:
        lo /= 2
    return brentq(g, lo, hi, xtol=1e-14)


def _tail(theta: float, gap: float) -> float:
    if gap <= 0:
        return 1.0
    if math.isinf(theta):
        return 0.0
    return min(1.0, math.exp(-theta * gap))


# --------------------------------------------------------------------------
# trajectory classification

@njit(cache=True)
def _ntail(theta_s, gap):
    if gap <= 0:
        return 1.0
    v = np.exp(-theta_s * gap)
    return v if v < 1.0 else 1.0


@njit(cache=True)
def _trace_keyed(fk, bk, z, left, stay, a, b, lv, nq, theta_s, dsc, cap,
                 smax, pmin, up, down, eu, ed):
    """Classify keyed particle ``z`` against query levels ``lv`` at times ``nq``.

    The trajectory is followed forward until its level sits ``dsc`` below every
    still-unreached query level, and backward until it sits ``dsc`` above every
    level whose backward-cone status is still needed.
    """
    J = lv.size
    nmax = 0
    for j in range(J):
        if nq[j] > nmax:
            nmax = nq[j]
    x = z
    smax[0] = b * z
    for t in range(1, nmax + 1):
        x += lazy_step(rng.uniform_at(fk, t), left, stay)
        smax[t] = b * x - a * t
    last = smax[nmax]
    pmin[0] = smax[0]
    for t in range(1, nmax + 1):
        pmin[t] = min(pmin[t - 1], smax[t])
    for t in range(nmax - 1, -1, -1):
        if smax[t + 1] > smax[t]:
            smax[t] = smax[t + 1]
    cmin = INT_HI
    for j in range(J):
        up[j] = smax[nq[j]] >= lv[j]
        down[j] = pmin[nq[j]] < lv[j]
        if not up[j] and lv[j] < cmin:
            cmin = lv[j]
    # forward extension
    t = nmax
    lvl = last
    mext = INT_LO
    while cmin != INT_HI and lvl > cmin - dsc and t - nmax < cap:
        t += 1
        x += lazy_step(rng.uniform_at(fk, t), left, stay)
        lvl = b * x - a * t
        if lvl > mext:
            mext = lvl
            if mext >= cmin:
                cmin = INT_HI
                for j in range(J):
                    if not up[j]:
                        if mext >= lv[j]:
                            up[j] = True
                        elif lv[j] < cmin:
                            cmin = lv[j]
    for j in range(J):
        eu[j] = 0.0 if up[j] else _ntail(theta_s, lv[j] - lvl)
    # backward extension
    cstar = INT_LO
    for j in range(J):
        if up[j] and not down[j] and lv[j] > cstar:
            cstar = lv[j]
    lvl = b * z
    bmin = lvl
    if cstar != INT_LO:
        s = 0
        xb = z
        while lvl < cstar + dsc and s < cap:
            s += 1
            xb += lazy_step(rng.uniform_at(bk, s), left, stay)
            lvl = b * xb + a * s
            if lvl < bmin:
                bmin = lvl
    for j in range(J):
        if not down[j] and bmin < lv[j]:
            down[j] = True
        ed[j] = 0.0 if down[j] else _ntail(theta_s, lvl - lv[j])


@njit(cache=True)
def _trace_path(path, t_min, a, b, lv, nq, theta_s, lvlbuf, smax, pmin, up, down, eu, ed):
    """Same classification for a stored trajectory over [t_min, t_min + len)."""
    L = path.size
    for i in range(L):
        lvlbuf[i] = b * path[i] - a * (t_min + i)
    pmin[0] = lvlbuf[0]
    for i in range(1, L):
        pmin[i] = min(pmin[i - 1], lvlbuf[i])
    smax[L - 1] = lvlbuf[L - 1]
    for i in range(L - 2, -1, -1):
        smax[i] = max(smax[i + 1], lvlbuf[i])
    for j in range(lv.size):
        i = nq[j] - t_min
        up[j] = smax[i] >= lv[j]
        down[j] = pmin[i] < lv[j]
        eu[j] = 0.0 if up[j] else _ntail(theta_s, lv[j] - lvlbuf[L - 1])
        ed[j] = 0.0 if down[j] else _ntail(theta_s, lvlbuf[0] - lv[j])


@njit(cache=True)
def _cross_err(up, down, eu, ed):
    # error bound for the verdict "in both cones" read off the finite stretch
    if up and down:
        return 0.0
    if up:
        return ed
    if down:
        return eu
    return min(eu, ed)


@njit(cache=True)
def _keyed_matrix(seed, rho, z_lo, z_hi, left, stay, a, b, lv, nq, theta_s, dsc, cap):
    counts = _counts(seed, z_lo, z_hi, rho)
    P = int(counts.sum())
    J = lv.size
    UP = np.zeros((P, J), dtype=np.bool_)
    DN = np.zeros((P, J), dtype=np.bool_)
    EU = np.zeros((P, J))
    ED = np.zeros((P, J))
    nmax = 0
    for j in range(J):
        nmax = max(nmax, nq[j])
    smax = np.empty(nmax + 1, dtype=np.int64)
    pmin = np.empty(nmax + 1, dtype=np.int64)
    p = 0
    for jz in range(counts.size):
        z = z_lo + jz
        for i in range(counts[jz]):
            fk, bk = particle_keys(seed, z, i)
            _trace_keyed(fk, bk, z, left, stay, a, b, lv, nq, theta_s, dsc, cap,
                         smax, pmin, UP[p], DN[p], EU[p], ED[p])
            p += 1
    return UP, DN, EU, ED


@njit(cache=True)
def _keyed_crossings(seed, rho, z_lo, z_hi, left, stay, a, b, lv, nq, theta_s, dsc, cap):
    """Per query: number of trajectories surely in both cones, and error mass."""
    counts = _counts(seed, z_lo, z_hi, rho)
    J = lv.size
    hits = np.zeros(J, dtype=np.int64)
    err = np.zeros(J)
    nmax = 0
    for j in range(J):
        nmax = max(nmax, nq[j])
    smax = np.empty(nmax + 1, dtype=np.int64)
    pmin = np.empty(nmax + 1, dtype=np.int64)
    up = np.zeros(J, dtype=np.bool_)
    down = np.zeros(J, dtype=np.bool_)
    eu = np.zeros(J)
    ed = np.zeros(J)
    for jz in range(counts.size):
        z = z_lo + jz
        for i in range(counts[jz]):
            fk, bk = particle_keys(seed, z, i)
            _trace_keyed(fk, bk, z, left, stay, a, b, lv, nq, theta_s, dsc, cap,
                         smax, pmin, up, down, eu, ed)
            for j in range(J):
                if up[j] and down[j]:
                    hits[j] += 1
                else:
                    err[j] += _cross_err(up[j], down[j], eu[j], ed[j])
    return hits, err


@njit(cache=True)
def _paths_matrix(paths, t_min, a, b, lv, nq, theta_s):
    P, L = paths.shape
    J = lv.size
    UP = np.zeros((P, J), dtype=np.bool_)
    DN = np.zeros((P, J), dtype=np.bool_)
    EU = np.zeros((P, J))
    ED = np.zeros((P, J))
    lvlbuf = np.empty(L, dtype=np.int64)
    smax = np.empty(L, dtype=np.int64)
    pmin = np.empty(L, dtype=np.int64)
    for p in range(P):
        _trace_path(paths[p], t_min, a, b, lv, nq, theta_s, lvlbuf, smax, pmin,
                    UP[p], DN[p], EU[p], ED[p])
    return UP, DN, EU, ED


# --------------------------------------------------------------------------
# which starting sites have to be scanned

def _outside_mass(rho, theta, c_lo, c_hi, n_hi, v_bar, z_lo, z_hi) -> float:
    """Bound on the chance that a particle starting outside [z_lo, z_hi] matters.

    A particle starting left of ``z_lo`` must climb to the lowest query level
    (martingale bound); one starting right of ``z_hi`` must fall below the
    highest query level, either within ``[0, n_hi]`` (maximal Azuma-Hoeffding
    bound) or before time 0 (martingale bound).
    """
    if rho == 0:
        return 0.0
    total = 0.0
    if math.isinf(theta):
        left_part = 0.0 if z_lo - 1 < c_lo else rho * (z_lo - 1 - math.floor(c_lo) + 1)
    else:
        left_part = rho * math.exp(-theta * (c_lo - (z_lo - 1))) / (-math.expm1(-theta))
    total += left_part
    top = c_hi + v_bar * n_hi
    z = z_hi + 1
    while True:
        d = z - top
        az = 1.0 if d <= 0 else (math.exp(-d * d / (2 * n_hi)) if n_hi > 0 else 0.0)
        bw = _tail(theta, z - c_hi)
        term = rho * (az + bw)
        total += term
        if (term < 1e-30 and d > 0) or z - z_hi > 10 ** 7:
            break
        z += 1
    return total


def _scan_range(rho, theta, c_lo, c_hi, n_hi, v_bar, tol) -> tuple:
    """Starting-site range whose complement contributes at most ``tol``."""
    v_bar = float(v_bar)
    if rho == 0:
        return int(math.floor(c_lo)), int(math.floor(c_lo)) - 1, 0.0
    if math.isinf(theta):
        z_lo = int(math.floor(c_lo))
    else:
        z_lo = int(math.floor(c_lo - math.log(rho / (tol * -math.expm1(-theta))) / theta))
    top = c_hi + v_bar * n_hi
    spread = math.sqrt(2 * max(n_hi, 1) * math.log(4 * rho * max(n_hi, 1) / tol + 2))
    z_hi = int(math.ceil(top + spread))
    if not math.isinf(theta):
        z_hi = max(z_hi, int(math.ceil(c_hi + math.log(4 * rho / (tol * -math.expm1(-theta))) / theta)))
    res = _outside_mass(rho, theta, c_lo, c_hi, n_hi, v_bar, z_lo, z_hi)
    while res > tol:
        z_lo -= 8
        z_hi += 8
        res = _outside_mass(rho, theta, c_lo, c_hi, n_hi, v_bar, z_lo, z_hi)
    return z_lo, z_hi, res


# --------------------------------------------------------------------------
# membership scans on either kind of source

@dataclass
class Membership:
    """Per trajectory and query: forward/backward cone verdicts and error bounds."""

    up: np.ndarray
    down: np.ndarray
    err_up: np.ndarray
    err_down: np.ndarray
    outside: float

    def crossing(self) -> np.ndarray:
        return self.up & self.down

    def crossing_err(self) -> np.ndarray:
        e = np.where(self.up, self.err_down, np.where(self.down, self.err_up,
                                                      np.minimum(self.err_up, self.err_down)))
        return np.where(self.up & self.down, 0.0, e)

    def forward_only(self) -> np.ndarray:
        return self.up & ~self.down

    def forward_only_err(self) -> np.ndarray:
        return np.where(self.up, np.where(self.down, 0.0, self.err_down), self.err_up)


def _slope_and_theta(source, v_bar):
    a, b = _levels(v_bar)
    q = source.q if isinstance(source, KeyedCloud) else source.cfg.q
    theta = particle_exponent(q, float(v_bar))
    return a, b, theta


def _particle_tol(cert_tol: float) -> float:
    return cert_tol * 1e-7


def membership(source, queries, v_bar, cert_tol: float = 1e-3) -> Membership:
    """Cone verdicts for every trajectory that can matter to ``queries``.

    ``queries`` is a sequence of space-time points.
    """
    a, b, theta = _slope_and_theta(source, v_bar)
    qs = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
    lv = b * qs[:, 0] - a * qs[:, 1]
    nq = qs[:, 1].copy()
    theta_s = theta / b
    if isinstance(source, KeyedCloud):
        if qs.size and nq.min() < 0:
            raise WindowRangeError("queries on a keyed cloud need nonnegative times")
        if qs.size == 0 or source.rho == 0:
            J = lv.size
            empty = np.zeros((0, J), dtype=bool)
            return Membership(empty, empty, np.zeros((0, J)), np.zeros((0, J)), 0.0)
        c_lo, c_hi = lv.min() / b, lv.max() / b
        z_lo, z_hi, outside = _scan_range(source.rho, theta, c_lo, c_hi, int(nq.max()), float(v_bar),
                                          cert_tol * 1e-3)
        dsc = _level_margin(theta, b, cert_tol)
        left = (1 - source.q) / 2
        UP, DN, EU, ED = _keyed_matrix(rng.as_seed(source.seed), float(source.rho), z_lo, z_hi,
                                       left, left + source.q, a, b, lv, nq, theta_s, dsc, EXTENSION_CAP)
        return Membership(UP, DN, EU, ED, outside)
    if isinstance(source, Environment):
        c = source.cfg
        for x, n in qs:
            if not (c.x_min <= x <= c.x_max and c.t_min <= n <= c.t_max):
                raise WindowRangeError(f"({x},{n}) lies outside the realized window")
        UP, DN, EU, ED = _paths_matrix(source.paths, c.t_min, a, b, lv, nq, theta_s)
        outside = 0.0
        if qs.size and c.rho > 0:
            outside = _outside_mass(c.rho, theta, lv.min() / b, lv.max() / b, max(int(nq.max()), 0),
                                    float(v_bar), c.x_min, c.x_max)
        return Membership(UP, DN, EU, ED, min(outside, 1.0))
    raise ParameterError(f"unsupported environment type {type(source).__name__}")


def _level_margin(theta: float, b: int, cert_tol: float) -> int:
    if math.isinf(theta):
        return 0
    return int(math.ceil(b * math.log(1.0 / _particle_tol(cert_tol)) / theta))


def crossing_counts(source: KeyedCloud, queries, v_bar, cert_tol: float = 1e-3):
    """Per query point: trajectories surely meeting both cones, and error bound."""
    a, b, theta = _slope_and_theta(source, v_bar)
    qs = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
    J = qs.shape[0]
    if J == 0 or source.rho == 0:
        return np.zeros(J, dtype=np.int64), np.zeros(J)
    lv = b * qs[:, 0] - a * qs[:, 1]
    nq = qs[:, 1].copy()
    c_lo, c_hi = lv.min() / b, lv.max() / b
    z_lo, z_hi, outside = _scan_range(source.rho, theta, c_lo, c_hi, int(nq.max()), float(v_bar),
                                      cert_tol * 1e-3)
    left = (1 - source.q) / 2
    hits, err = _keyed_crossings(rng.as_seed(source.seed), float(source.rho), z_lo, z_hi, left,
                                 left + source.q, a, b, lv, nq, theta / b,
                                 _level_margin(theta, b, cert_tol), EXTENSION_CAP)
    return hits, err + outside


# --------------------------------------------------------------------------
# influence fields

@dataclass(frozen=True)
class InfluenceValue:
    value: int
    certified: bool
    residual: float
    determined: bool = True

    def __iter__(self):
        return iter((self.value, self.certified, self.residual))


def _first_clear(both: np.ndarray) -> int:
    # both[p, l]: trajectory p links y and y + (l, l)
    occupied = both.any(axis=0) if both.size else np.zeros(both.shape[1], dtype=bool)
    free = np.flatnonzero(~occupied)
    return int(free[0]) if free.size else -1


def _influence_scan(source, y, v_bar, cert_tol, max_shift, restrict_left: int | None):
    x, n = int(y[0]), int(y[1])
    shifts = max_shift
    limit = None
    if isinstance(source, Environment):
        c = source.cfg
        limit = c.t_max - n
        if limit < 0 or not (c.x_min <= x <= c.x_max) or n < c.t_min:
            raise WindowRangeError(f"({x},{n}) lies outside the realized window")
        shifts = min(shifts, limit)
    while True:
        pts = [(x + l, n + l) for l in range(shifts + 1)]
        if isinstance(source, Environment):
            c = source.cfg
            pts = [p for p in pts if p[0] <= c.x_max]
        extra = []
        if restrict_left is not None:
            extra = [(x - restrict_left, n)]
            if isinstance(source, Environment) and x - restrict_left < source.cfg.x_min:
                raise WindowRangeError("the reference point of the local field leaves the window")
        mem = membership(source, pts + extra, v_bar, cert_tol)
        L = len(pts)
        both = mem.crossing()[:, :L] & mem.crossing()[:, :1]
        err = mem.crossing_err()[:, :L]
        if restrict_left is not None:
            keep = mem.forward_only()[:, L:L + 1]
            both &= keep
            extra_err = mem.forward_only_err()[:, L]
        h = _first_clear(both)
        if h >= 0 or (limit is not None and shifts >= limit) or L < shifts + 1:
            break
        shifts *= 2
    determined = h >= 0
    if not determined:
        h = L
    cols = list(range(min(h, L - 1) + 1)) if determined else list(range(L))
    resid = float(err[:, cols].sum()) + mem.outside * len(cols)
    if restrict_left is not None and err.shape[0]:
        resid += float(extra_err.sum())
    resid = min(resid, 1.0)
    return InfluenceValue(h, determined and resid <= cert_tol, resid, determined)


def influence_field(source, y, v_bar, cert_tol: float = 1e-3, max_shift: int = 64) -> InfluenceValue:
    """Smallest diagonal shift ``l`` with no trajectory linking both cone pairs.

    A trajectory links ``y`` and ``y + (l, l)`` when it meets both the forward and
    backward cone of each.  On a dense window the scan stops at the window's
    last time; if no clear shift is found there, the result is a lower bound
    marked undetermined.
    """
    return _influence_scan(source, y, v_bar, cert_tol, max_shift, None)


def local_influence_field(source, y, cfg: RegenConfig, max_shift: int = 64) -> InfluenceValue:
    """Influence field restricted to trajectories avoiding a left reference cone.

    Only trajectories that meet the forward cone but not the backward cone of
    ``y - (floor((1 - v_bar) T'), 0)`` are counted, so the result never exceeds
    :func:`influence_field`.
    """
    vb = cfg.cone.v_bar
    back = math.floor((1 - vb) * cfg.T_prime)
    return _influence_scan(source, y, vb, cfg.cert_tol, max_shift, back)


# --------------------------------------------------------------------------
# walking

def walk_path(source, field: UniformField, params: WalkParams, horizon: int):
    """Walker path from (0, 0) and the probability bound of the cloud truncation."""
    if isinstance(source, KeyedCloud):
        if source.rho == 0 or params.p_circ == params.p_bullet:
            return run_walk(None, field, params, (0, 0), horizon).xs, 0.0
        cloud = StreamingCloud(source.rho, source.q, source.seed, 0, max(horizon, 1))
        return run_walk(cloud, field, params, (0, 0), horizon).xs, cloud.residual
    return run_walk(source, field, params, (0, 0), horizon).xs, 0.0


# --------------------------------------------------------------------------
# regeneration

NOT_FOUND = "not found"
UNCERTIFIED = "uncertified"
FOUND = "found"


@dataclass
class RegenReport:
    origin: tuple
    record_index: np.ndarray
    record_time: np.ndarray
    record_site: np.ndarray
    crossing: np.ndarray
    crossing_residual: np.ndarray
    confined: np.ndarray
    confine_residual: np.ndarray
    status: str = NOT_FOUND
    index: int | None = None
    tau: int | None = None
    x_tau: int | None = None
    residual: float = math.nan
    horizon: int = 0
    good: list | None = None

    @property
    def found(self) -> bool:
        return self.status == FOUND

    @property
    def certified(self) -> bool:
        return self.status == FOUND

    def as_row(self) -> dict:
        return {"tau": self.tau, "x_tau": self.x_tau, "certified": self.certified,
                "residual": self.residual, "status": self.status}


def _stage_bounds(start: int, end: int, first: int = 512):
    lo = start
    width = first
    while lo <= end:
        hi = min(end, start + width)
        yield lo, hi
        lo = hi + 1
        width *= 2


def regeneration_from_path(source, xs: np.ndarray, start: int, cfg: RegenConfig,
                           extra_residual: float = 0.0) -> RegenReport:
    """First certified regeneration of the path re-rooted at time ``start``.

    Records are taken relative to the cone at ``(xs[start], start)``.  For each
    record in turn the walker must stay in the record's cone up to the end of
    the path (with a tail bound beyond it) and no trajectory may meet both of
    the record's cones.  The first record that passes both with total error
    bound at most ``cfg.cert_tol`` is returned; a record that passes on the
    finite data but exceeds the budget stops the search as uncertified.
    """
    cone = cfg.cone
    a, b = cone.slope
    xs = np.asarray(xs, dtype=np.int64)
    H = xs.size - 1
    origin = (int(xs[start]), int(start)) if H >= start else (0, start)
    if H < start:
        raise PreconditionError("the path does not reach the requested start")
    rel = xs[start:] - xs[start]
    ks, rts = _records(rel, a, b)
    times = rts + start
    sites = xs[times]
    K = ks.size
    rep = RegenReport(origin, ks, times, sites, np.zeros(K, bool), np.full(K, np.nan),
                      np.zeros(K, bool), np.full(K, np.nan), horizon=H)
    if K == 0:
        return rep
    lv = b * sites - a * times
    psi = b * xs - a * np.arange(xs.size)
    sufmin = np.minimum.accumulate(psi[::-1])[::-1]
    theta_w = walker_exponent(cfg.p_min, float(cone.v_bar))
    rep.confined[:] = sufmin[times] >= lv
    rep.confine_residual[:] = [_tail(theta_w, (psi[-1] - c) / b) for c in lv]
    for lo, hi in _stage_bounds(start, H):
        sel = np.flatnonzero((times >= lo) & (times <= hi))
        if sel.size == 0:
            continue
        cand = sel[rep.confined[sel]]
        if cand.size:
            pts = np.stack([sites[cand], times[cand]], axis=1)
            if isinstance(source, KeyedCloud):
                hits, err = crossing_counts(source, pts, cone.v_bar, cfg.cert_tol)
            else:
                mem = membership(source, pts, cone.v_bar, cfg.cert_tol)
                hits = mem.crossing().sum(axis=0)
                err = mem.crossing_err().sum(axis=0) + mem.outside
            rep.crossing[cand] = hits > 0
            rep.crossing_residual[cand] = err
        for j in sel:
            if not rep.confined[j] or rep.crossing[j]:
                continue
            total = float(rep.crossing_residual[j] + rep.confine_residual[j] + extra_residual)
            rep.index, rep.tau, rep.x_tau = int(ks[j]), int(times[j]), int(sites[j])
            rep.residual = min(total, 1.0)
            rep.status = FOUND if total <= cfg.cert_tol else UNCERTIFIED
            return rep
    return rep


def regeneration_time(source, field: UniformField, params: WalkParams, cfg: RegenConfig,
                      horizon: int) -> RegenReport:
    if horizon < 0:
        raise ParameterError("horizon must be nonnegative")
    xs, cloud_res = walk_path(source, field, params, horizon)
    return regeneration_from_path(source, xs, 0, cfg, cloud_res)


@dataclass
class RegenSequence:
    taus: list
    sites: list
    segments: list
    complete: bool
    residual: float
    reports: list
    x_end: int | None = None
    horizon: int | None = None

    def increments(self) -> tuple:
        """(time, space) increments between consecutive regenerations."""
        t = np.diff(np.asarray(self.taus, dtype=np.int64))
        x = np.diff(np.asarray(self.sites, dtype=np.int64))
        return t, x


def regen_sequence(source, field: UniformField, params: WalkParams, cfg: RegenConfig,
                   horizon: int, count: int) -> RegenSequence:
    """Successive regenerations, each found by re-rooting at the previous one."""
    xs, cloud_res = walk_path(source, field, params, horizon)
    start = 0
    taus, sites, segs, reps = [], [], [], []
    residual = 0.0
    while len(taus) < count:
        rep = regeneration_from_path(source, xs, start, cfg, cloud_res)
        reps.append(rep)
        if not rep.found:
            break
        residual += rep.residual
        taus.append(rep.tau)
        sites.append(rep.x_tau)
        segs.append(xs[start:rep.tau + 1] - xs[start])
        start = rep.tau
    return RegenSequence(taus, sites, segs, len(taus) == count, residual, reps,
                         int(xs[-1]), int(horizon))


def regen_replica(params: WalkParams, rho: float, q: float, cfg: RegenConfig, horizon: int,
                  seed: int, replica: int, count: int = 1) -> RegenSequence:
    env_seed, field_seed = replica_seeds(seed, replica)
    src = KeyedCloud(rho, q, env_seed)
    return regen_sequence(src, UniformField(field_seed), params, cfg, horizon, count)


def regen_ensemble(params: WalkParams, rho: float, q: float, cfg: RegenConfig, horizon: int,
                   seeds: int, seed: int, count: int = 1, threads: int | None = None) -> list:
    return parallel_map(lambda r: regen_replica(params, rho, q, cfg, horizon, seed, r, count),
                        range(seeds), threads)


def cone_conditioned_sample(params: WalkParams, rho: float, q: float, cfg: RegenConfig,
                            horizon: int, seed: int, max_tries: int = 10_000):
    """Rejection sampler for the law conditioned on a clear, confining origin.

    Tries replicas ``0, 1, ...`` until no trajectory meets both cones at the
    origin and the walk stays in the origin's cone, both certified.  Returns
    ``(replica, path, residual)``.
    """
    cone = cfg.cone
    a, b = cone.slope
    theta_w = walker_exponent(cfg.p_min, float(cone.v_bar))
    for r in range(max_tries):
        env_seed, field_seed = replica_seeds(seed, r)
        src = KeyedCloud(rho, q, env_seed)
        xs, cloud_res = walk_path(src, UniformField(field_seed), params, horizon)
        psi = b * xs - a * np.arange(xs.size)
        if psi.min() < 0:
            continue
        hits, err = crossing_counts(src, [(0, 0)], cone.v_bar, cfg.cert_tol)
        if hits[0]:
            continue
        res = float(err[0]) + _tail(theta_w, psi[-1] / b) + cloud_res
        if res <= cfg.cert_tol:
            return r, xs, res
    raise PreconditionError(f"no accepted sample in {max_tries} tries")


# --------------------------------------------------------------------------
# good records

UNDETERMINED = None


def good_record_flags(source, field: UniformField, xs, cfg: RegenConfig) -> list:
    """Per record: the four good-record conditions and their conjunction.

    Each entry is a dict with keys ``k``, ``time``, ``c1``..``c4``, ``good`` and
    ``residual``.  A condition is ``None`` when the path is too short to decide
    it; ``good`` is then ``None`` unless another condition already failed.
    """
    cone = cfg.cone
    vb = cone.v_bar
    a, b = cone.slope
    xs = np.asarray(getattr(xs, "xs", xs), dtype=np.int64)
    ks, rts = _records(xs - xs[0], a, b)
    T1, T2 = cfg.T_prime, cfg.T_dprime
    back = math.floor((1 - vb) * T1)
    out = []
    for j, (k, R) in enumerate(zip(ks.tolist(), rts.tolist())):
        y = (int(xs[R]), R)
        entry = {"k": k, "time": R, "c1": None, "c2": None, "c3": None, "c4": None,
                 "good": None, "residual": 0.0}
        # condition 2: uniforms on the diagonal
        entry["c2"] = all(field(y[0] + l, R + l) <= cfg.p_min for l in range(T2))
        # conditions 1 and 3 from one membership scan
        pts = [(y[0] + l, R + l) for l in range(T2 + 1)] + [(y[0] - back, R)]
        try:
            mem = membership(source, pts, vb, cfg.cert_tol)
        except WindowRangeError:
            mem = None
        if mem is not None:
            cross = mem.crossing()
            cerr = mem.crossing_err()
            fwd = mem.forward_only()
            ferr = mem.forward_only_err()
            L = T2 + 1
            triple = cross[:, :L] & cross[:, :1] & fwd[:, L:L + 1]
            clear = ~triple.any(axis=0) if triple.size else np.ones(L, bool)
            entry["c1"] = bool(clear.any())
            own_fwd = mem.forward_only()[:, 0]
            own_ferr = mem.forward_only_err()[:, 0]
            entry["c3"] = not bool((own_fwd & cross[:, T2]).any())
            entry["residual"] = float(cerr[:, :L].sum() + ferr[:, L].sum() + own_ferr.sum()
                                      + mem.outside * (L + 1))
        # condition 4: confinement between two later records
        if j + T1 < ks.size:
            if T1 <= T2:
                entry["c4"] = True
            elif j + T2 < ks.size:
                r2, r1 = int(rts[j + T2]), int(rts[j + T1])
                base = (int(xs[r2]), r2)
                entry["c4"] = all(in_up_cone(base, (int(xs[t]), t), vb) for t in range(r2 + 1, r1 + 1))
        conds = [entry[c] for c in ("c1", "c2", "c3", "c4")]
        if any(c is False for c in conds):
            entry["good"] = False
        elif all(c is True for c in conds):
            entry["good"] = True
        out.append(entry)
    return out


def h_tail_bound(rho: float, v_bar: float, l: int, terms: int = 10_000) -> float:
    """Explicit tail bound for the influence field read off its proof."""
    v_bar = float(v_bar)
    k = np.arange(terms)
    s = float(np.sum((k + 1) * np.exp(-v_bar * k / 2)))
    return rho / v_bar ** 2 * math.exp(-v_bar * l / 2) * s * s


# --------------------------------------------------------------------------
# parallelogram exits

def in_parallelogram(y, t: int, z, v_bar) -> bool:
    a, b = _levels(v_bar)
    kap = kappa(y, v_bar)
    if not in_up_cone(y, z, v_bar):
        return False
    if in_shifted_cone(kap + t, z, v_bar):
        return False
    return a * (z[1] - y[1]) <= b * t


def right_boundary(y, t: int, v_bar) -> list:
    """Enumerate points outside the parallelogram whose left neighbour is inside."""
    a, b = _levels(v_bar)
    kap = kappa(y, v_bar)
    x0, n0 = y
    top = n0 + (b * t) // a
    pts = []
    for n in range(n0, top + 1):
        # the parallelogram's row at time n ends before the level of cone kap + t
        x_hi = ((b - a) * (kap + t) + a * n) // b + 2
        for x in range(x0 - 1, x_hi + 1):
            z = (x, n)
            if not in_parallelogram(y, t, z, v_bar) and in_parallelogram(y, t, (x - 1, n), v_bar):
                pts.append(z)
    return pts


def exits_right(xs, n0: int, y, t: int, v_bar):
    """True/False for the exit side of the walk ``xs`` started at ``y``; None if it never exits."""
    for i in range(1, len(xs)):
        z = (int(xs[i]), n0 + i)
        if not in_parallelogram(y, t, z, v_bar):
            return in_parallelogram(y, t, (z[0] - 1, z[1]), v_bar)
    return None


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> tuple:
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    den = 1 + z * z / trials
    mid = (p + z * z / (2 * trials)) / den
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def parallelogram_exit_probe(params: WalkParams, rho: float, q: float, y, t: int, cfg: RegenConfig,
                             replicas: int, seed: int, threads: int | None = None) -> dict:
    """Monte Carlo frequency of leaving the parallelogram through its right side."""
    if t < 4:
        raise PreconditionError("the exit estimate needs t >= 4")
    vb = cfg.cone.v_bar
    a, b = cfg.cone.slope
    x0, n0 = int(y[0]), int(y[1])
    if n0 < 0:
        raise ParameterError("start time must be nonnegative")
    steps = (b * t) // a + 2

    def one(r):
        env_seed, field_seed = replica_seeds(seed, r)
        field = UniformField(field_seed)
        if rho == 0 or params.p_circ == params.p_bullet:
            path = run_walk(None, field, params, (x0, n0), steps)
        else:
            cloud = StreamingCloud(rho, q, env_seed, x0, n0 + steps)
            path = run_walk(cloud, field, params, (x0, n0), steps)
        return exits_right(path.xs, n0, (x0, n0), t, vb)

    res = parallel_map(one, range(replicas), threads)
    hits = sum(1 for r in res if r)
    lo, hi = wilson_interval(hits, replicas)
    return {"estimate": hits / replicas if replicas else math.nan, "ci_lo": lo, "ci_hi": hi,
            "replicas": replicas, "lower_positive": lo > 0,
            "boundary_size": len(right_boundary((x0, n0), t, vb)), "height": (b * t) // a}

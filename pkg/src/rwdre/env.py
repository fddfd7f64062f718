"""Poisson cloud of independent lazy random walks on a finite window.

At time 0 site ``z`` holds ``N(z, 0) ~ Poisson(rho)`` particles.  Particle
``(z, i)`` follows a two-sided lazy walk through ``z`` at time 0: forward
increments for positive times and, independently, backward increments for
negative times.  All randomness is keyed by ``(seed, z, i, t)`` (see
:mod:`rwdre.rng`), so two windows built from the same seed agree on every
particle they share.

Because particles move at most one site per unit time, occupancy at
``(x, n)`` is free of truncation effects when
``x_min + |n| <= x <= x_max - |n|`` (the *exact region*).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import rng
from .errors import ParameterError, PreconditionError, ResourceError, WindowRangeError
from .kernel import heat_kernel

DEFAULT_MAX_CELLS = 60_000_000


# --------------------------------------------------------------------------
# keyed streams (shared with the streaming environment and the estimators)

@njit(cache=True)
def site_count(seed, z, rho):
    return rng.poisson_inverse(rng.uniform3(seed, rng.TAG_COUNT, z), rho)


@njit(cache=True)
def particle_keys(seed, z, i):
    """Forward and backward substream keys of particle (z, i)."""
    k = rng.key4(seed, rng.TAG_PARTICLE, z, i)
    return rng.absorb(k, rng.TAG_FWD), rng.absorb(k, rng.TAG_BWD)


@njit(cache=True, inline="always")
def lazy_step(u, left, stay):
    # left = (1-q)/2, stay = (1+q)/2 : cumulative thresholds
    if u < left:
        return -1
    if u < stay:
        return 0
    return 1


@njit(cache=True)
def _fill_positions(seed, zs, idx, left, stay, t_min, t_max, out):
    for p in range(zs.size):
        fk, bk = particle_keys(seed, zs[p], idx[p])
        pos = zs[p]
        out[p, -t_min] = pos
        for t in range(1, t_max + 1):
            pos += lazy_step(rng.uniform_at(fk, t), left, stay)
            out[p, t - t_min] = pos
        pos = zs[p]
        for s in range(1, -t_min + 1):
            pos += lazy_step(rng.uniform_at(bk, s), left, stay)
            out[p, -s - t_min] = pos


@njit(cache=True)
def _counts(seed, z_lo, z_hi, rho):
    out = np.empty(z_hi - z_lo + 1, dtype=np.int64)
    for j in range(out.size):
        out[j] = site_count(seed, z_lo + j, rho)
    return out


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvConfig:
    rho: float
    q: float
    x_min: int
    x_max: int
    t_max: int
    t_min: int | None = None
    seed: int = 0
    max_cells: int = DEFAULT_MAX_CELLS

    def __post_init__(self):
        if self.rho < 0 or not math.isfinite(self.rho):
            raise ParameterError(f"density rho={self.rho} must be a finite nonnegative number")
        if not (0 <= self.q <= 1):
            raise ParameterError(f"holding probability q={self.q} outside [0, 1]")
        if self.x_min > self.x_max:
            raise ParameterError("x_min must not exceed x_max")
        if self.t_max < 0:
            raise ParameterError("t_max must be nonnegative")
        if self.t_min is None:
            object.__setattr__(self, "t_min", -(self.t_max // 4))
        if self.t_min > 0:
            raise ParameterError("t_min must be nonpositive")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def duration(self) -> int:
        return self.t_max - self.t_min + 1

    def expected_cells(self) -> float:
        return self.rho * self.width * self.duration


class Environment:
    """A realized cloud of trajectories on ``[x_min, x_max] x [t_min, t_max]``.

    Particles are identified by ``(z, i)`` with ``z`` their position at time 0.
    ``paths[p, n - t_min]`` is the position of particle ``p`` at time ``n``;
    positions may leave the spatial window, they are never clipped.
    """

    def __init__(self, cfg: EnvConfig, zs: np.ndarray, idx: np.ndarray, paths: np.ndarray):
        self.cfg = cfg
        self.zs = zs
        self.idx = idx
        self.paths = paths
        self._slices: dict = {}

    # construction -----------------------------------------------------------
    @classmethod
    def from_trajectories(cls, cfg: EnvConfig, trajectories) -> "Environment":
        """Build from explicit paths, each an integer array over ``[t_min, t_max]``."""
        trajectories = [np.asarray(t, dtype=np.int64) for t in trajectories]
        for t in trajectories:
            if t.size != cfg.duration:
                raise ParameterError("trajectory length does not match the time window")
            if t.size > 1 and np.abs(np.diff(t)).max() > 1:
                raise ParameterError("trajectory jumps by more than one site")
        paths = np.array(trajectories, dtype=np.int64).reshape(len(trajectories), cfg.duration)
        zs = paths[:, -cfg.t_min].copy() if len(trajectories) else np.zeros(0, dtype=np.int64)
        idx = np.zeros(zs.size, dtype=np.int64)
        seen: dict = {}
        for p, z in enumerate(zs):
            idx[p] = seen.get(int(z), 0)
            seen[int(z)] = idx[p] + 1
        return cls(cfg, zs, idx, paths)

    def with_particles(self, trajectories) -> "Environment":
        """A new environment holding these particles plus the given extra paths."""
        extra = Environment.from_trajectories(self.cfg, trajectories)
        paths = np.concatenate([self.paths, extra.paths]) if extra.paths.size else self.paths.copy()
        env = Environment.from_trajectories(self.cfg, list(paths))
        return env

    # queries ----------------------------------------------------------------
    def _check(self, x, n):
        c = self.cfg
        if not (c.x_min <= x <= c.x_max and c.t_min <= n <= c.t_max):
            raise WindowRangeError(f"({x},{n}) lies outside the realized window")

    def in_exact_region(self, x: int, n: int) -> bool:
        c = self.cfg
        return c.x_min + abs(n) <= x <= c.x_max - abs(n) and c.t_min <= n <= c.t_max

    def positions_at(self, n: int) -> np.ndarray:
        return self.paths[:, n - self.cfg.t_min]

    def _slice(self, n: int) -> np.ndarray:
        s = self._slices.get(n)
        if s is None:
            c = self.cfg
            pos = self.positions_at(n)
            pos = pos[(pos >= c.x_min) & (pos <= c.x_max)] - c.x_min
            s = np.bincount(pos, minlength=c.width).astype(np.int64)
            self._slices[n] = s
        return s

    def count(self, x: int, n: int) -> int:
        self._check(x, n)
        return int(self._slice(n)[x - self.cfg.x_min])

    def occupied(self, x: int, n: int) -> bool:
        return self.count(x, n) >= 1

    def occupancy_grid(self, t_lo: int | None = None, t_hi: int | None = None) -> np.ndarray:
        """Boolean array ``grid[n - t_lo, x - x_min]`` over the whole spatial window."""
        c = self.cfg
        t_lo = c.t_min if t_lo is None else t_lo
        t_hi = c.t_max if t_hi is None else t_hi
        self._check(c.x_min, t_lo)
        self._check(c.x_min, t_hi)
        return _grid(self.paths[:, t_lo - c.t_min: t_hi - c.t_min + 1], c.x_min, c.width)

    @property
    def n_particles(self) -> int:
        return int(self.zs.size)

    def initial_counts(self) -> np.ndarray:
        c = self.cfg
        inside = (self.zs >= c.x_min) & (self.zs <= c.x_max)
        return np.bincount(self.zs[inside] - c.x_min, minlength=c.width)

    def rows(self):
        """Dump rows ``(z, i, n, position)``."""
        c = self.cfg
        for p in range(self.n_particles):
            for j, pos in enumerate(self.paths[p]):
                yield int(self.zs[p]), int(self.idx[p]), c.t_min + j, int(pos)


@njit(cache=True)
def _grid(paths, x_min, width):
    out = np.zeros((paths.shape[1], width), dtype=np.bool_)
    for p in range(paths.shape[0]):
        for j in range(paths.shape[1]):
            k = paths[p, j] - x_min
            if 0 <= k < width:
                out[j, k] = True
    return out


def sample_environment(cfg: EnvConfig) -> Environment:
    if cfg.expected_cells() > cfg.max_cells:
        raise ResourceError(
            f"expected {cfg.expected_cells():.3g} trajectory cells exceeds cap {cfg.max_cells:.3g}")
    seed = rng.as_seed(cfg.seed)
    counts = _counts(seed, cfg.x_min, cfg.x_max, float(cfg.rho))
    zs = np.repeat(np.arange(cfg.x_min, cfg.x_max + 1, dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    idx = np.arange(zs.size, dtype=np.int64) - np.repeat(starts, counts)
    if zs.size * cfg.duration > cfg.max_cells:
        raise ResourceError(f"realized {zs.size} particles exceed the cell cap")
    paths = np.empty((zs.size, cfg.duration), dtype=np.int64)
    left = (1.0 - cfg.q) / 2.0
    _fill_positions(seed, zs, idx, left, left + cfg.q, cfg.t_min, cfg.t_max, paths)
    return Environment(cfg, zs, idx, paths)


def covariance_theory(rho: float, q: float, n: int) -> float:
    """Covariance of the occupancy indicators of (0,0) and (0,n), for n >= 1."""
    if n < 1:
        raise ParameterError("the covariance formula is established for n >= 1 only")
    if rho < 0:
        raise ParameterError("rho must be nonnegative")
    p = heat_kernel(q, n)(0)
    return math.exp(-2 * rho) * math.expm1(rho * p)


# --------------------------------------------------------------------------
# Markov property of the light cone below a box

def light_cone_base(box) -> tuple:
    """Sites at time 0 from which a speed-one particle can reach ``box``.

    ``box = (a, b, n, n2)`` stands for ``[a, b] x [n, n2]`` with ``0 <= n <= n2``.
    """
    a, b, n, n2 = box
    return a - n2, b + n2


def boundary_determinism_check(env1: Environment, env2: Environment, box) -> bool:
    """Whether occupancy on ``box`` coincides in the two environments.

    Requires identical time-0 counts on the cone base and identical forward
    paths of the particles starting there; everything else (the past, and
    particles outside the base) may differ.
    """
    a, b, n, n2 = box
    if not (0 <= n <= n2) or a > b:
        raise ParameterError("box must be [a,b] x [n,n2] with 0 <= n <= n2")
    lo, hi = light_cone_base(box)
    for env in (env1, env2):
        c = env.cfg
        if not (c.x_min <= lo and hi <= c.x_max and n2 <= c.t_max):
            raise PreconditionError("window does not contain the light cone of the box")

    def base_paths(env):
        c = env.cfg
        sel = (env.zs >= lo) & (env.zs <= hi)
        fwd = env.paths[sel][:, -c.t_min: n2 - c.t_min + 1]
        return sorted(map(tuple, fwd.tolist()))

    c1 = env1.initial_counts()[lo - env1.cfg.x_min: hi - env1.cfg.x_min + 1]
    c2 = env2.initial_counts()[lo - env2.cfg.x_min: hi - env2.cfg.x_min + 1]
    if not np.array_equal(c1, c2):
        diff = int(np.flatnonzero(c1 != c2)[0]) + lo
        raise PreconditionError(f"time-0 counts differ at site {diff} of the cone base")
    if base_paths(env1) != base_paths(env2):
        raise PreconditionError("forward paths from the cone base differ")
    for t in range(n, n2 + 1):
        for x in range(a, b + 1):
            if env1.occupied(x, t) != env2.occupied(x, t):
                return False
    return True


# --------------------------------------------------------------------------
# Streaming cloud: the same particles, advanced lazily on demand.
#
# A walker started at time 0 only ever asks about the site it stands on.  The
# streaming cloud answers such queries by scanning particles whose starting
# site lies within ``margin`` of the queried site, advancing each one just far
# enough.  Particles farther away are ignored; the probability that one of them
# would have been present is bounded by ``truncation_residual``.

@njit(cache=True)
def _advance(p, n, zs, fkeys, pos, time, left, stay):
    if time[p] > n:
        pos[p] = zs[p]
        time[p] = 0
    t = time[p]
    x = pos[p]
    k = fkeys[p]
    while t < n:
        t += 1
        x += lazy_step(rng.uniform_at(k, t), left, stay)
    pos[p] = x
    time[p] = t


@njit(cache=True)
def stream_occupied(x, n, z_lo, starts, zs, fkeys, pos, time, left, stay, margin):
    """1 if (x, n) holds a particle, 0 if not, -1 if the scan leaves the site range."""
    n_sites = starts.size - 1
    for d in range(margin + 1):
        for side in range(2):
            if d == 0 and side == 1:
                continue
            z = x + d if side == 0 else x - d
            j = z - z_lo
            if j < 0 or j >= n_sites:
                return -1
            for p in range(starts[j], starts[j + 1]):
                # a particle that is too far to arrive in time is left alone
                if time[p] <= n and abs(pos[p] - x) > n - time[p]:
                    continue
                _advance(p, n, zs, fkeys, pos, time, left, stay)
                if pos[p] == x:
                    return 1
    return 0


@njit(cache=True)
def _stream_particles(seed, z_lo, z_hi, rho):
    counts = _counts(seed, z_lo, z_hi, rho)
    starts = np.zeros(counts.size + 1, dtype=np.int64)
    for j in range(counts.size):
        starts[j + 1] = starts[j] + counts[j]
    total = starts[-1]
    zs = np.empty(total, dtype=np.int64)
    fkeys = np.empty(total, dtype=np.uint64)
    for j in range(counts.size):
        for i in range(counts[j]):
            p = starts[j] + i
            zs[p] = z_lo + j
            fkeys[p] = particle_keys(seed, z_lo + j, i)[0]
    return starts, zs, fkeys


def displacement_margin(rho: float, horizon: int, span: int, tol: float) -> int:
    """Smallest scan radius whose truncation residual is at most ``tol``."""
    if rho == 0 or horizon == 0:
        return 0
    m = 0
    step = max(1, int(math.sqrt(horizon)) // 4)
    while truncation_residual(rho, horizon, span, m) > tol:
        m += step
    return m


def truncation_residual(rho: float, horizon: int, span: int, margin: int) -> float:
    """Bound on the chance that a particle starting beyond ``margin`` is ever seen.

    Uses the maximal Azuma-Hoeffding inequality for walks with steps in
    [-1, 1]: P(max_{t<=N} |S_t| >= d) <= 2 exp(-d^2 / 2N).  ``span`` is the
    width of the region of queried sites.
    """
    if rho == 0 or horizon == 0:
        return 0.0
    two_n = 2.0 * horizon
    d0 = margin + 1
    near = 2.0 * rho * (span + 2 * margin + 1) * math.exp(-d0 * d0 / two_n)
    ds = np.arange(d0, d0 + int(40 * math.sqrt(horizon)) + 10, dtype=float)
    far = 4.0 * rho * float(np.sum(np.exp(-ds * ds / two_n)))
    return near + far


class StreamingCloud:
    """Lazily advanced particle cloud for forward-in-time walker queries.

    Covers starting sites ``[center - reach - margin, center + reach + margin]``.
    Occupancy answers agree with :class:`Environment` built from the same
    seed except on an event of probability at most ``residual``.
    """

    def __init__(self, rho: float, q: float, seed: int, center: int, reach: int,
                 tol: float = 1e-9, margin: int | None = None):
        if rho < 0:
            raise ParameterError("rho must be nonnegative")
        self.rho, self.q = float(rho), float(q)
        self.seed = rng.as_seed(seed)
        self.reach = int(reach)
        self.margin = displacement_margin(rho, reach, 2 * reach + 1, tol) if margin is None else int(margin)
        self.residual = truncation_residual(rho, reach, 2 * reach + 1, self.margin)
        self.z_lo = center - reach - self.margin
        z_hi = center + reach + self.margin
        self.starts, self.zs, self.fkeys = _stream_particles(self.seed, self.z_lo, z_hi, self.rho)
        self.pos = self.zs.copy()
        self.time = np.zeros(self.zs.size, dtype=np.int64)
        self.left = (1.0 - self.q) / 2.0
        self.stay = self.left + self.q

    def state(self) -> tuple:
        return (self.z_lo, self.starts, self.zs, self.fkeys, self.pos, self.time,
                self.left, self.stay, self.margin)

    def occupied(self, x: int, n: int) -> bool:
        if n < 0:
            raise WindowRangeError("the streaming cloud answers forward-time queries only")
        r = stream_occupied(x, n, *self.state())
        if r < 0:
            raise WindowRangeError(f"({x},{n}) lies outside the streamed site range")
        return bool(r)

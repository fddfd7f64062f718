"""The walker driven by the particle cloud and a static uniform field.

From space-time point ``y = (x, n)`` the walker moves to ``(x+1, n+1)`` when
``U_y <= p_bullet`` on an occupied site or ``U_y <= p_circ`` on a vacant one,
and to ``(x-1, n+1)`` otherwise.  ``U_y`` is a keyed uniform, so any number of
walkers can share one field.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import os

import numpy as np
from numba import njit

from . import rng
from .env import Environment, StreamingCloud, stream_occupied
from .errors import ParameterError, PreconditionError, VerificationError, WindowRangeError


class CertifiedRegionError(WindowRangeError):
    """The walk needed a site whose occupancy is not exact in this window."""


@dataclass(frozen=True)
class WalkParams:
    p_circ: float
    p_bullet: float

    def __post_init__(self):
        for name in ("p_circ", "p_bullet"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ParameterError(f"{name}={v} outside [0, 1]")

    @property
    def v_circ(self) -> float:
        return 2 * self.p_circ - 1

    @property
    def v_bullet(self) -> float:
        return 2 * self.p_bullet - 1

    @property
    def p_min(self) -> float:
        return min(self.p_circ, self.p_bullet)


@njit(cache=True)
def field_value(fseed, x, n):
    return rng.uniform4(fseed, rng.TAG_FIELD, x, n)


@njit(cache=True)
def _field_many(fseed, xs, ns):
    out = np.empty(xs.size)
    for i in range(xs.size):
        out[i] = field_value(fseed, xs[i], ns[i])
    return out


class UniformField:
    """Deterministic map (x, n) -> U in [0, 1) keyed by a seed."""

    def __init__(self, seed: int):
        self.seed = rng.as_seed(seed)

    def __call__(self, x, n):
        xs = np.asarray(x, dtype=np.int64)
        ns = np.asarray(n, dtype=np.int64)
        if xs.ndim == 0 and ns.ndim == 0:
            return float(field_value(self.seed, int(xs), int(ns)))
        xs, ns = np.broadcast_arrays(xs, ns)
        return _field_many(self.seed, xs.ravel().copy(), ns.ravel().copy()).reshape(xs.shape)


@dataclass(frozen=True)
class Path:
    x0: int
    n0: int
    xs: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.xs.size - 1)

    @property
    def times(self) -> np.ndarray:
        return self.n0 + np.arange(self.xs.size)

    def points(self) -> list:
        return list(zip(self.xs.tolist(), self.times.tolist()))


# --------------------------------------------------------------------------
# single steps and walks

def step(env, field: UniformField, params: WalkParams, y) -> tuple:
    x, n = y
    if isinstance(env, Environment):
        if not env.in_exact_region(x, n):
            raise CertifiedRegionError(f"({x},{n}) is outside the exact region")
        occ = env.occupied(x, n)
    elif env is None:
        occ = False
    else:
        occ = env.occupied(x, n)
    u = field(x, n)
    thr = params.p_bullet if occ else params.p_circ
    return (x + 1, n + 1) if u <= thr else (x - 1, n + 1)


@njit(cache=True, nogil=True)
def _walk_grid(grid, x_min, x_max, t_lo, t_min, t_max, x0, n0, steps, fseed, pc, pb, out):
    x = x0
    out[0] = x
    for i in range(steps):
        n = n0 + i
        if n < t_min or n > t_max or x < x_min + abs(n) or x > x_max - abs(n):
            return i
        thr = pb if grid[n - t_lo, x - x_min] else pc
        if field_value(fseed, x, n) <= thr:
            x += 1
        else:
            x -= 1
        out[i + 1] = x
    return -1


@njit(cache=True, nogil=True)
def _walk_vacant(x0, n0, steps, fseed, pc, out):
    x = x0
    out[0] = x
    for i in range(steps):
        if field_value(fseed, x, n0 + i) <= pc:
            x += 1
        else:
            x -= 1
        out[i + 1] = x
    return -1


@njit(cache=True, nogil=True)
def _walk_stream(z_lo, starts, zs, fkeys, pos, time, left, stay, margin,
                 x0, n0, steps, fseed, pc, pb, out):
    x = x0
    out[0] = x
    for i in range(steps):
        n = n0 + i
        if pc == pb:
            occ = 0
        else:
            occ = stream_occupied(x, n, z_lo, starts, zs, fkeys, pos, time, left, stay, margin)
            if occ < 0:
                return i
        thr = pb if occ == 1 else pc
        if field_value(fseed, x, n) <= thr:
            x += 1
        else:
            x -= 1
        out[i + 1] = x
    return -1


def run_walk(env, field: UniformField, params: WalkParams, y0, steps: int) -> Path:
    """Walk ``steps`` steps from ``y0`` in a dense or streaming environment.

    ``env=None`` stands for the empty environment.
    """
    if steps < 0:
        raise ParameterError("steps must be nonnegative")
    x0, n0 = int(y0[0]), int(y0[1])
    out = np.empty(steps + 1, dtype=np.int64)
    if isinstance(env, Environment):
        c = env.cfg
        if steps == 0:
            out[0] = x0
            return Path(x0, n0, out)
        t_lo, t_hi = max(c.t_min, n0), min(c.t_max, n0 + steps - 1)
        if t_lo > t_hi:
            raise CertifiedRegionError("walk times fall outside the window")
        grid = env.occupancy_grid(t_lo, t_hi)
        fail = _walk_grid(grid, c.x_min, c.x_max, t_lo, t_lo, t_hi, x0, n0, steps,
                          field.seed, params.p_circ, params.p_bullet, out)
    elif env is None:
        fail = _walk_vacant(x0, n0, steps, field.seed, params.p_circ, out)
    elif isinstance(env, StreamingCloud):
        if n0 < 0:
            raise WindowRangeError("streaming walks start at nonnegative times")
        fail = _walk_stream(*env.state(), x0, n0, steps, field.seed,
                            params.p_circ, params.p_bullet, out)
    else:
        raise ParameterError(f"unsupported environment type {type(env).__name__}")
    if fail >= 0:
        raise CertifiedRegionError(f"walk left the certified region at step {fail}")
    return Path(x0, n0, out)


def coupled_pair_initial(env, field: UniformField, params: WalkParams, y_left, y_right, steps: int):
    """Two walks from the same time sharing environment and field.

    The left walk stays weakly to the left of the right one at every step.
    """
    (x, n), (x2, n2) = y_left, y_right
    if n != n2:
        raise PreconditionError("both walks must start at the same time")
    if x > x2 or (x2 - x) % 2:
        raise PreconditionError("need x <= x' with x' - x even")
    a = run_walk(env, field, params, (x, n), steps)
    b = run_walk(env, field, params, (x2, n), steps)
    if np.any(a.xs > b.xs):
        raise VerificationError("start-ordering coupling violated")
    return a, b


def coupled_pair_environment(env: Environment, extra_particles, field: UniformField,
                             params: WalkParams, y0, steps: int):
    """Walks in ``env`` and in ``env`` plus extra particles, same field and start.

    With ``v_circ <= v_bullet`` added particles can only push the walk right.
    """
    if params.v_circ > params.v_bullet:
        raise PreconditionError("environment coupling needs v_circ <= v_bullet")
    bigger = env.with_particles(extra_particles) if len(extra_particles) else env
    a = run_walk(env, field, params, y0, steps)
    b = run_walk(bigger, field, params, y0, steps)
    if np.any(a.xs > b.xs):
        raise VerificationError("environment-ordering coupling violated")
    return a, b


# --------------------------------------------------------------------------
# ensembles

def default_threads() -> int:
    env_val = os.environ.get("RWRW_THREADS")
    if env_val:
        try:
            return max(1, int(env_val))
        except ValueError:
            pass
    return 1


def parallel_map(fn, items, threads: int | None = None) -> list:
    """Ordered map; results do not depend on the thread count."""
    threads = default_threads() if threads is None else max(1, threads)
    items = list(items)
    if threads == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def replica_seeds(seed: int, replica: int) -> tuple:
    """(environment seed, field seed) of one replica."""
    return rng.substream_seed(seed, replica, 0), rng.substream_seed(seed, replica, 1)


def walk_replica(params: WalkParams, rho: float, q: float, steps: int, seed: int,
                 replica: int, x0: int = 0, tol: float = 1e-9) -> Path:
    env_seed, field_seed = replica_seeds(seed, replica)
    field = UniformField(field_seed)
    if rho == 0 or params.p_circ == params.p_bullet:
        return run_walk(None, field, params, (x0, 0), steps)
    cloud = StreamingCloud(rho, q, env_seed, x0, steps, tol=tol)
    return run_walk(cloud, field, params, (x0, 0), steps)


def walk_ensemble(params: WalkParams, rho: float, q: float, steps: int, replicas: int,
                  seed: int, keep_paths: bool = False, threads: int | None = None):
    """Terminal positions (or full paths) of independent replicas."""
    def one(r):
        p = walk_replica(params, rho, q, steps, seed, r)
        return p.xs if keep_paths else int(p.xs[-1])

    res = parallel_map(one, range(replicas), threads)
    return np.array(res) if not keep_paths else np.vstack(res)

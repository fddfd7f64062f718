"""Multiscale boxes: the scale ladder, slow-box probabilities and a tail-sum bound.

Scales grow by ``L_{k+1} = isqrt(L_k) * L_k`` and are kept as exact Python
integers.  Target speeds ``v_k`` decrease to ``v`` and densities ``rho_k``
increase to a finite limit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import integrate

from . import rng
from .env import EnvConfig, sample_environment
from .errors import ParameterError, PreconditionError, ResourceError, VerificationError
from .walker import WalkParams, _walk_grid, parallel_map, replica_seeds

SIX_OVER_PI2 = 6.0 / math.pi ** 2
DEFAULT_COST_CAP = 10 ** 9


# --------------------------------------------------------------------------
# ladder

@dataclass(frozen=True)
class ScaleLadder:
    L0: int
    v: float
    v_bullet: float
    rho0: float
    k_max: int
    L: tuple           # exact integers; None once a scale passes max_digits
    log_L: tuple
    speeds: tuple      # speeds[k] = v_k for k >= 1; speeds[0] is None
    rho: tuple
    rho_star_partial: tuple
    gamma: float = 1.5

    @property
    def delta(self) -> float:
        return (self.v_bullet - self.v) / 2

    def speed(self, k: int) -> float:
        if not 1 <= k <= self.k_max:
            raise ParameterError(f"speed index {k} outside 1..{self.k_max}")
        return self.speeds[k]

    def as_dict(self) -> dict:
        return {"L0": self.L0, "v": self.v, "v_bullet": self.v_bullet, "rho0": self.rho0,
                "k_max": self.k_max, "delta": self.delta, "gamma": self.gamma,
                "L": [None if x is None else int(x) for x in self.L], "v_k": list(self.speeds[1:]),
                "rho_k": list(self.rho), "rho_star_partial": list(self.rho_star_partial)}


MAX_DIGITS = 100_000


def build_ladder(L0: int = 100, v: float = 0.2, v_bullet: float = 0.6, rho0: float = 1.0,
                 k_max: int = 12, max_digits: int = MAX_DIGITS) -> ScaleLadder:
    """Scales, speeds and densities up to index ``k_max``.

    Scales with more than ``max_digits`` decimal digits are not stored; only
    their logarithm (isqrt(L) L ~ L^{3/2}) is carried forward.
    """
    if int(L0) != L0 or L0 < 4:
        raise ParameterError("L0 must be an integer >= 4")
    if not v < v_bullet:
        raise ParameterError("need v < v_bullet")
    if rho0 <= 0:
        raise ParameterError("rho0 must be positive")
    if k_max < 0:
        raise ParameterError("k_max must be nonnegative")
    L = [int(L0)]
    log_L = [math.log(L0)]
    for _ in range(k_max):
        prev = L[-1]
        if prev is not None and log_L[-1] * 1.5 < max_digits * math.log(10):
            L.append(math.isqrt(prev) * prev)
            log_L.append(math.log(L[-1]))
        else:
            L.append(None)
            log_L.append(1.5 * log_L[-1])
    delta = (v_bullet - v) / 2
    speeds = [None]
    if k_max >= 1:
        speeds.append(v_bullet - delta)
    for k in range(1, k_max):
        speeds.append(speeds[k] - delta * SIX_OVER_PI2 / k ** 2)
    rho = [float(rho0)]
    for k in range(k_max):
        rho.append(rho[k] * (1 + math.exp(-log_L[k] / 16)))
    # partial products rho0 * prod_{l <= k} (1 + L_l^{-1/16})
    partial = [rho[k + 1] for k in range(k_max)]
    return ScaleLadder(int(L0), float(v), float(v_bullet), float(rho0), k_max, tuple(L),
                       tuple(log_L), tuple(speeds), tuple(rho), tuple(partial))


def k0_threshold(delta: float, ladder: ScaleLadder) -> dict:
    """Smallest k such that the scale-gap inequality holds at every computed k' >= k.

    The inequality is ``delta (6/pi^2) / k^2 >= 4 / isqrt(L_k)``.  Returns the
    per-k verdicts too; ``k0`` is ``None`` when it fails at the last computed k.
    """
    holds = {}
    for k in range(1, ladder.k_max + 1):
        L = ladder.L[k]
        root = math.isqrt(L) if L is not None else math.exp(ladder.log_L[k] / 2)
        holds[k] = delta * SIX_OVER_PI2 / k ** 2 >= 4 / root
    k0 = None
    for k in range(ladder.k_max, 0, -1):
        if not holds[k]:
            break
        k0 = k
    return {"k0": k0, "holds": holds, "checked": (1, ladder.k_max),
            "beyond_range": k0 is None}


# --------------------------------------------------------------------------
# boxes

def box(L: int, m=(0, 0)) -> tuple:
    """(x_lo, x_hi, n_lo, n_hi) of the rectangle of scale L shifted by m L."""
    r, s = m
    return (r * L - L, r * L + 2 * L, s * L, s * L + L)


def bottom_line(L: int, m=(0, 0)) -> tuple:
    r, s = m
    return (r * L, r * L + L, s * L)


def perimeter(L: int) -> int:
    return 8 * L


def box_indices(L_small: int, L_big: int) -> list:
    """All m whose small box meets the big box at the origin."""
    bx = box(L_big)
    r_lo = -((L_big + 2 * L_small) // L_small)
    r_hi = (2 * L_big + L_small) // L_small
    out = []
    for s in range(-1, L_big // L_small + 1):
        for r in range(r_lo - 1, r_hi + 2):
            b = box(L_small, (r, s))
            if b[0] <= bx[1] and b[1] >= bx[0] and b[2] <= bx[3] and b[3] >= bx[2]:
                out.append((r, s))
    return out


# --------------------------------------------------------------------------
# simulation of slow boxes

@njit(cache=True)
def _displacements(grid, x_min, x_max, t_lo, t_hi, xs0, n0, steps, fseed, pc, pb):
    out = np.empty(xs0.size, dtype=np.int64)
    buf = np.empty(steps + 1, dtype=np.int64)
    for i in range(xs0.size):
        fail = _walk_grid(grid, x_min, x_max, t_lo, t_lo, t_hi, xs0[i], n0, steps, fseed, pc, pb, buf)
        if fail >= 0:
            out[i] = np.iinfo(np.int64).min
        else:
            out[i] = buf[steps] - xs0[i]
    return out


class _Realization:
    """Environment and field covering a list of boxes, with exact occupancy."""

    def __init__(self, rho, q, boxes, env_seed, field_seed, cost_cap):
        x_lo = min(b[0] for b in boxes)
        x_hi = max(b[1] for b in boxes)
        n_lo = min(b[2] for b in boxes)
        n_hi = max(b[3] for b in boxes)
        pad = max(abs(n_lo), abs(n_hi)) + 1
        cfg = EnvConfig(rho=rho, q=q, x_min=x_lo - pad, x_max=x_hi + pad, t_max=max(n_hi, 0),
                        t_min=min(n_lo, 0), seed=env_seed, max_cells=cost_cap)
        self.env = sample_environment(cfg)
        self.grid = self.env.occupancy_grid(n_lo, n_hi)
        self.n_lo, self.n_hi = n_lo, n_hi
        self.fseed = rng.as_seed(field_seed)

    def enlarged(self, rho_extra, env_seed):
        """Same field, environment plus an independent cloud of density rho_extra."""
        c = self.env.cfg
        extra = sample_environment(EnvConfig(rho=rho_extra, q=c.q, x_min=c.x_min, x_max=c.x_max,
                                             t_max=c.t_max, t_min=c.t_min, seed=env_seed,
                                             max_cells=c.max_cells))
        out = object.__new__(_Realization)
        out.env = self.env.with_particles(list(extra.paths))
        out.grid = out.env.occupancy_grid(self.n_lo, self.n_hi)
        out.n_lo, out.n_hi, out.fseed = self.n_lo, self.n_hi, self.fseed
        return out

    def displacements(self, L: int, m, params: WalkParams) -> np.ndarray:
        a, b, n = bottom_line(L, m)
        xs0 = np.arange(a, b + 1, dtype=np.int64)
        c = self.env.cfg
        d = _displacements(self.grid, c.x_min, c.x_max, self.n_lo, self.n_hi, xs0, n, L,
                           self.fseed, params.p_circ, params.p_bullet)
        if np.any(d == np.iinfo(np.int64).min):
            raise VerificationError("a box walk left the exactly simulated region")
        return d


def _cost(rho: float, boxes: list) -> float:
    x_lo = min(b[0] for b in boxes)
    x_hi = max(b[1] for b in boxes)
    n_lo = min(b[2] for b in boxes)
    n_hi = max(b[3] for b in boxes)
    pad = max(abs(n_lo), abs(n_hi)) + 1
    cells = max(rho, 1e-9) * (x_hi - x_lo + 2 * pad) * (n_hi - n_lo + 1)
    walks = sum((b[1] - b[0]) // 3 * ((b[3] - b[2])) for b in boxes)
    return cells + walks


def bad_event(displacements: np.ndarray, L: int, speed: float) -> bool:
    return bool(np.any(displacements < speed * L))


def bad_event_monte_carlo(ladder: ScaleLadder, k: int, rho: float, params: WalkParams, q: float,
                          replicas: int, seed: int, speed: float | None = None,
                          cost_cap: float = DEFAULT_COST_CAP, threads: int | None = None) -> dict:
    """Frequency of a slow box at scale k, all starts sharing one realization.

    ``speed`` defaults to ``v_k`` from the ladder (k >= 1).
    """
    L = ladder.L[k]
    if L is None:
        raise ResourceError(f"scale {k} is too large to store exactly")
    v_k = ladder.speed(k) if speed is None else speed
    bx = [box(L)]
    est = _cost(rho, bx)
    if est > cost_cap:
        raise ResourceError(f"box of scale {L} needs about {est:.3g} site-steps (cap {cost_cap:.3g})")

    def one(r):
        env_seed, field_seed = replica_seeds(seed, r)
        real = _Realization(rho, q, bx, env_seed, field_seed, cost_cap)
        return bad_event(real.displacements(L, (0, 0), params), L, v_k)

    hits = sum(parallel_map(one, range(replicas), threads))
    p = hits / replicas
    se = math.sqrt(max(p * (1 - p), 0.0) / replicas)
    lo, hi = _wilson(hits, replicas)
    return {"k": k, "L": L, "speed": v_k, "rho": rho, "replicas": replicas, "p_hat": p,
            "se": se, "ci_lo": lo, "ci_hi": hi}


def enlargement_check(L: int, speed: float, params: WalkParams, rho: float, rho_extra: float,
                      q: float, seed: int, replicas: int) -> dict:
    """Count realizations where adding particles turns a fast box into a slow one."""
    if params.v_circ > params.v_bullet:
        raise PreconditionError("enlargement monotonicity needs v_circ <= v_bullet")
    violations = 0
    slow_before = slow_after = 0
    for r in range(replicas):
        env_seed, field_seed = replica_seeds(seed, r)
        real = _Realization(rho, q, [box(L)], env_seed, field_seed, DEFAULT_COST_CAP)
        big = real.enlarged(rho_extra, rng.substream_seed(seed, r, 2))
        a = bad_event(real.displacements(L, (0, 0), params), L, speed)
        b = bad_event(big.displacements(L, (0, 0), params), L, speed)
        slow_before += a
        slow_after += b
        violations += (b and not a)
    return {"replicas": replicas, "violations": violations,
            "slow_before": slow_before, "slow_after": slow_after}


def _wilson(successes: int, trials: int, z: float = 1.96) -> tuple:
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    den = 1 + z * z / trials
    mid = (p + z * z / (2 * trials)) / den
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def three_slow_boxes_check(ladder: ScaleLadder, k: int, params: WalkParams, rho: float, q: float,
                           seed: int, replica: int = 0, cost_cap: float = DEFAULT_COST_CAP) -> dict:
    """Evaluate every slow box of scale k inside the scale-(k+1) box on one realization.

    If the big box is slow, at least three slow small boxes on distinct time
    layers are required.  ``verdict`` is False only when that fails.
    """
    thr = k0_threshold(ladder.delta, ladder)
    if thr["k0"] is None or k < thr["k0"] or k + 1 > ladder.k_max:
        raise PreconditionError(f"k={k} is below the scale-gap threshold {thr['k0']} or beyond the ladder")
    Ls, Lb = ladder.L[k], ladder.L[k + 1]
    if Lb is None or _cost(rho, [box(Lb)]) > cost_cap:
        raise ResourceError(f"scale {k + 1} is beyond the cost cap")
    ms = box_indices(Ls, Lb)
    boxes = [box(Ls, m) for m in ms] + [box(Lb)]
    est = _cost(rho, boxes)
    if est > cost_cap:
        raise ResourceError(f"scale pair ({Ls}, {Lb}) needs about {est:.3g} site-steps (cap {cost_cap:.3g})")
    env_seed, field_seed = replica_seeds(seed, replica)
    real = _Realization(rho, q, boxes, env_seed, field_seed, cost_cap)
    big = bad_event(real.displacements(Lb, (0, 0), params), Lb, ladder.speed(k + 1))
    slow = [m for m in ms if bad_event(real.displacements(Ls, m, params), Ls, ladder.speed(k))]
    layers = sorted({s for _, s in slow})
    verdict = (not big) or len(layers) >= 3
    return {"k": k, "big_slow": big, "slow_boxes": slow, "layers": layers,
            "n_boxes": len(ms), "verdict": verdict}


def layered_displacement(ladder: ScaleLadder, k: int, slow_layers) -> dict:
    """Worst case displacement across the layers of the scale-(k+1) box.

    Layers not listed as slow contribute the least value allowed for a fast
    box, ``ceil(v_k L_k)``; slow layers contribute the least possible, ``-L_k``.
    """
    Ls, Lb = ladder.L[k], ladder.L[k + 1]
    n_layers = Lb // Ls
    slow = set(slow_layers)
    if any(not 0 <= j < n_layers for j in slow):
        raise ParameterError("slow layer index out of range")
    fast = math.ceil(ladder.speed(k) * Ls)
    total = sum(-Ls if j in slow else fast for j in range(n_layers))
    need = ladder.speed(k + 1) * Lb
    return {"total": total, "required": need, "big_slow": total < need, "layers": n_layers}


# --------------------------------------------------------------------------
# exact small-box oracle for a homogeneous walk

def homogeneous_bad_event_exact(L: int, p: float, speed: float) -> float:
    """Probability that some start of the bottom line is slow, homogeneous walk.

    Walks from all starts share one field, so walks standing on the same site
    move together.  The joint law is propagated exactly over the ordered
    vectors of positions.
    """
    starts = tuple(range(L + 1))
    dist = {starts: 1.0}
    for _ in range(L):
        nxt: dict = {}
        for state, pr in dist.items():
            sites = sorted(set(state))
            for mask in range(1 << len(sites)):
                move = {s: (1 if (mask >> i) & 1 else -1) for i, s in enumerate(sites)}
                w = 1.0
                for i in range(len(sites)):
                    w *= p if (mask >> i) & 1 else 1 - p
                new = tuple(x + move[x] for x in state)
                nxt[new] = nxt.get(new, 0.0) + pr * w
        dist = nxt
    return sum(pr for state, pr in dist.items()
               if any(state[i] - starts[i] < speed * L for i in range(L + 1)))


# --------------------------------------------------------------------------
# tail sum

def _log_term(l, beta):
    lg = np.log(l)
    return beta * lg - lg ** 1.5


def _tail_integral(beta: float, x0: float) -> float:
    # int_{x0}^inf x^beta exp(-log^{3/2} x) dx, with u = log x
    u0 = math.log(x0)
    f = lambda u: math.exp((beta + 1) * u - u ** 1.5)
    val, _ = integrate.quad(f, u0, math.inf, epsabs=0, epsrel=1e-12, limit=500)
    return val


def tail_sum_check(beta: float, a: float, cutoff: int | None = None, rel_tol: float = 1e-12) -> dict:
    """Compare a stretched-exponential tail sum with its claimed bound.

    The sum over integers ``l > a`` is truncated at ``cutoff``; the neglected
    part is bounded by the integral of the (eventually decreasing) summand
    and must stay below ``rel_tol`` times the partial sum.
    """
    if beta < 0:
        raise ParameterError("beta must be nonnegative")
    alpha0 = math.exp((beta + 1) ** 2)
    if a < alpha0:
        raise PreconditionError(f"a={a} is below alpha0=e^(beta+1)^2={alpha0:.6g}")
    # the summand decreases once 1.5 sqrt(log l) > beta
    mono = math.exp((2 * beta / 3) ** 2) + 1
    start = int(math.floor(a)) + 1
    cut = max(start, int(cutoff) if cutoff else 1000, int(mono) + 1)
    while True:
        total = 0.0
        lo = start
        while lo <= cut:
            hi = min(cut, lo + 2_000_000)
            ls = np.arange(lo, hi + 1, dtype=float)
            total += float(np.exp(_log_term(ls, beta)).sum())
            lo = hi + 1
        remainder = _tail_integral(beta, cut)
        if remainder <= rel_tol * total or cutoff:
            break
        cut *= 4
    D = max(2 * _tail_integral(beta, alpha0), 4 / (beta + 1))
    rhs = D * a ** (beta + 1) * math.exp(-math.log(a) ** 1.5)
    return {"beta": beta, "a": a, "alpha0": alpha0, "cutoff": cut, "lhs": total,
            "remainder_bound": remainder, "remainder_ok": remainder <= rel_tol * total,
            "D": D, "rhs": rhs, "holds": total <= rhs}

"""Sampling many distributions from one Poisson point process.

A process on a finite ground set carries points ``(z_i, v_i)`` with heights
``v_i >= 0``.  Each site ``z`` is realized exactly up to its own height
``H[z]``; asking for more draws an independent layer above ``H[z]``.

To draw from a density ``g`` (with respect to the site weights ``mu``) the
smallest ``xi`` with ``xi * g(z_i) >= v_i`` for some point is found, that
point is removed, and every remaining height drops by ``xi * g(z_i)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ParameterError, PreconditionError, SimulationError
from .kernel import heat_kernel, make_paving, density_deficits

MAX_EXTENSIONS = 60


class LabeledPointProcess:
    """Poisson points on ``sigma x [0, inf)`` with intensity ``mu x dv``, realized lazily."""

    def __init__(self, sigma, mu, height_cap: float, seed: int):
        self.sigma = np.asarray(sigma, dtype=np.int64)
        self.mu = np.asarray(mu, dtype=float)
        if self.mu.shape != self.sigma.shape:
            raise ParameterError("mu must give one weight per site")
        if np.any(self.mu < 0):
            raise ParameterError("site weights must be nonnegative")
        if height_cap <= 0:
            raise ParameterError("height cap must be positive")
        self.seed = rng.as_seed(seed)
        self.layers = 0
        self.realized = np.zeros(self.sigma.size)
        self.site = np.zeros(0, dtype=np.int64)      # index into sigma
        self.height = np.zeros(0)                     # current height
        self.original = np.zeros(0)                   # height at creation
        self.ids = np.zeros(0, dtype=np.int64)
        self._next_id = 0
        self.extend(np.full(self.sigma.size, float(height_cap)))

    def extend(self, amount) -> None:
        """Realize an independent layer of the given thickness above every site."""
        amount = np.broadcast_to(np.asarray(amount, dtype=float), self.realized.shape)
        gen = np.random.default_rng(rng.substream_seed(self.seed, self.layers))
        self.layers += 1
        counts = gen.poisson(self.mu * amount)
        site = np.repeat(np.arange(self.sigma.size), counts)
        h = self.realized[site] + gen.random(site.size) * amount[site]
        ids = np.arange(self._next_id, self._next_id + site.size)
        self._next_id += site.size
        self.site = np.concatenate([self.site, site])
        self.height = np.concatenate([self.height, h])
        self.original = np.concatenate([self.original, h])
        self.ids = np.concatenate([self.ids, ids])
        self.realized = self.realized + amount

    def copy(self) -> "LabeledPointProcess":
        out = object.__new__(LabeledPointProcess)
        out.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                             for k, v in self.__dict__.items()})
        return out

    def ensure(self, level: float) -> None:
        """Realize every site at least up to ``level``."""
        short = np.maximum(level - self.realized, 0.0)
        if np.any(short > 0):
            self.extend(short)

    def counts_below(self, level: float, use_original: bool = False) -> np.ndarray:
        """Number of points per site with height strictly below ``level``."""
        self.ensure(level)
        h = self.original if use_original else self.height
        return np.bincount(self.site[h < level], minlength=self.sigma.size)

    @property
    def size(self) -> int:
        return int(self.site.size)


def sample_point_process(sigma, mu=None, height_cap: float = 1.0, seed: int = 0) -> LabeledPointProcess:
    """Realize the process on ``sigma`` up to ``height_cap``; ``mu`` defaults to counting measure."""
    mu = np.ones(len(sigma)) if mu is None else mu
    if float(np.sum(mu)) <= 0:
        raise ParameterError("total site weight must be positive")
    return LabeledPointProcess(sigma, mu, height_cap, seed)


def _check_density(process: LabeledPointProcess, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != process.sigma.shape or np.any(g < 0):
        raise ParameterError("g must be a nonnegative weight per site")
    total = float(np.dot(g, process.mu))
    if abs(total - 1.0) > 1e-12:
        raise ParameterError(f"g integrates to {total!r} against mu, not 1")
    return g


@dataclass
class Draw:
    site: int          # the drawn site (a value from sigma)
    xi: float
    point_id: int
    tie: bool


def simulate_one(process: LabeledPointProcess, g, inplace: bool = False):
    """Draw one site with law ``g mu`` and return (draw, residual process).

    The residual has heights ``v_i - xi g(z_i)`` and is again a Poisson
    process with the original law, independent of the draw.
    """
    g = _check_density(process, g)
    proc = process if inplace else process.copy()
    pos = g > 0
    limit = float(np.min(proc.realized[pos] / g[pos]))
    for _ in range(MAX_EXTENSIONS):
        gi = g[proc.site]
        live = gi > 0
        if np.any(live):
            ratio = np.full(proc.size, np.inf)
            ratio[live] = proc.height[live] / gi[live]
            k = int(np.argmin(ratio))
            xi = float(ratio[k])
            if xi <= limit:
                break
        else:
            xi = math.inf
        # a higher layer could hold a smaller ratio; realize more
        proc.extend(proc.realized.max())
        limit = float(np.min(proc.realized[pos] / g[pos]))
    else:
        raise SimulationError("no point caught after repeated extension")
    tie = int(np.count_nonzero(ratio == xi)) > 1
    draw = Draw(int(proc.sigma[proc.site[k]]), xi, int(proc.ids[k]), tie)
    keep = np.ones(proc.size, dtype=bool)
    keep[k] = False
    proc.height = proc.height - xi * gi
    proc.site, proc.height = proc.site[keep], proc.height[keep]
    proc.original, proc.ids = proc.original[keep], proc.ids[keep]
    proc.realized = proc.realized - xi * g
    return draw, proc


@dataclass
class SoftLocalTime:
    G: np.ndarray                      # accumulated sum of xi_j g_j
    xis: list = field(default_factory=list)
    point_ids: list = field(default_factory=list)
    history: list = field(default_factory=list)  # G after each step

    @property
    def monotone(self) -> bool:
        return all(np.all(b >= a) for a, b in zip(self.history, self.history[1:]))

    @property
    def distinct(self) -> bool:
        return len(set(self.point_ids)) == len(self.point_ids)


def simulate_sequence(process: LabeledPointProcess, gs, keep_history: bool = False):
    """Draw one site from each density in turn.

    Returns (sites, soft local time, residual process, number of ties).
    """
    proc = process.copy()
    slt = SoftLocalTime(np.zeros(proc.sigma.size))
    sites, ties = [], 0
    for g in gs:
        draw, proc = simulate_one(proc, g, inplace=True)
        sites.append(draw.site)
        slt.xis.append(draw.xi)
        slt.point_ids.append(draw.point_id)
        slt.G = slt.G + draw.xi * np.asarray(g, dtype=float)
        if keep_history:
            slt.history.append(slt.G.copy())
        ties += draw.tie
    return sites, slt, proc, ties


def _dominates(sites, sigma, level_counts, mask=None) -> bool:
    index = {int(z): i for i, z in enumerate(sigma)}
    counts = np.zeros(len(sigma), dtype=np.int64)
    for z in sites:
        counts[index[z]] += 1
    ok = counts >= level_counts
    if mask is not None:
        ok = ok | ~mask
    return bool(np.all(ok))


def domination_check(sigma, gs, rho: float, seeds: int, seed: int = 0, mu=None,
                     mask=None, height_cap: float | None = None) -> dict:
    """Frequency of sample-dominates-level-set versus frequency of G_J >= rho.

    On every realization where G_J >= rho on the masked sites, every point
    with original height below rho has been caught, so the first event
    contains the second.  Both frequencies and the count of realizations
    breaking that inclusion are reported.
    """
    if rho <= 0:
        raise PreconditionError("rho must be positive")
    sigma = np.asarray(sigma)
    mu = np.ones(sigma.size) if mu is None else np.asarray(mu, dtype=float)
    mask = np.ones(sigma.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    cap = max(rho, 1.0) if height_cap is None else height_cap
    lhs = rhs = broken = ties = 0
    diff = []
    for s in range(seeds):
        proc = sample_point_process(sigma, mu, cap, rng.substream_seed(seed, s))
        level = proc.counts_below(rho)
        sites, slt, _, t = simulate_sequence(proc, gs)
        ties += t
        a = _dominates(sites, sigma, level, mask)
        b = bool(np.all(slt.G[mask] >= rho))
        lhs += a
        rhs += b
        broken += b and not a
        diff.append(float(a) - float(b))
    d = np.asarray(diff)
    joint_se = float(d.std(ddof=1) / math.sqrt(seeds)) if seeds > 1 else math.inf
    lhs_hat, rhs_hat = lhs / seeds, rhs / seeds
    return {"seeds": seeds, "lhs_hat": lhs_hat, "rhs_hat": rhs_hat, "joint_se": joint_se,
            "holds_within_error": lhs_hat >= rhs_hat - 3 * joint_se,
            "inclusion_violations": broken, "ties": ties}


def endpoint_coupling(starts, L: int, rho: float, rho_prime: float, n: int, seed: int,
                      h_prime: tuple, replicas: int = 200, q: float = 0.5, c_time: float = 1.0) -> dict:
    """Couple walk endpoints from ``starts`` with a Poisson cloud of density rho_prime.

    The paving is taken over the span of ``starts``; ``h_prime = (lo, hi)``
    must sit at distance more than n from its ends.  Each walker's endpoint
    is drawn by soft local times with density ``p_n(x_j, .)``; the Poisson
    side is the set of points below height rho_prime.  Reports the frequency
    of domination on ``h_prime`` and the lower bound
    ``1 - |H'| e^{rho' L} max_z prod_j (1 + L p_n(x_j, z))^{-1}``.
    """
    starts = np.sort(np.asarray(starts, dtype=np.int64))
    if rho_prime > rho or rho_prime < 0:
        raise PreconditionError("need 0 <= rho_prime <= rho")
    if n < c_time * L * L:
        raise PreconditionError(f"n={n} below {c_time} L^2")
    lo, hi = int(starts[0]), int(starts[-1])
    paving = make_paving(lo, hi, L)
    # the paving must not overhang the start range, or the last block is sparse
    if (hi - lo + 1) % L:
        raise PreconditionError("start range is not a whole number of blocks")
    if density_deficits(starts.tolist(), paving, rho):
        raise PreconditionError("starts are not dense enough for the paving")
    a, b = h_prime
    if a - n < lo or b + n > hi:
        raise PreconditionError("the n-neighbourhood of H' must lie in the start range")
    kern = heat_kernel(q, n)
    sigma = np.arange(lo - n, hi + n + 1)
    gs = [kern.between(x, sigma) for x in starts]
    # renormalize away float rounding of the kernel row
    gs = [g / g.sum() for g in gs]
    mask = (sigma >= a) & (sigma <= b)
    G_mean = np.sum(gs, axis=0)
    hits = 0
    ties = 0
    g_min = []
    for r in range(replicas):
        proc = sample_point_process(sigma, None, max(rho_prime, 1.0), rng.substream_seed(seed, r))
        level = proc.counts_below(rho_prime) if rho_prime > 0 else np.zeros(sigma.size, dtype=np.int64)
        sites, slt, _, t = simulate_sequence(proc, gs)
        ties += t
        hits += _dominates(sites, sigma, level, mask)
        g_min.append(float(slt.G[mask].min()))
    logs = [float(np.sum(np.log1p(L * np.array([g[i] for g in gs])))) for i in np.flatnonzero(mask)]
    worst = min(logs)
    size = b - a + 1
    bound = 1 - size * math.exp(rho_prime * L - worst)
    # the constant c making |H'| exp(-(rho-rho')L + c rho L^2 log n / sqrt n) equal the bound above
    c_fit = (rho * L - worst) * math.sqrt(n) / (rho * L * L * math.log(n))
    freq = hits / replicas
    return {"replicas": replicas, "frequency": freq,
            "se": math.sqrt(max(freq * (1 - freq), 0.0) / replicas),
            "bound": bound, "c_fit": c_fit, "holds": freq >= bound,
            "G_mean_center": float(G_mean[mask].min()), "G_min_mean": float(np.mean(g_min)),
            "ties": ties}

"""Heat kernel of the lazy simple random walk, kernel bounds and pavings.

The lazy walk holds with probability ``q`` and moves one site left or right
with probability ``(1 - q) / 2`` each.  ``heat_kernel(q, n)`` returns the law
of its position after ``n`` steps, computed by repeated convolution on the
exact support ``[-n, n]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, PreconditionError

EXACT_MODE_MAX_N = 64


def _check_q(q) -> None:
    if not (0 <= q <= 1):
        raise ParameterError(f"holding probability q={q} outside [0, 1]")


@dataclass(frozen=True)
class StepDistribution:
    q: float

    @property
    def side(self):
        return (1 - self.q) / 2

    def mass(self, step: int):
        if step == 0:
            return self.q
        if step in (-1, 1):
            return self.side
        return 0 * self.q

    def as_dict(self) -> dict:
        """Steps carrying positive mass."""
        out = {d: self.mass(d) for d in (-1, 0, 1)}
        return {d: m for d, m in out.items() if m > 0}


def step_distribution(q) -> StepDistribution:
    _check_q(q)
    return StepDistribution(q)


@dataclass(frozen=True)
class HeatKernel:
    """Law of the walk after ``n`` steps started at 0.

    ``values[x + n]`` is the probability of being at ``x``.  In exact mode the
    values are ``Fraction`` objects held in an object array.
    """

    q: float
    n: int
    values: np.ndarray = field(repr=False)
    exact: bool = False

    @property
    def support(self) -> np.ndarray:
        return np.arange(-self.n, self.n + 1)

    def __call__(self, x):
        """p_n(0, x); vectorized, zero off the support."""
        x = np.asarray(x)
        inside = np.abs(x) <= self.n
        idx = np.where(inside, x + self.n, 0)
        if self.exact:
            vals = np.array([self.values[i] if ok else Fraction(0) for i, ok in
                             zip(np.ravel(idx), np.ravel(inside))], dtype=object)
            return vals.reshape(x.shape) if x.shape else vals[0]
        out = np.where(inside, self.values[idx], 0.0)
        return out if x.shape else float(out)

    def between(self, x, y):
        """Transition probability from site x to site y."""
        return self(np.asarray(y) - np.asarray(x))

    def as_dict(self) -> dict:
        return {int(x): v for x, v in zip(self.support, self.values)}

    def cdf_table(self) -> np.ndarray:
        return np.cumsum(np.asarray(self.values, dtype=float))

    def mass_on(self, lo: int, hi: int):
        """P_0(lo <= Z_n <= hi)."""
        lo, hi = max(lo, -self.n), min(hi, self.n)
        if lo > hi:
            return Fraction(0) if self.exact else 0.0
        seg = self.values[lo + self.n: hi + self.n + 1]
        return sum(seg, Fraction(0)) if self.exact else float(np.sum(seg))


def _convolve_step(row: np.ndarray, side, hold) -> np.ndarray:
    # written so that mirrored entries are computed by the same expression,
    # which keeps a symmetric input exactly symmetric in floating point
    padded = np.zeros(row.size + 4, dtype=row.dtype)
    padded[2:-2] = row
    return side * (padded[2:] + padded[:-2]) + hold * padded[1:-1]


@lru_cache(maxsize=512)
def _float_kernel(q: float, n: int) -> np.ndarray:
    side, hold = (1.0 - q) / 2.0, q
    row = np.ones(1)
    for _ in range(n):
        row = _convolve_step(row, side, hold)
    row.setflags(write=False)
    return row


def heat_kernel(q, n: int, exact: bool = False) -> HeatKernel:
    """n-step kernel of the lazy walk.

    Exact mode uses rational arithmetic (``q`` converted with ``Fraction``)
    and is limited to ``n <= 64``.
    """
    _check_q(q)
    if n < 0 or int(n) != n:
        raise ParameterError(f"step count n={n} must be a nonnegative integer")
    n = int(n)
    if exact:
        if n > EXACT_MODE_MAX_N:
            raise ParameterError(f"exact mode supports n <= {EXACT_MODE_MAX_N}")
        qf = Fraction(q)
        side = (1 - qf) / 2
        row = np.array([Fraction(1)], dtype=object)
        for _ in range(n):
            row = _convolve_step(row, side, qf)
        return HeatKernel(q, n, row, exact=True)
    return HeatKernel(float(q), n, _float_kernel(float(q), n))


def kernel_bound_report(q, n_max: int, c: float = 0.25) -> dict:
    """Empirical constants for the standard lazy-walk kernel bounds.

    For every ``2 <= n <= n_max`` this evaluates

    * ``sup_x p_n(0,x) * sqrt(n)``
    * ``max |p_n(0,x) - p_n(0,x+2)| * n / 2`` over same-parity neighbours
    * ``P_0(|Z_n| > sqrt(n) log n) * exp(c log(n)^2)``

    and returns the per-n curves with their maxima.  ``degenerate`` flags
    q=1, where the walk never moves and the first constant grows like sqrt(n).
    """
    _check_q(q)
    if n_max < 2:
        raise ParameterError("n_max must be at least 2")
    ns = np.arange(2, n_max + 1)
    sup_scaled = np.empty(ns.size)
    lip = np.empty(ns.size)
    tail = np.empty(ns.size)
    for i, n in enumerate(ns):
        p = heat_kernel(q, int(n)).values
        sup_scaled[i] = p.max() * math.sqrt(n)
        lip[i] = np.abs(p[2:] - p[:-2]).max() * n / 2.0 if p.size > 2 else 0.0
        r = math.sqrt(n) * math.log(n)
        xs = np.arange(-n, n + 1)
        tail[i] = p[np.abs(xs) > r].sum() * math.exp(c * math.log(n) ** 2)
    degenerate = q >= 1
    def trend_ok(curve, small=32):
        # beyond the first `small` values no later value may exceed an
        # earlier one by more than 5%
        part = curve[min(small, curve.size - 1):]
        later_max = np.maximum.accumulate(part[::-1])[::-1]
        return bool(np.all(later_max <= 1.05 * part))

    def bounded(curve):
        # no growth: the second half stays within 5% of the first half maximum
        half = max(1, curve.size // 2)
        return bool(np.all(np.isfinite(curve)) and curve[half:].max(initial=0.0) <= 1.05 * curve[:half].max())

    return {
        "q": q,
        "n_max": int(n_max),
        "c": c,
        "n": ns.tolist(),
        "sup_scaled": sup_scaled.tolist(),
        "lipschitz_scaled": lip.tolist(),
        "tail_scaled": tail.tolist(),
        "C_sup": float(sup_scaled.max()),
        "C_lipschitz": float(lip.max()),
        "C_tail": float(tail.max()),
        "degenerate": degenerate,
        "bounded": {
            "sup": bounded(sup_scaled) and not degenerate,
            "lipschitz": bounded(lip),
            "tail": bounded(tail),
        },
        "lipschitz_trend_ok": trend_ok(lip),
    }


@dataclass(frozen=True)
class Paving:
    """Partition of an interval target into translated blocks ``[0, L) + L*i + offset``."""

    L: int
    offset: int
    indices: tuple
    target: tuple  # (lo, hi) inclusive, or () when empty

    def segment(self, i: int) -> range:
        start = self.L * i + self.offset
        return range(start, start + self.L)

    def segments(self) -> list:
        return [self.segment(i) for i in self.indices]

    def locate(self, x: int) -> int:
        """Index of the block containing site x."""
        return (x - self.offset) // self.L


def make_paving(lo: int, hi: int, L: int, offset: int | None = None) -> Paving:
    """Blocks of length L covering the sites lo..hi (empty when lo > hi)."""
    if L < 1:
        raise ParameterError("block length must be positive")
    if lo > hi:
        return Paving(L, 0 if offset is None else offset, (), ())
    if offset is None:
        offset = lo
    first = (lo - offset) // L
    last = (hi - offset) // L
    return Paving(L, offset, tuple(range(first, last + 1)), (lo, hi))


def density_deficits(points: Iterable[int], paving: Paving, rho: float) -> list:
    """Blocks holding fewer than rho*L of the points, as (index, count) pairs."""
    counts = {i: 0 for i in paving.indices}
    for x in points:
        i = paving.locate(int(x))
        if i in counts:
            counts[i] += 1
    need = rho * paving.L
    return [(i, c) for i, c in counts.items() if c < need - 1e-12]


def paving_integral_check(kernel: HeatKernel, paving: Paving, points: Sequence[int],
                          rho: float, c: float) -> dict:
    """Compare the kernel mass of a dense point set with the paving lower bound.

    lhs is the sum of p_n(0, x_j) over the points, rhs is
    ``rho * (P_0(Z_n in H) - c L log n / sqrt n)`` with H the paving target.
    """
    bad = density_deficits(points, paving, rho)
    if bad:
        i, cnt = bad[0]
        seg = paving.segment(i)
        raise PreconditionError(
            f"segment {i} = [{seg.start},{seg.stop - 1}] holds {cnt} points, needs >= {rho * paving.L}")
    pts = np.asarray(list(points), dtype=np.int64)
    if kernel.exact:
        lhs = sum((kernel(int(x)) for x in pts), Fraction(0))
    else:
        lhs = float(np.sum(kernel(pts))) if pts.size else 0.0
    if paving.target:
        mass = kernel.mass_on(*paving.target)
    else:
        mass = 0.0
    n = kernel.n
    correction = c * paving.L * math.log(n) / math.sqrt(n) if n >= 2 else 0.0
    rhs = rho * (float(mass) - correction)
    return {"lhs": float(lhs), "rhs": rhs, "holds": float(lhs) >= rhs, "mass_H": float(mass)}

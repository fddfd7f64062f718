"""Ensemble estimators and tests on seeded Monte Carlo data."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from . import rng
from .env import covariance_theory
from .errors import ParameterError, PreconditionError, ResourceError, SimulationError
from .regen import RegenSequence
from .walker import WalkParams, walk_ensemble, walk_replica, parallel_map

DEFAULT_COST_CAP = 2e9
KS_LEVEL = 0.01


def _guard(cost: float, cap: float) -> None:
    if cost > cap:
        raise ResourceError(f"estimated {cost:.3g} walker steps exceeds cap {cap:.3g}")


def _walk_cost(rho, steps, replicas):
    # a streaming cloud scans about rho * sqrt(steps) particles per step
    return replicas * steps * (1 + 4 * rho * math.sqrt(max(steps, 1)) / 10)


# --------------------------------------------------------------------------
# speed and fluctuations

@dataclass
class SpeedEstimate:
    v_hat: float
    se: float
    ci: tuple
    n: int
    replicas: int
    terminal: np.ndarray

    def as_dict(self) -> dict:
        return {"v_hat": self.v_hat, "se": self.se, "ci_lo": self.ci[0], "ci_hi": self.ci[1],
                "n": self.n, "replicas": self.replicas}


def speed_from_terminal(terminal, n: int) -> SpeedEstimate:
    x = np.asarray(terminal, dtype=float) / n
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.inf
    v = float(x.mean())
    return SpeedEstimate(v, se, (v - 1.96 * se, v + 1.96 * se), n, x.size, np.asarray(terminal))


def estimate_speed(params: WalkParams, rho: float, q: float, n: int, replicas: int, seed: int,
                   threads: int | None = None, cost_cap: float = DEFAULT_COST_CAP) -> SpeedEstimate:
    """Mean of X_n / n over independent replicas, with a normal 95% interval."""
    if n < 1 or replicas < 2:
        raise ParameterError("need n >= 1 and at least two replicas")
    _guard(_walk_cost(rho, n, replicas), cost_cap)
    ends = walk_ensemble(params, rho, q, n, replicas, seed, threads=threads)
    return speed_from_terminal(ends, n)


def clt_test(terminal, n: int, v_hat: float, sigma_hat: float) -> dict:
    """KS test of (X_n - n v) / (sqrt(n) sigma) against the standard normal."""
    if not sigma_hat > 0:
        raise ParameterError("sigma estimate must be positive")
    z = (np.asarray(terminal, dtype=float) - n * v_hat) / (math.sqrt(n) * sigma_hat)
    res = sps.kstest(z, "norm")
    return {"ks_stat": float(res.statistic), "p_value": float(res.pvalue),
            "passes": res.pvalue > KS_LEVEL, "replicas": int(z.size)}


def variance_curve(paths: np.ndarray, times) -> dict:
    """Var(X_n) at the given times and the slope of log Var against log n."""
    times = np.asarray(times)
    var = np.array([paths[:, t].var(ddof=1) for t in times])
    slope, intercept, r, _, se = sps.linregress(np.log(times), np.log(var))
    return {"times": times.tolist(), "variance": var.tolist(), "slope": float(slope),
            "slope_se": float(se), "intercept": float(intercept)}


def path_marginals_test(paths: np.ndarray, v_hat: float, sigma_hat: float,
                        fractions=(0.25, 0.5, 1.0)) -> dict:
    """Normalized increments over consecutive time fractions: each standard normal, uncorrelated."""
    n = paths.shape[1] - 1
    cuts = [0] + [int(round(f * n)) for f in fractions]
    incs = []
    for a, b in zip(cuts, cuts[1:]):
        d = (paths[:, b] - paths[:, a] - (b - a) * v_hat) / (math.sqrt(b - a) * sigma_hat)
        incs.append(d)
    pvals = [float(sps.kstest(d, "norm").pvalue) for d in incs]
    corr = [float(np.corrcoef(incs[i], incs[j])[0, 1])
            for i in range(len(incs)) for j in range(i + 1, len(incs))]
    lim = 3 / math.sqrt(paths.shape[0])
    return {"p_values": pvals, "correlations": corr,
            "passes": all(p > KS_LEVEL for p in pvals) and all(abs(c) < lim for c in corr)}


def sigma_batch_means(paths: np.ndarray, batches: int, v_hat: float) -> tuple:
    """Diffusivity from increments over equal time blocks, pooled over paths.

    Returns (sigma, se) with the SE from the spread of per-path estimates.
    """
    n = paths.shape[1] - 1
    m = n // batches
    if m < 1:
        raise ParameterError("more batches than steps")
    cuts = np.arange(batches + 1) * m
    inc = np.diff(paths[:, cuts], axis=1) - m * v_hat
    per_path = (inc ** 2).mean(axis=1) / m
    s2 = float(per_path.mean())
    se2 = float(per_path.std(ddof=1) / math.sqrt(per_path.size))
    sigma = math.sqrt(s2)
    return sigma, se2 / (2 * sigma)


# --------------------------------------------------------------------------
# regeneration statistics

def regen_speed_sigma(seqs, bootstrap: int = 400, seed: int = 0) -> dict:
    """Speed and diffusivity from the increments between consecutive regenerations.

    Uses every increment after the first regeneration of each sequence.
    ``v = E[dx] / E[dt]`` and ``sigma^2 = Var(dx - v dt) / E[dt]``; SEs by a
    seeded bootstrap over sequences.
    """
    per = [s.increments() for s in seqs if len(s.taus) >= 2]
    if not per:
        raise SimulationError("no sequence has two regenerations")

    def est(group):
        dt = np.concatenate([g[0] for g in group]).astype(float)
        dx = np.concatenate([g[1] for g in group]).astype(float)
        v = dx.sum() / dt.sum()
        s2 = np.mean((dx - v * dt) ** 2) / dt.mean()
        return v, math.sqrt(s2)

    v, s = est(per)
    gen = np.random.default_rng(rng.substream_seed(seed, 7))
    boot = np.array([est([per[i] for i in gen.integers(0, len(per), len(per))])
                     for _ in range(bootstrap)])
    return {"v": v, "v_se": float(boot[:, 0].std(ddof=1)), "sigma": s,
            "sigma_se": float(boot[:, 1].std(ddof=1)), "sequences": len(per),
            "increments": int(sum(g[0].size for g in per))}


def increments_two_sample(seqs) -> dict:
    """KS between the first and second inter-regeneration increments across sequences."""
    first_t, second_t, first_x, second_x = [], [], [], []
    for s in seqs:
        dt, dx = s.increments()
        if dt.size >= 2:
            first_t.append(dt[0])
            second_t.append(dt[1])
            first_x.append(dx[0])
            second_x.append(dx[1])
    if len(first_t) < 10:
        raise SimulationError("too few sequences with three regenerations")
    pt = float(sps.ks_2samp(first_t, second_t).pvalue)
    px = float(sps.ks_2samp(first_x, second_x).pvalue)
    return {"p_time": pt, "p_space": px, "pairs": len(first_t),
            "passes": pt > KS_LEVEL and px > KS_LEVEL}


def tau_tail(taus, top: float = 0.1) -> dict:
    """Empirical log P(tau > t) / log^{3/2} t over the top fraction of observed tau.

    Also fits gamma in ``-log P(tau > t) ~ c log^gamma t``.
    """
    t = np.sort(np.asarray(taus, dtype=float))
    N = t.size
    surv = 1 - np.arange(1, N + 1) / N          # P(tau > t_(i)) empirically
    lo = int(math.floor((1 - top) * N))
    sel = np.arange(lo, N)
    sel = sel[(surv[sel] > 0) & (t[sel] > 1)]
    if sel.size < 2:
        raise SimulationError("not enough distinct large tau values")
    ratio = np.log(surv[sel]) / np.log(t[sel]) ** 1.5
    all_sel = np.flatnonzero((surv > 0) & (t > 1) & (surv < 1))
    gamma = math.nan
    if all_sel.size >= 3 and np.ptp(np.log(np.log(t[all_sel]))) > 0:
        gamma = float(sps.linregress(np.log(np.log(t[all_sel])),
                                     np.log(-np.log(surv[all_sel]))).slope)
    return {"max_ratio": float(ratio.max()), "bounded_negative": bool(ratio.max() < 0),
            "points": int(sel.size), "gamma_fit": gamma}


# --------------------------------------------------------------------------
# ballisticity

def ballisticity_probe(params: WalkParams, rho: float, q: float, v_star: float, Ls, horizon: int,
                       replicas: int, seed: int, threads: int | None = None,
                       cost_cap: float = DEFAULT_COST_CAP) -> dict:
    """Frequency of ``X_n < n v_star - L`` for some n <= horizon, per L."""
    if not 0 < v_star <= 1:
        raise PreconditionError("v_star must lie in (0, 1]")
    Ls = sorted(Ls)
    _guard(_walk_cost(rho, horizon, replicas), cost_cap)

    def deficit(r):
        xs = walk_replica(params, rho, q, horizon, seed, r).xs
        return float(np.max(np.arange(xs.size) * v_star - xs))

    d = np.array(parallel_map(deficit, range(replicas), threads))
    rows = []
    for L in Ls:
        p = float(np.mean(d > L))
        rows.append({"L": L, "p_hat": p, "se": math.sqrt(p * (1 - p) / replicas)})
    ps = [r["p_hat"] for r in rows]
    non_increasing = all(b <= a + 2 * math.hypot(ra["se"], rb["se"])
                         for a, b, ra, rb in zip(ps, ps[1:], rows, rows[1:]))
    pos = [(r["L"], math.log(r["p_hat"])) for r in rows if r["p_hat"] > 0]
    slope = math.nan
    if len(pos) >= 2:
        slope = float(sps.linregress([a for a, _ in pos], [b for _, b in pos]).slope)
    return {"rows": rows, "non_increasing": non_increasing, "log_slope": slope,
            "fit_points": len(pos), "replicas": replicas, "horizon": horizon}


# --------------------------------------------------------------------------
# occupancy of space-time points, sampled from particle endpoints

def _reach(n: int, tol: float) -> int:
    # sum over |z| > M of P(|Z_n| >= |z|) <= 2 sum_{z > M} exp(-z^2 / 2n) <= tol
    if n == 0:
        return 0
    M = int(math.ceil(math.sqrt(2 * n * math.log(4 * math.sqrt(n) / tol + 1)))) + 1
    return min(n, M)


def _occupancy_pairs(rho: float, q: float, n: int, xs0, xsn, envs: int, seed: int,
                     tol: float = 1e-10, chunk: int = 5000) -> tuple:
    """Occupancy of the sites ``xs0`` at time 0 and ``xsn`` at time n, per environment.

    Each site holds Poisson(rho) particles at time 0; a particle's position at
    time n is its start plus (right moves - left moves) among n lazy steps.
    Particles starting beyond the Hoeffding reach are ignored; the expected
    number of ignored particles that hit a queried site is at most ``tol`` per
    site, and is returned as the residual.
    """
    xs0 = np.asarray(xs0, dtype=np.int64)
    xsn = np.asarray(xsn, dtype=np.int64)
    M = _reach(n, tol)
    span = np.concatenate([xs0, xsn, [0]])
    lo = int(span.min()) - M
    hi = int(span.max()) + M
    sites = np.arange(lo, hi + 1)
    occ0 = np.zeros((envs, xs0.size), dtype=bool)
    occn = np.zeros((envs, xsn.size), dtype=bool)
    done = 0
    block = 0
    while done < envs:
        m = min(chunk, envs - done)
        gen = np.random.default_rng(rng.substream_seed(seed, block))
        block += 1
        counts = gen.poisson(rho, size=(m, sites.size))
        flat = counts.ravel()
        env_id = np.repeat(np.repeat(np.arange(m), sites.size), flat)
        start = np.repeat(np.tile(sites, m), flat)
        moves = gen.binomial(n, 1 - q, size=start.size)
        right = gen.binomial(moves, 0.5)
        end = start + 2 * right - moves
        for j, x in enumerate(xs0):
            hit = env_id[start == x]
            occ0[done + hit, j] = True
        for j, x in enumerate(xsn):
            hit = env_id[end == x]
            occn[done + hit, j] = True
        done += m
    residual = tol * (xs0.size + xsn.size)
    return occ0, occn, residual


def covariance_empirical(rho: float, q: float, n: int, envs: int, seed: int) -> dict:
    """Covariance of the occupancy of (0,0) and (0,n) over independent environments."""
    if n < 1:
        raise ParameterError("n must be at least 1")
    if rho == 0:
        return {"n": n, "cov": 0.0, "se": 0.0, "theory": 0.0, "z": 0.0, "envs": envs,
                "within_3se": True}
    a, b, res = _occupancy_pairs(rho, q, n, [0], [0], envs, seed)
    a = a[:, 0].astype(float)
    b = b[:, 0].astype(float)
    cov = float(np.mean((a - a.mean()) * (b - b.mean())) * envs / (envs - 1))
    # delta-method SE of the sample covariance
    u = (a - a.mean()) * (b - b.mean())
    se = float(u.std(ddof=1) / math.sqrt(envs))
    th = covariance_theory(rho, q, n)
    z = (cov - th) / se if se > 0 else math.inf
    return {"n": n, "cov": cov, "se": se, "theory": th, "z": z, "envs": envs,
            "within_3se": abs(cov - th) <= 3 * se, "residual": res}


def covariance_scaling(rho: float, q: float, ns, envs: int, seed: int) -> dict:
    """sqrt(n) C(n) across n, each ratio to the first compared within 2 SE of 1."""
    rows = [covariance_empirical(rho, q, n, envs, rng.substream_seed(seed, n)) for n in ns]
    scaled = [(math.sqrt(r["n"]) * r["cov"], math.sqrt(r["n"]) * r["se"]) for r in rows]
    base, base_se = scaled[0]
    ratios = []
    ok = True
    for val, se in scaled[1:]:
        ratio = val / base
        rse = abs(ratio) * math.hypot(se / val, base_se / base)
        ratios.append({"ratio": ratio, "se": rse})
        ok &= abs(ratio - 1) <= 2 * rse
    return {"rows": rows, "scaled": [s for s, _ in scaled], "ratios": ratios, "stable": bool(ok)}


# --------------------------------------------------------------------------
# decoupling of vacancy events

@dataclass(frozen=True)
class PointEvent:
    """All listed sites vacant (``kind='vacant'``) or all occupied, at one time layer."""
    sites: tuple
    kind: str = "vacant"

    def __call__(self, occ: np.ndarray) -> np.ndarray:
        if self.kind == "vacant":
            return ~occ.any(axis=1)
        if self.kind == "occupied":
            return occ.all(axis=1)
        raise ParameterError(f"unknown event kind {self.kind!r}")


def _spot_check_monotone(ev: PointEvent, layer: str, rho: float, q: float, n: int, seed: int,
                         trials: int = 200) -> None:
    # evaluate the event before and after superposing an independent cloud
    x0 = ev.sites if layer == "0" else (0,)
    xn = ev.sites if layer == "n" else (0,)
    a0, an, _ = _occupancy_pairs(rho, q, n, x0, xn, trials, seed)
    b0, bn, _ = _occupancy_pairs(rho, q, n, x0, xn, trials, rng.substream_seed(seed, 99))
    before = ev(a0 if layer == "0" else an)
    after = ev((a0 | b0) if layer == "0" else (an | bn))
    if np.any(after & ~before):
        raise PreconditionError("event is not non-increasing in the environment")


def decoupling_probe(rho: float, q: float, ns, envs: int, seed: int,
                     f1: PointEvent = PointEvent((0,)), f2: PointEvent = PointEvent((0,))) -> dict:
    """Correlation of a time-0 event and a time-n event, at equal and sprinkled density.

    ``f1`` looks at time 0 and ``f2`` at time n.  For each n reports the
    equal-density covariance (FKG: at least -3 SE) and the sprinkled gap
    ``E'[f1 f2] - E'[f1] E[f2]`` where ``E'`` uses density rho (1 + n^{-1/16}).
    """
    rows = []
    for n in ns:
        s = rng.substream_seed(seed, n)
        _spot_check_monotone(f1, "0", rho, q, n, s)
        _spot_check_monotone(f2, "n", rho, q, n, s)
        a0, an, _ = _occupancy_pairs(rho, q, n, f1.sites, f2.sites, envs, rng.substream_seed(s, 1))
        u, v = f1(a0).astype(float), f2(an).astype(float)
        prod = (u - u.mean()) * (v - v.mean())
        cov = float(prod.mean() * envs / (envs - 1))
        cov_se = float(prod.std(ddof=1) / math.sqrt(envs))
        rho_s = rho * (1 + n ** (-1 / 16))
        b0, bn, _ = _occupancy_pairs(rho_s, q, n, f1.sites, f2.sites, envs, rng.substream_seed(s, 2))
        u2, v2 = f1(b0).astype(float), f2(bn).astype(float)
        lhs = float(np.mean(u2 * v2))
        e1 = float(u2.mean())
        e2 = float(v.mean())   # f2 at the base density, independent run
        # SE of lhs - e1*e2 by the delta method; the two runs are independent
        d1 = u2 * v2 - e2 * u2
        var = d1.var(ddof=1) / envs + e1 ** 2 * v.var(ddof=1) / envs
        gap = lhs - e1 * e2
        gap_se = math.sqrt(var)
        rows.append({"n": n, "cov": cov, "cov_se": cov_se, "fkg_ok": cov >= -3 * cov_se,
                     "rho_sprinkled": rho_s, "lhs": lhs, "rhs": e1 * e2, "gap": gap,
                     "gap_se": gap_se, "sprinkled_ok": gap <= 3 * gap_se})
    decay = all(b["cov"] <= a["cov"] + 2 * math.hypot(a["cov_se"], b["cov_se"])
                for a, b in zip(rows, rows[1:]))
    return {"rows": rows, "fkg_ok": all(r["fkg_ok"] for r in rows),
            "sprinkled_ok": all(r["sprinkled_ok"] for r in rows), "decays": decay}

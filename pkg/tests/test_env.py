from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from rwdre.env import (
    EnvConfig,
    Environment,
    StreamingCloud,
    boundary_determinism_check,
    covariance_theory,
    sample_environment,
    truncation_residual,
)
from rwdre.errors import ParameterError, PreconditionError, ResourceError, WindowRangeError


def poisson_chi2_pvalue(counts: np.ndarray, rho: float) -> float:
    kmax = int(stats.poisson.ppf(0.999, rho))
    observed = np.array([np.sum(counts == k) for k in range(kmax)] + [np.sum(counts >= kmax)])
    probs = np.append(stats.poisson.pmf(np.arange(kmax), rho), stats.poisson.sf(kmax - 1, rho))
    expected = probs * counts.size
    # merge sparse cells at the tail
    while expected[-1] < 5:
        expected[-2] += expected[-1]
        observed[-2] += observed[-1]
        expected, observed = expected[:-1], observed[:-1]
    return stats.chisquare(observed, expected).pvalue


def test_empty_environment():
    env = sample_environment(EnvConfig(rho=0, q=0.5, x_min=-20, x_max=20, t_max=10, seed=1))
    assert env.n_particles == 0
    assert not env.occupancy_grid().any()
    assert not env.occupied(0, 5)


def test_initial_counts_mean_and_law():
    env = sample_environment(EnvConfig(rho=2, q=0.5, x_min=0, x_max=9999, t_max=0, seed=11))
    counts = env.initial_counts()
    assert abs(counts.mean() - 2) <= 3 * math.sqrt(2 / 1e4)
    assert poisson_chi2_pvalue(counts, 2.0) > 0.01


def test_equilibrium_inside_exact_region():
    env = sample_environment(EnvConfig(rho=1.3, q=0.4, x_min=-5100, x_max=5100, t_max=100, seed=5))
    xs = np.arange(-5000, 5001)
    counts = np.array([env.count(int(x), 100) for x in xs])
    assert all(env.in_exact_region(int(x), 100) for x in xs[[0, -1]])
    assert poisson_chi2_pvalue(counts, 1.3) > 0.01


def test_particle_conservation_and_speed_limit():
    env = sample_environment(EnvConfig(rho=1.5, q=0.3, x_min=-30, x_max=30, t_max=40, t_min=-12, seed=2))
    assert np.all(np.abs(np.diff(env.paths, axis=1)) <= 1)
    total = env.n_particles
    for j in range(env.paths.shape[1]):
        assert np.bincount(env.paths[:, j] - env.paths.min(), minlength=1).sum() == total
    assert np.array_equal(env.positions_at(0), env.zs)


def test_indexed_count_matches_brute_force_scan():
    env = sample_environment(EnvConfig(rho=0.8, q=0.5, x_min=-25, x_max=25, t_max=20, seed=9))
    c = env.cfg
    for n in range(c.t_min, c.t_max + 1, 3):
        for x in range(c.x_min, c.x_max + 1):
            brute = sum(1 for p in range(env.n_particles) if env.paths[p, n - c.t_min] == x)
            assert env.count(x, n) == brute


def test_pure_holding_particles_stay_put():
    env = sample_environment(EnvConfig(rho=1.0, q=1.0, x_min=-10, x_max=10, t_max=15, seed=4))
    counts = env.initial_counts()
    for n in range(env.cfg.t_min, 16):
        for x in range(-10, 11):
            assert env.count(x, n) == counts[x + 10]


def test_single_constructed_particle():
    cfg = EnvConfig(rho=1, q=1, x_min=-3, x_max=3, t_max=4, t_min=0)
    env = Environment.from_trajectories(cfg, [np.zeros(5, dtype=int)])
    assert all(env.count(0, n) == 1 for n in range(5))
    assert not env.occupied(1, 2)


def test_out_of_window_queries_raise():
    env = sample_environment(EnvConfig(rho=1, q=0.5, x_min=0, x_max=10, t_max=5, seed=1))
    with pytest.raises(WindowRangeError):
        env.count(11, 0)
    with pytest.raises(WindowRangeError):
        env.occupied(3, 6)


def test_default_past_is_quarter_of_future():
    assert EnvConfig(rho=1, q=0.5, x_min=0, x_max=1, t_max=200).t_min == -50


def test_config_validation_and_memory_cap():
    with pytest.raises(ParameterError):
        EnvConfig(rho=-1, q=0.5, x_min=0, x_max=1, t_max=1)
    with pytest.raises(ParameterError):
        EnvConfig(rho=1, q=0.5, x_min=3, x_max=1, t_max=1)
    with pytest.raises(ResourceError):
        sample_environment(EnvConfig(rho=5, q=0.5, x_min=0, x_max=10 ** 6, t_max=1000, max_cells=10 ** 6))


def test_nested_windows_agree_on_exact_region():
    small = sample_environment(EnvConfig(rho=1.2, q=0.5, x_min=-40, x_max=40, t_max=30, t_min=-10, seed=21))
    big = sample_environment(EnvConfig(rho=1.2, q=0.5, x_min=-90, x_max=70, t_max=30, t_min=-10, seed=21))
    checked = 0
    for n in range(-10, 31):
        for x in range(-40, 41):
            if small.in_exact_region(x, n):
                assert small.count(x, n) == big.count(x, n)
                checked += 1
    assert checked > 1000


def test_streaming_cloud_agrees_with_dense_window():
    dense = sample_environment(EnvConfig(rho=2.0, q=0.3, x_min=-150, x_max=150, t_max=60, seed=8))
    cloud = StreamingCloud(2.0, 0.3, 8, center=0, reach=60)
    assert cloud.residual < 1e-8
    for n in range(0, 61, 5):
        for x in range(-60 + n, 61 - n):
            assert dense.occupied(x, n) == cloud.occupied(x, n)


def test_truncation_residual_decreases_with_margin():
    vals = [truncation_residual(1.0, 400, 801, m) for m in (0, 40, 80, 160)]
    assert vals == sorted(vals, reverse=True)
    assert vals[-1] < 1e-10


def test_covariance_theory_values():
    assert covariance_theory(0.0, 0.5, 7) == 0.0
    # p_2(0,0) = 0.375 for q = 1/2
    assert covariance_theory(1.0, 0.5, 2) == pytest.approx(math.exp(-2) * (math.exp(0.375) - 1), rel=1e-14)
    assert covariance_theory(1.0, 0.5, 2) == pytest.approx(0.06158, abs=5e-6)
    with pytest.raises(ParameterError):
        covariance_theory(1.0, 0.5, 0)


@settings(max_examples=20, deadline=None)
@given(rho=st.floats(0.01, 5), n=st.integers(1, 200))
def test_covariance_theory_positive_and_below_variance(rho, n):
    c = covariance_theory(rho, 0.5, n)
    var = math.exp(-rho) * (1 - math.exp(-rho))
    assert 0 < c <= var + 1e-15


def _splice(env: Environment, base, other: Environment, seed: int) -> Environment:
    lo, hi = base
    c = env.cfg
    gen = np.random.default_rng(seed)
    trajs = []
    for p in range(env.n_particles):
        if lo <= env.zs[p] <= hi:
            t = env.paths[p].copy()
            past = gen.choice([-1, 0, 1], p=[0.25, 0.5, 0.25], size=-c.t_min)
            t[: -c.t_min] = env.zs[p] + np.cumsum(past)[::-1]
            trajs.append(t)
    for p in range(other.n_particles):
        if not lo <= other.zs[p] <= hi:
            trajs.append(other.paths[p])
    return Environment.from_trajectories(c, trajs)


def test_boundary_determinism():
    cfg = EnvConfig(rho=1.0, q=0.5, x_min=-60, x_max=60, t_max=30, t_min=-10, seed=3)
    env1 = sample_environment(cfg)
    box = (-5, 5, 20, 25)
    assert boundary_determinism_check(env1, env1, box)
    env_other = sample_environment(EnvConfig(rho=1.0, q=0.5, x_min=-60, x_max=60, t_max=30, t_min=-10, seed=99))
    env2 = _splice(env1, (-30, 30), env_other, seed=1)
    assert boundary_determinism_check(env1, env2, box)


def test_boundary_determinism_rejects_count_mismatch():
    cfg = EnvConfig(rho=1.0, q=0.5, x_min=-60, x_max=60, t_max=30, t_min=-10, seed=3)
    env1 = sample_environment(cfg)
    extra = np.full(cfg.duration, 0)
    env2 = env1.with_particles([extra])
    with pytest.raises(PreconditionError, match="site 0"):
        boundary_determinism_check(env1, env2, (-5, 5, 20, 25))

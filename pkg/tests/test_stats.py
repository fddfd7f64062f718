import math

import numpy as np
import pytest
from scipy import stats as sps

from rwdre.env import EnvConfig, sample_environment
from rwdre.errors import ParameterError, PreconditionError, ResourceError
from rwdre.regen import RegenSequence
from rwdre.stats import (
    PointEvent, _occupancy_pairs, ballisticity_probe, clt_test, covariance_empirical, decoupling_probe,
    estimate_speed, increments_two_sample, path_marginals_test, regen_speed_sigma, sigma_batch_means,
    speed_from_terminal, tau_tail, variance_curve,
)
from rwdre.walker import WalkParams, walk_ensemble


def test_homogeneous_speed():
    est = estimate_speed(WalkParams(0.7, 0.7), 0.0, 0.5, 2000, 200, seed=1)
    assert abs(est.v_hat - 0.4) <= 3 * est.se
    assert est.ci[0] < 0.4 < est.ci[1]


def test_speed_deterministic_in_seed():
    a = estimate_speed(WalkParams(0.3, 0.8), 1.0, 0.5, 300, 20, seed=5)
    b = estimate_speed(WalkParams(0.3, 0.8), 1.0, 0.5, 300, 20, seed=5)
    assert np.array_equal(a.terminal, b.terminal)


def test_ci_shrinks_with_replicas():
    p = WalkParams(0.6, 0.6)
    w1 = estimate_speed(p, 0.0, 0.5, 1000, 500, seed=2).se
    w2 = estimate_speed(p, 0.0, 0.5, 1000, 1000, seed=3).se
    assert w2 / w1 == pytest.approx(1 / math.sqrt(2), rel=0.2)


def test_speed_sandwich_inhomogeneous():
    est = estimate_speed(WalkParams(0.3, 0.8), 1.0, 0.5, 1000, 60, seed=4)
    assert -0.4 - 2 * est.se <= est.v_hat <= 0.6 + 2 * est.se


def test_cost_guard():
    with pytest.raises(ResourceError):
        estimate_speed(WalkParams(0.3, 0.8), 50.0, 0.5, 10 ** 6, 1000, seed=0)


def test_clt_symmetric_walk():
    ends = walk_ensemble(WalkParams(0.5, 0.5), 0.0, 0.5, 4096, 1000, seed=6)
    assert clt_test(ends, 4096, 0.0, 1.0)["p_value"] > 0.01
    with pytest.raises(ParameterError):
        clt_test(ends, 4096, 0.0, 0.0)


def test_clt_detects_wrong_scale():
    ends = walk_ensemble(WalkParams(0.5, 0.5), 0.0, 0.5, 4096, 1000, seed=6)
    assert clt_test(ends, 4096, 0.0, 2.0)["p_value"] < 1e-6


def test_variance_slope_and_marginals():
    paths = walk_ensemble(WalkParams(0.5, 0.5), 0.0, 0.5, 4096, 600, seed=7, keep_paths=True)
    curve = variance_curve(paths, [256, 512, 1024, 2048, 4096])
    assert abs(curve["slope"] - 1.0) <= 0.1
    assert path_marginals_test(paths, 0.0, 1.0)["passes"]


def test_batch_means_homogeneous():
    paths = walk_ensemble(WalkParams(0.7, 0.7), 0.0, 0.5, 4000, 200, seed=8, keep_paths=True)
    s, se = sigma_batch_means(paths, 20, 0.4)
    # variance of one step is 1 - 0.4^2
    assert abs(s - math.sqrt(0.84)) <= 3 * se


def _seq(taus, sites):
    return RegenSequence(list(taus), list(sites), [], True, 0.0, [])


def test_regen_speed_from_increments():
    gen = np.random.default_rng(0)
    seqs = []
    for _ in range(300):
        dt = gen.integers(1, 20, size=3)
        dx = np.array([gen.binomial(t, 0.75) * 2 - t for t in dt])
        seqs.append(_seq(np.cumsum(dt), np.cumsum(dx)))
    r = regen_speed_sigma(seqs, bootstrap=200)
    assert abs(r["v"] - 0.5) <= 3 * r["v_se"]
    assert abs(r["sigma"] - math.sqrt(0.75)) <= 3 * r["sigma_se"]


def test_increments_two_sample_same_law():
    gen = np.random.default_rng(1)
    seqs = [_seq(np.cumsum(gen.geometric(0.1, 3)), np.cumsum(gen.integers(0, 9, 3)))
            for _ in range(300)]
    assert increments_two_sample(seqs)["passes"]


def test_increments_two_sample_detects_drift():
    gen = np.random.default_rng(2)
    seqs = [_seq(np.cumsum([gen.geometric(0.1), gen.geometric(0.1) + 10, 1]), [0, 1, 2])
            for _ in range(300)]
    assert not increments_two_sample(seqs)["passes"]


def test_tau_tail_on_stretched_exponential():
    # P(tau > t) = exp(-0.5 log^{3/2} t)
    gen = np.random.default_rng(3)
    u = gen.random(5000)
    taus = np.exp((-np.log(u) / 0.5) ** (2 / 3))
    r = tau_tail(taus)
    assert r["bounded_negative"]
    assert r["gamma_fit"] == pytest.approx(1.5, abs=0.15)


def test_ballisticity_rejects_fast_vstar():
    with pytest.raises(PreconditionError):
        ballisticity_probe(WalkParams(0.7, 0.9), 1.0, 0.5, 1.2, [5], 100, 10, seed=0)


def test_ballisticity_nested_events():
    r = ballisticity_probe(WalkParams(0.6, 0.6), 0.0, 0.5, 0.15, [0, 2, 5, 10, 20], 2000, 400, seed=1)
    ps = [row["p_hat"] for row in r["rows"]]
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    assert r["log_slope"] < 0


def test_occupancy_sampler_matches_environment():
    # the endpoint sampler and the keyed environment give the same joint occupancy law
    n, envs = 8, 3000
    a0, an, _ = _occupancy_pairs(1.0, 0.5, n, [0], [0], envs, seed=1)
    both_fast = np.mean(a0[:, 0] & an[:, 0])
    vals = []
    for s in range(envs):
        env = sample_environment(EnvConfig(1.0, 0.5, -n - 8, n + 8, n, t_min=0, seed=s))
        vals.append(env.occupied(0, 0) and env.occupied(0, n))
    both_env = np.mean(vals)
    se = math.sqrt(both_fast * (1 - both_fast) * 2 / envs)
    assert abs(both_fast - both_env) <= 3 * se


def test_covariance_matches_theory():
    r = covariance_empirical(1.0, 0.5, 2, 100_000, seed=3)
    assert r["theory"] == pytest.approx(0.06158, abs=5e-6)
    assert r["within_3se"]
    assert covariance_empirical(0.0, 0.5, 4, 10, seed=0)["cov"] == 0.0


def test_decoupling_trivial_second_event():
    # an event on no sites is always true, so the covariance vanishes
    r = decoupling_probe(1.0, 0.5, [4], 2000, seed=1, f2=PointEvent(()))
    assert r["rows"][0]["cov"] == 0.0


def test_decoupling_rejects_increasing_event():
    with pytest.raises(PreconditionError):
        decoupling_probe(1.0, 0.5, [4], 1000, seed=1, f1=PointEvent((0,), "occupied"))


def test_decoupling_small_run():
    r = decoupling_probe(1.0, 0.5, [1, 16], 40_000, seed=4)
    assert r["fkg_ok"] and r["sprinkled_ok"]
    assert r["rows"][0]["cov"] > 3 * r["rows"][0]["cov_se"]

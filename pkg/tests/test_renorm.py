import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import polygamma

from rwdre.errors import ParameterError, PreconditionError, ResourceError
from rwdre.renorm import (
    box, box_indices, bad_event, bad_event_monte_carlo, build_ladder, enlargement_check,
    homogeneous_bad_event_exact,
    k0_threshold, layered_displacement, tail_sum_check, three_slow_boxes_check,
)
from rwdre.walker import WalkParams


def test_ladder_scales_exact():
    lad = build_ladder(100, 0.2, 0.6, 1.0, 3)
    assert lad.L == (100, 1000, 31000, 5456000)


def test_ladder_large_scales_are_exact_integers():
    lad = build_ladder(100, 0.2, 0.6, 1.0, 12)
    for a, b in zip(lad.L, lad.L[1:]):
        assert b == math.isqrt(a) * a
    assert lad.L[-1] > 10 ** 250


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=4, max_value=10 ** 6))
def test_first_scale_integer_rule(L0):
    lad = build_ladder(L0, 0.2, 0.6, 1.0, 1)
    assert lad.L[1] == math.isqrt(L0) * L0
    assert lad.L[0] < lad.L[1] <= L0 ** 1.5


def test_speed_limit_matches_trigamma():
    lad = build_ladder(100, 0.2, 0.6, 1.0, 50)
    assert lad.L[-1] is None and lad.log_L[-1] > 1e8
    for k in (1, 2, 5, 10, 20, 50):
        # v_k = v + delta (6/pi^2) sum_{j >= k} 1/j^2
        tail = lad.delta * 6 / math.pi ** 2 * polygamma(1, k)
        assert lad.speed(k) == pytest.approx(lad.v + tail, abs=1e-12)


def test_speeds_decrease_above_limit():
    lad = build_ladder(100, 0.2, 0.6, 1.0, 20)
    sp = lad.speeds[1:]
    assert all(a > b for a, b in zip(sp, sp[1:]))
    assert all(s > lad.v for s in sp)


def test_density_first_step_and_convergence():
    lad = build_ladder(100, 0.2, 0.6, 1.0, 12)
    assert lad.rho[1] == pytest.approx(1 + 100 ** (-1 / 16), rel=1e-14)
    assert lad.rho[1] == pytest.approx(1.74989, abs=1e-5)
    assert lad.rho[-1] / lad.rho[-2] - 1 <= 1e-6
    assert lad.rho_star_partial[-1] == lad.rho[-1]


def test_ladder_rejects_bad_input():
    with pytest.raises(ParameterError):
        build_ladder(3)
    with pytest.raises(ParameterError):
        build_ladder(100, 0.6, 0.2)
    with pytest.raises(ParameterError):
        build_ladder(100, rho0=0)


def test_k0_threshold_scale16():
    lad = build_ladder(16, -1.4, 1.0, 1.0, 5)
    assert lad.delta == pytest.approx(1.2)
    assert k0_threshold(1.2, lad)["k0"] == 1
    res = k0_threshold(1.0, lad)
    assert res["holds"][2] is False and res["k0"] == 3


def test_k0_threshold_direct():
    lad = build_ladder(100, 0.2, 0.6, 1.0, 8)
    res = k0_threshold(0.2, lad)
    for k, ok in res["holds"].items():
        assert ok == (0.2 * 6 / math.pi ** 2 / k ** 2 >= 4 / math.isqrt(lad.L[k]))
    assert all(res["holds"][k] for k in range(res["k0"], 9))


def test_box_indices_cover_big_box():
    Ls, Lb = 16, 64
    ms = box_indices(Ls, Lb)
    big = box(Lb)
    covered = set()
    for r, s in ms:
        x0, x1, n0, n1 = box(Ls, (r, s))
        for x in range(max(x0, big[0]), min(x1, big[1]) + 1):
            for n in range(max(n0, big[2]), min(n1, big[3]) + 1):
                covered.add((x, n))
    assert len(covered) == (big[1] - big[0] + 1) * (big[3] - big[2] + 1)
    assert min(s for _, s in ms) == -1 and max(s for _, s in ms) == Lb // Ls


def test_bad_event_rule():
    assert bad_event(np.array([4, 4, 3]), 10, 0.35)
    assert not bad_event(np.array([4, 4, 4]), 10, 0.35)


@pytest.mark.parametrize("L,p,speed", [(4, 0.7, 0.2), (5, 0.6, 0.0)])
def test_slow_box_frequency_matches_exact_law(L, p, speed):
    exact = homogeneous_bad_event_exact(L, p, speed)
    lad = build_ladder(L, 0.2, 0.6, 1.0, 1)
    # with p_circ == p_bullet the cloud is irrelevant; keep it present anyway
    mc = bad_event_monte_carlo(lad, 0, 0.5, WalkParams(p, p), 0.5, 6000, seed=11, speed=speed)
    assert abs(mc["p_hat"] - exact) <= 4 * math.sqrt(exact * (1 - exact) / 6000)


def test_slow_box_frequency_exact_small_case():
    # one step from two independent starts; fast only if both step right
    assert homogeneous_bad_event_exact(1, 0.7, 0.5) == pytest.approx(1 - 0.49)


def test_dense_fast_cloud_rarely_slow():
    # nearly every site occupied: drift 0.8 against the required 0.5
    lad = build_ladder(16, 0.2, 0.6, 1.0, 1)
    mc = bad_event_monte_carlo(lad, 0, 50.0, WalkParams(0.3, 0.9), 0.5, 300, seed=2, speed=0.5)
    # one start alone fails with probability below the Chernoff bound exp(-L I(0.5))
    p, a = 0.9, 0.75
    rate = a * math.log(a / p) + (1 - a) * math.log((1 - a) / (1 - p))
    assert mc["p_hat"] <= min(1.0, 17 * math.exp(-16 * rate)) + 3 * mc["se"] + 0.01


def test_required_speed_above_drift_always_slow():
    lad = build_ladder(64, 0.2, 0.6, 1.0, 1)
    mc = bad_event_monte_carlo(lad, 0, 1.0, WalkParams(0.8, 0.8), 0.5, 300, seed=3, speed=0.8)
    assert mc["p_hat"] >= 0.99


def test_slow_box_monotone_under_added_particles():
    res = enlargement_check(16, 0.2, WalkParams(0.7, 0.95), 0.5, 0.5, 0.5, seed=4, replicas=300)
    assert res["violations"] == 0
    assert res["slow_after"] < res["slow_before"]
    assert 0 < res["slow_before"] < 300


def test_cost_guard():
    lad = build_ladder(100, 0.2, 0.6, 1.0, 4)
    with pytest.raises(ResourceError):
        bad_event_monte_carlo(lad, 3, 1.0, WalkParams(0.6, 0.9), 0.5, 1, seed=0)


def test_three_slow_boxes_precondition():
    lad = build_ladder(16, 0.0, 1.0, 1.0, 5)
    with pytest.raises(PreconditionError):
        three_slow_boxes_check(lad, 1, WalkParams(0.02, 1.0), 0.03, 0.5, seed=1)


def test_three_slow_boxes_nonvacuous():
    lad = build_ladder(16, -1.4, 1.0, 1.0, 5)
    big = 0
    for r in range(20):
        res = three_slow_boxes_check(lad, 1, WalkParams(0.02, 1.0), 0.03, 0.5, seed=1, replica=r)
        assert res["verdict"]
        big += res["big_slow"]
    assert big > 0


def test_layered_displacement_needs_three_slow_layers():
    lad = build_ladder(16, -1.4, 1.0, 1.0, 5)
    n_layers = lad.L[2] // lad.L[1]
    for slow in [(), (0,), (0, 1)]:
        assert not layered_displacement(lad, 1, slow)["big_slow"]
    assert layered_displacement(lad, 1, tuple(range(n_layers)))["big_slow"]


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 20))
def test_layered_displacement_monotone_in_slow_set(mask):
    lad = build_ladder(16, 0.2, 0.6, 1.0, 3)
    n_layers = lad.L[2] // lad.L[1]
    slow = [j for j in range(n_layers) if mask >> j & 1]
    t1 = layered_displacement(lad, 1, slow)["total"]
    t2 = layered_displacement(lad, 1, slow + [j for j in range(n_layers) if j not in slow][:1])["total"]
    assert t2 <= t1


def test_tail_sum_examples():
    for beta, a in [(0, 10), (1, 60), (1, 200), (0.5, 20)]:
        r = tail_sum_check(beta, a)
        assert r["remainder_ok"]
        assert r["holds"]
        assert r["lhs"] > 0


def test_tail_sum_integral_bound_small_case():
    # beta=0, a=10: sum_{l>10} exp(-log^{3/2} l), partial sums by brute force
    ls = np.arange(11, 2_000_001, dtype=float)
    brute = float(np.exp(-np.log(ls) ** 1.5).sum())
    r = tail_sum_check(0, 10, cutoff=2_000_000)
    assert r["lhs"] == pytest.approx(brute, rel=1e-12)


def test_tail_sum_decreasing_in_a():
    lhs = [tail_sum_check(1, a)["lhs"] for a in (60, 80, 120, 200)]
    assert all(x > y for x, y in zip(lhs, lhs[1:]))


def test_tail_sum_precondition():
    with pytest.raises(PreconditionError):
        tail_sum_check(1, 10)
    with pytest.raises(ParameterError):
        tail_sum_check(-1, 10)

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwdre.errors import ParameterError, PreconditionError
from rwdre.kernel import (
    heat_kernel,
    kernel_bound_report,
    make_paving,
    paving_integral_check,
    step_distribution,
)


def closed_form(q: Fraction, n: int, x: int) -> Fraction:
    """Sum over the number m of moving steps, then over right moves."""
    total = Fraction(0)
    for m in range(abs(x), n + 1):
        if (m + x) % 2:
            continue
        right = (m + x) // 2
        total += comb_frac(n, m) * q ** (n - m) * (1 - q) ** m * comb_frac(m, right) / 2 ** m
    return total


def comb_frac(a, b):
    return Fraction(math.comb(a, b))


def test_step_distribution_examples():
    assert step_distribution(1).as_dict() == {0: 1}
    assert step_distribution(0).as_dict() == {-1: 0.5, 1: 0.5}
    assert step_distribution(0.5).as_dict() == {-1: 0.25, 0: 0.5, 1: 0.25}


def test_step_distribution_rejects_bad_q():
    with pytest.raises(ParameterError):
        step_distribution(1.5)
    with pytest.raises(ParameterError):
        heat_kernel(-0.1, 3)


def test_zero_steps_is_delta():
    k = heat_kernel(0.3, 0)
    assert k.as_dict() == {0: 1.0}


def test_one_step_half_lazy():
    k = heat_kernel(0.5, 1)
    assert k(0) == 0.5 and k(1) == 0.25 and k(-1) == 0.25


def test_two_step_return_probability():
    assert heat_kernel(0.5, 2)(0) == 0.375
    assert heat_kernel(0.5, 2, exact=True)(0) == Fraction(3, 8)


@pytest.mark.parametrize("q", [Fraction(0), Fraction(1, 4), Fraction(1, 2), Fraction(2, 3), Fraction(1)])
@pytest.mark.parametrize("n", [0, 1, 2, 7, 16])
def test_exact_mode_matches_closed_form(q, n):
    k = heat_kernel(q, n, exact=True)
    for x in range(-n - 1, n + 2):
        assert k(x) == closed_form(q, n, x)


def test_half_lazy_is_shifted_binomial():
    # with q=1/2 the walk is a fair binomial on 2n coin flips, recentred
    n = 40
    k = heat_kernel(0.5, n)
    for x in range(-n, n + 1):
        assert k(x) == pytest.approx(math.comb(2 * n, n + x) / 4 ** n, rel=1e-12, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(q=st.sampled_from([0.0, 0.25, 0.5, 1.0]) | st.floats(0, 1), n=st.integers(0, 256))
def test_normalization_symmetry_support(q, n):
    k = heat_kernel(q, n)
    v = k.values
    assert abs(v.sum() - 1.0) <= 1e-12
    assert np.array_equal(v, v[::-1])
    assert k(n + 1) == 0.0 and k(-n - 5) == 0.0
    assert np.all(v >= 0)


@pytest.mark.parametrize("q", [0.0, 0.25, 0.5, 1.0])
def test_semigroup_float(q):
    for m in range(0, 33, 4):
        for n in range(0, 33, 3):
            lhs = heat_kernel(q, m + n).values
            rhs = np.convolve(heat_kernel(q, m).values, heat_kernel(q, n).values)
            assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_semigroup_exact():
    q = Fraction(1, 4)
    for m, n in [(1, 1), (3, 5), (8, 8), (13, 19)]:
        a, b, c = (heat_kernel(q, j, exact=True) for j in (m, n, m + n))
        for x in range(-(m + n), m + n + 1):
            s = sum((a(y) * b(x - y) for y in range(-m, m + 1)), Fraction(0))
            assert s == c(x)


def test_exact_mode_limit():
    with pytest.raises(ParameterError):
        heat_kernel(0.5, 65, exact=True)


def test_bound_report_tail_at_n4():
    # P(|Z_4| > 2 log 4) = P(|Z_4| >= 3) = 2 (8 + 1) / 256 for q = 1/2
    rep = kernel_bound_report(0.5, 4, c=0.0)
    assert rep["n"][2] == 4
    assert rep["tail_scaled"][2] == pytest.approx(18 / 256, rel=1e-14)


def test_bound_report_half_lazy_bounded():
    rep = kernel_bound_report(0.5, 256)
    assert all(rep["bounded"].values())
    assert rep["lipschitz_trend_ok"]
    assert not rep["degenerate"]
    # sup p_n sqrt(n) approaches 1/sqrt(2 pi (1-q)) from below
    assert rep["C_sup"] < 1 / math.sqrt(2 * math.pi * 0.5)


def test_bound_report_flags_pure_holding():
    rep = kernel_bound_report(1.0, 64)
    assert rep["degenerate"]
    assert not rep["bounded"]["sup"]
    assert rep["sup_scaled"][-1] == pytest.approx(8.0)


def test_paving_full_coverage():
    k = heat_kernel(0.5, 30)
    pav = make_paving(-10, 9, 5)
    res = paving_integral_check(k, pav, list(range(-10, 10)), rho=1.0, c=0.0)
    assert res["lhs"] == pytest.approx(k.mass_on(-10, 9), rel=1e-14)
    assert res["holds"]


def test_paving_empty_target():
    k = heat_kernel(0.5, 30)
    pav = make_paving(1, 0, 4)
    res = paving_integral_check(k, pav, [], rho=1.0, c=0.5)
    assert res["lhs"] == 0.0 and res["rhs"] <= 0.0 and res["holds"]


def test_paving_left_endpoints_example():
    k = heat_kernel(0.5, 64)
    pav = make_paving(-16, 16, 4)
    assert len(pav.indices) == 9 and pav.offset == -16
    points = [seg.start for seg in pav.segments()]
    res = paving_integral_check(k, pav, points, rho=0.25, c=1.0)
    oracle = sum(Fraction(math.comb(128, 64 + x), 4 ** 64) for x in points)
    assert res["lhs"] == pytest.approx(float(oracle), rel=1e-12)
    assert res["lhs"] == pytest.approx(0.24972726810195578, rel=1e-12)
    mass = sum(Fraction(math.comb(128, 64 + x), 4 ** 64) for x in range(-16, 17))
    expected_rhs = 0.25 * (float(mass) - 4 * math.log(64) / 8)
    assert res["rhs"] == pytest.approx(expected_rhs, rel=1e-12)
    assert res["holds"]


def test_paving_density_violation_names_segment():
    k = heat_kernel(0.5, 16)
    pav = make_paving(0, 7, 4)
    with pytest.raises(PreconditionError, match=r"segment 1 = \[4,7\]"):
        paving_integral_check(k, pav, [0, 1], rho=0.5, c=0.0)


@settings(max_examples=30, deadline=None)
@given(lo=st.integers(-50, 50), width=st.integers(0, 60), L=st.integers(1, 9))
def test_paving_blocks_disjoint_and_cover(lo, width, L):
    hi = lo + width - 1
    pav = make_paving(lo, hi, L)
    seen = set()
    for seg in pav.segments():
        assert len(seg) == L
        assert seen.isdisjoint(seg)
        seen.update(seg)
    assert set(range(lo, hi + 1)) <= seen

"""Acceptance battery at full size, one test per criterion.

Each test prints a single ``criterion NN PASS|FAIL  title`` line, then asserts.
Run only these with ``pytest -m acceptance -s``; skip them with ``-m "not acceptance"``.
"""
import pytest

from rwdre.acceptance import CRITERIA, FAULTS, run_battery, run_criterion

SEED = 2024


@pytest.mark.acceptance
@pytest.mark.parametrize("number", [num for num, _, _ in CRITERIA], ids=lambda n: f"criterion_{n:02d}")
def test_criterion(number, capsys):
    v = run_criterion(number, "full", SEED)
    with capsys.disabled():
        print("\n" + v.line() + f"  ({v.seconds:.0f} s)")
        print("    " + repr(v.details))
    assert v.passed, v.details


@pytest.mark.parametrize("fault", FAULTS)
def test_injected_fault_is_caught(fault):
    v = run_criterion(1, "quick", SEED, fault=fault)
    assert not v.passed


def test_quick_report_is_reproducible():
    a = run_battery("quick", SEED, only=[1, 9, 10])
    b = run_battery("quick", SEED, only=[1, 9, 10])
    assert [(x.passed, x.details) for x in a] == [(y.passed, y.details) for y in b]
    assert all(x.passed for x in a)

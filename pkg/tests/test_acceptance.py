"""Acceptance suite: one test per criterion, each printing its pass/fail lines."""

import pytest

from ewlab.suites import run_suite

_REPORTS = {}


def report(name):
    if name not in _REPORTS:
        _REPORTS[name] = run_suite(name)
    return _REPORTS[name]


def _assert_criterion(suite, k):
    rep = report(suite)
    checks = rep.by_criterion(k)
    assert checks, f"no checks for criterion {k}"
    for c in checks:
        print(c.line(rep.suite))
    failed = [c.name for c in checks if not c.passed]
    assert not failed, f"criterion {k} failed: {failed}"


def test_criterion_01_piola_identity():
    _assert_criterion("piola", 1)


def test_criterion_02_gradient_structure():
    _assert_criterion("piola", 2)


def test_criterion_03_decoupling():
    _assert_criterion("decoupling", 3)


def test_criterion_04_psi_linearity():
    _assert_criterion("decoupling", 4)


def test_criterion_05_linear_dispersion():
    _assert_criterion("linear-waves", 5)


def test_criterion_06_energy():
    _assert_criterion("linear-waves", 6)


def test_criterion_07_flat_cone():
    _assert_criterion("raychaudhuri", 7)


def test_criterion_08_raychaudhuri_residual():
    _assert_criterion("raychaudhuri", 8)


def test_criterion_09_h_spacelike_and_coercive():
    _assert_criterion("coercive", 9)


def test_criterion_10_littlewood_paley():
    _assert_criterion("lp", 10)


def test_criterion_11_divergence_part():
    _assert_criterion("decoupling", 11)


def test_criterion_12_determinism():
    _assert_criterion("determinism", 12)


@pytest.mark.parametrize("name", ["piola", "lp"])
def test_suites_within_budget(name):
    # each suite must finish within five minutes
    assert report(name).seconds <= 300.0

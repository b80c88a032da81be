"""Full-size acceptance suite: one test per criterion, one PASS/FAIL line each.

The criteria run once per session in numeric order; the lines are printed
as each criterion finishes and again in the terminal summary.
"""

import sys

import pytest

from cablegff.acceptance import CRITERIA, run_acceptance

LINES: list[str] = []


@pytest.fixture(scope="module")
def results():
    def report(res):
        LINES.append(res.line())
        sys.__stdout__.write("\n" + res.line() + "\n")
        sys.__stdout__.flush()

    return {r.number: r for r in run_acceptance(quick=False, progress=report)}


@pytest.mark.parametrize("number", sorted(CRITERIA), ids=lambda k: f"criterion-{k:02d}")
def test_criterion(results, number):
    res = results[number]
    assert res.passed, f"{res.line()}: {res.detail}"
    assert res.within_budget, f"{res.line()}: over the runtime budget"

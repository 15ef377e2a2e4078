"""The ten acceptance criteria at their stated tolerances.

Each test prints the one-line verdict, so ``pytest -s`` (or the ``-rA``
summary) shows a pass/fail line per criterion.
"""
from __future__ import annotations

import pytest

from fluxsync.acceptance import CRITERIA, criterion_fault, criterion_sync


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, runs):
    res = CRITERIA[number](runs)
    print(res.line())
    assert res.number == number
    assert res.passed, res.line()


class TestNegativeControls:
    """Deliberately broken configurations must fail the criterion they target."""

    def test_unreachable_threshold_never_engages(self, runs):
        res = criterion_fault(runs, edits={"wpgs.WPG1.control.gamma": 1e9})
        print(res.line())
        assert not res.passed
        assert res.detail["engaged_s"] == []

    def test_no_dc_link_feedback_desynchronizes(self, runs):
        res = criterion_sync(runs, edits={"wpgs.WPG3.control.k_i": 0.0})
        print(res.line())
        assert not res.passed
        assert res.detail["spread_pu"] > 0.005

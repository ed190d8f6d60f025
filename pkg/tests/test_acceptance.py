"""Acceptance criteria, one test each.

The profile is taken from ``MFLQ_ACCEPTANCE_PROFILE`` (``full`` by default,
``quick`` for a fast smoke run).  Each test prints its pass/fail line.
"""
import os

import pytest

from mflq.acceptance import CRITERIA, PROFILES

PROFILE = os.environ.get("MFLQ_ACCEPTANCE_PROFILE", "full")


@pytest.mark.acceptance
@pytest.mark.parametrize("number", range(1, len(CRITERIA) + 1))
def test_criterion(number, capsys):
    res = CRITERIA[number - 1](PROFILES[PROFILE])
    with capsys.disabled():
        print(f"\n{res.line()} [{res.seconds:.1f}s]")
    assert res.passed, res.detail

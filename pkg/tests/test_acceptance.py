"""Acceptance battery: every criterion at its stated tolerance, one status line each.

The tier defaults to ``full``; set ``HOMOG_ACCEPTANCE_TIER=fast`` for a quick pass.
"""

import os
import sys

import pytest

from homog.verify import CRITERIA, verify_suite

TIER = os.environ.get("HOMOG_ACCEPTANCE_TIER", "full")


@pytest.fixture(scope="module")
def battery(request):
    capture = request.config.pluginmanager.getplugin("capturemanager")
    with capture.global_and_fixture_disabled():
        print(f"\nacceptance battery ({TIER} tier)", file=sys.stdout, flush=True)
        results = verify_suite(TIER, seed=0, stream=sys.stdout)
    return results


def test_each_criterion_reported_once(battery):
    assert sorted(r.id for r in battery) == list(CRITERIA)


@pytest.mark.slow
@pytest.mark.parametrize("cid", CRITERIA, ids=[f"C{c:02d}" for c in CRITERIA])
def test_criterion(battery, cid):
    res = next(r for r in battery if r.id == cid)
    assert res.passed, res.line()

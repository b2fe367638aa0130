"""Tests for the acceptance battery plumbing (the battery itself runs in test_acceptance)."""

import io
import math

import pytest
from scipy import stats

from homog.verify import (
    CRITERIA,
    CRITERION_FUNCS,
    CriterionResult,
    gaussian_tail,
    run_criterion,
    verify_suite,
    write_verify_outputs,
)


class TestEnumeration:
    def test_thirteen_criteria(self):
        assert CRITERIA == tuple(range(1, 14))
        assert sorted(CRITERION_FUNCS) == list(CRITERIA)

    def test_unknown_criterion(self):
        with pytest.raises(ValueError):
            verify_suite("fast", [14], stream=False)

    def test_unknown_tier(self):
        with pytest.raises(ValueError):
            verify_suite("medium", [1], stream=False)

    def test_subset_reported_once(self):
        buf = io.StringIO()
        results = verify_suite("fast", [2, 1, 2], stream=buf)
        assert [r.id for r in results] == [1, 2]
        lines = buf.getvalue().splitlines()
        assert lines[0].startswith("[PASS] C01") and lines[1].startswith("[PASS] C02")
        assert lines[-1] == "2/2 criteria passed (fast tier)"


class TestResults:
    def test_line_format(self):
        r = CriterionResult(3, "title", False, "x", "y", 1.25, "note")
        assert r.line() == "[FAIL] C03 title: x (expected y) [1.2s] | note"

    def test_exception_becomes_failure(self, monkeypatch):
        def boom(tier, seed, drift_sign):
            """Exploding criterion."""
            raise RuntimeError("bang")

        monkeypatch.setitem(CRITERION_FUNCS, 1, boom)
        res = run_criterion(1, "fast")
        assert not res.passed
        assert "RuntimeError: bang" in res.measured
        assert res.title == "Exploding criterion."

    def test_outputs(self, tmp_path):
        write_verify_outputs([CriterionResult(1, "t", True, "m", "e", 0.5)], tmp_path)
        assert (tmp_path / "verify.csv").read_text().splitlines()[1] == "1,t,True,m,e,True"
        assert "C01" in (tmp_path / "verify_timings.json").read_text()

    def test_gaussian_tail_reference(self):
        assert gaussian_tail(4.0, 2.0, 1) == pytest.approx(2 * stats.norm.sf(1.0))
        # chi distribution with two degrees of freedom: exp(-r^2 / 2t)
        assert gaussian_tail(2.0, 2.0, 2) == pytest.approx(math.exp(-1.0))


class TestMutation:
    def test_flipped_drift_fails_exit_criteria(self):
        results = verify_suite("fast", [9, 10], drift_sign=1.0, stream=False)
        assert [r.passed for r in results] == [False, False]

    def test_unmutated_passes(self):
        assert run_criterion(9, "fast").passed

"""Tests for decay scans, two-scale limits and translation audits."""

import math

import numpy as np
import pytest
from scipy.special import i0

from homog.cell import SolverConfig, effective_diffusivity
from homog.errors import ConfigError
from homog.models import exceptional_model, figure1_model, two_scale_pair
from homog.multiscale import (
    decay_scan,
    fit_rates,
    sandwich_audit,
    translation_audit,
    two_scale_convergence_study,
    write_convergence_csv,
    write_decay_csv,
)
from homog.potential import MultiscaleModel, PotentialExpr, constant, oscillation, sin

SPECTRAL = SolverConfig(scheme="spectral", N=64)
AMG = SolverConfig(preconditioner="amg")


class TestDecayScan:
    def test_single_record(self):
        scan = decay_scan(figure1_model(4, 1), 0, AMG, period_points=32)
        assert len(scan.records) == 1
        assert scan.rate is None
        assert scan.eps_hat == (0.0,)

    def test_zero_model(self):
        model = MultiscaleModel((constant(2),) * 3, (2, 2))
        scan = decay_scan(model, 2, SolverConfig(N=8), period_points=4)
        for rec in scan.records:
            np.testing.assert_allclose(rec.tensor.matrix, np.eye(2), atol=1e-12)
        assert scan.rate.lambda_plus == pytest.approx(0.0, abs=1e-12)
        assert max(scan.eps_hat) == pytest.approx(0.0, abs=1e-12)

    def test_separated_scales_factorize_in_one_dimension(self):
        # 0.5(sin - sin 81) telescopes to 0.5(sin(x / 81^n) - sin(81 x)); the two
        # surviving scales are so far apart that D is the product of factors 1 / I0(1)^2.
        scan = decay_scan(exceptional_model(81, 2), 2)
        expected = (1.0 / i0(1.0) ** 2) ** 2
        for rec in scan.records:
            assert rec.tensor.lambda_min == pytest.approx(expected, rel=1e-10)
        assert scan.rate.lambda_plus == pytest.approx(0.0, abs=1e-10)

    def test_oscillation_lower_bound(self):
        model = exceptional_model(3, 3)
        scan = decay_scan(model, 3)
        for rec in scan.records:
            W = model.periodic_potential(0, rec.n)
            assert rec.tensor.lambda_min >= math.exp(-2.0 * oscillation(W)) * (1 - 1e-3)

    def test_figure1_decays(self):
        scan = decay_scan(figure1_model(4, 2), 2, AMG, period_points=32)
        ln_max = scan.ln_lambda_max()
        assert np.all(np.diff(ln_max) < 0)
        assert scan.rate.lambda_plus < 0
        assert all(e >= 0 for e in scan.eps_hat)

    def test_rejects_depth_beyond_model(self):
        with pytest.raises(ConfigError):
            decay_scan(figure1_model(4, 1), 2)

    def test_csv_is_deterministic(self, tmp_path):
        scan1 = decay_scan(exceptional_model(4, 2), 2)
        scan2 = decay_scan(exceptional_model(4, 2), 2)
        write_decay_csv(scan1, tmp_path / "a.csv")
        write_decay_csv(scan2, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_sandwich_audit_zero_when_products_match(self):
        scan = decay_scan(exceptional_model(4, 2), 2)
        tensors = [scan.records[0].tensor] + [
            type(r.tensor)(r.tensor.matrix / scan.records[r.n - 1].tensor.matrix) for r in scan.records[1:]
        ]
        assert max(sandwich_audit(scan.records, tensors)) <= 1e-12

    def test_fit_rates_explicit_window(self):
        scan = decay_scan(exceptional_model(4, 3), 3)
        rate = fit_rates(scan.records, window=[1, 2, 3])
        ln = np.log([r.tensor.lambda_max for r in scan.records[1:]])
        assert rate.lambda_plus == pytest.approx(np.polyfit([1, 2, 3], ln, 1)[0], abs=1e-12)


class TestTwoScale:
    def test_zero_fast_scale(self):
        _, T = two_scale_pair()
        study = two_scale_convergence_study(constant(2), T, [2, 4], SPECTRAL)
        assert np.abs(study.errors()).max() < 1e-8

    def test_zero_slow_scale(self):
        U, _ = two_scale_pair()
        study = two_scale_convergence_study(U, constant(2), [2], SolverConfig(scheme="spectral", N=128))
        assert study.errors()[0] < 1e-8

    def test_errors_decrease(self):
        U, T = two_scale_pair()
        e = two_scale_convergence_study(U, T, [2, 4], SolverConfig(scheme="spectral", N=128)).errors()
        assert e[1] < e[0]

    def test_corollary_eps_bounded_by_error(self):
        # lambda_min(D(U)) D(T) <= D(U, T) <= lambda_max(D(U)) D(T) implies eps <= e(R).
        U, T = two_scale_pair()
        study = two_scale_convergence_study(U, T, [2, 4], SolverConfig(scheme="spectral", N=128))
        for row in study.rows:
            assert row.eps_corollary <= row.e + 1e-8

    def test_csv(self, tmp_path):
        U, T = two_scale_pair()
        study = two_scale_convergence_study(U, T, [2], SPECTRAL)
        write_convergence_csv(study, tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "R,f_minus,f_plus,e"
        assert len(lines) == 2

    @pytest.mark.parametrize("R", [1, 2.5])
    def test_invalid_ratio(self, R):
        U, T = two_scale_pair()
        with pytest.raises(ConfigError):
            two_scale_convergence_study(U, T, [R], SPECTRAL)


class TestTranslationAudit:
    def test_zero_offset(self):
        U, T = two_scale_pair()
        rows = translation_audit(U, T, 4, [(0.0, 0.0)], SolverConfig(N=64))
        assert rows[0].g == pytest.approx(0.0, abs=1e-12)
        assert rows[0].within_bound

    def test_no_slow_scale_is_invariant(self):
        U, _ = two_scale_pair()
        rows = translation_audit(U, constant(2), 4, [(0.25, 0.5), (1 / 16, 0)], SolverConfig(N=64))
        assert max(r.g for r in rows) < 1e-8

    def test_offsets_within_bound(self):
        U, T = two_scale_pair()
        rows = translation_audit(U, T, 4, [(0.5, 0.25), (0.125, 0.0)], SolverConfig(N=64))
        assert all(r.within_bound for r in rows)

    def test_incommensurate_offset_rejected(self):
        U, T = two_scale_pair()
        with pytest.raises(ConfigError):
            translation_audit(U, T, 4, [(0.001, 0.0)], SolverConfig(N=64))

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            translation_audit(PotentialExpr(1, sin(1)), constant(2), 4, [(0.0,)])

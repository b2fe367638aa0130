"""Tests for the periodic cell problem and its dual."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import i0

from homog.cell import (
    EffectiveTensor,
    SolverConfig,
    corrector_closed_form_1d,
    dual_diffusivity,
    effective_diffusivity,
    log_spectral_factors,
    pcg,
    solve_cell,
    stream_tensor,
    two_scale_diffusivity,
    voigt_reiss,
)
from homog.errors import ConfigError, ConvergenceError, ResolutionError
from homog.models import random_trig_polynomial, two_scale_pair
from homog.potential import Add, PotentialExpr, Scale, constant, cos, sin

seeds = st.integers(min_value=0, max_value=2**32 - 1)
SPECTRAL = SolverConfig(scheme="spectral", N=64)
ROT = np.array([[0.0, -1.0], [1.0, 0.0]])

# Harmonic mean of exp(2 sin) in closed form: 1 / I0(2)^2.
D_SIN = 1.0 / i0(2.0) ** 2


class TestTrivialPotentials:
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_zero_potential_gives_identity(self, d):
        sol = solve_cell(constant(d), SolverConfig(N=8))
        np.testing.assert_allclose(sol.tensor.matrix, np.eye(d), atol=1e-14)
        for i in range(d):
            assert sol.sup_norm(i) == pytest.approx(0.0, abs=1e-14)

    def test_constant_shift_irrelevant(self):
        U = PotentialExpr(2, Add((sin(1, 0), cos(0, 1))))
        D1 = effective_diffusivity(U, SPECTRAL).matrix
        D2 = effective_diffusivity(U + 3.0, SPECTRAL).matrix
        np.testing.assert_allclose(D1, D2, atol=1e-12)


class TestOneDimensional:
    def test_sin_harmonic_mean(self):
        assert D_SIN == pytest.approx(0.19244, abs=1e-5)
        D = effective_diffusivity(PotentialExpr(1, sin(1)), SolverConfig(N=4096))
        assert D.lambda_min == pytest.approx(D_SIN, rel=1e-12)

    def test_spectral_corrector_matches_closed_form(self):
        U = PotentialExpr(1, Add((sin(1), Scale(0.5, cos(3)))))
        N = 4096
        sol = solve_cell(U, SolverConfig(N=N, scheme="spectral"))
        chi = sol.correctors[0].samples
        k = np.fft.fftfreq(N, 1.0 / N)
        dchi = np.fft.ifft(2j * np.pi * k * np.fft.fft(chi)).real
        np.testing.assert_allclose(dchi, corrector_closed_form_1d(U, N), atol=1e-6)

    @given(seeds)
    def test_equals_voigt_reiss(self, seed):
        U = random_trig_polynomial(np.random.default_rng(seed), 1, max_freq=6)
        D = effective_diffusivity(U, SolverConfig(N=1024))
        assert D.lambda_min == pytest.approx(voigt_reiss(U), rel=1e-9)


class TestSeparable:
    def test_sin_in_first_axis(self):
        U = PotentialExpr(2, sin(1, 0))
        D = effective_diffusivity(U, SolverConfig(N=256))
        np.testing.assert_allclose(D.matrix, np.diag([D_SIN, 1.0]), atol=1e-4)

    def test_second_corrector_vanishes(self):
        sol = solve_cell(PotentialExpr(2, sin(1, 0)), SolverConfig(N=64))
        assert sol.sup_norm(1) < 1e-10

    def test_diagonal_cases(self):
        D = effective_diffusivity(PotentialExpr(2, sin(0, 2)), SolverConfig(N=256)).matrix
        np.testing.assert_allclose(D, np.diag([1.0, D_SIN]), atol=1e-4)


class TestProperties:
    @given(seeds)
    def test_sandwich_and_symmetry(self, seed):
        U = random_trig_polynomial(np.random.default_rng(seed), 2, max_freq=3)
        D = effective_diffusivity(U, SPECTRAL)
        np.testing.assert_allclose(D.matrix, D.matrix.T, atol=1e-10)
        vr = voigt_reiss(U)
        assert vr <= D.lambda_min + 1e-8
        assert D.lambda_max <= 1.0 + 1e-8

    @given(seeds)
    def test_translation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        U = random_trig_polynomial(rng, 2, max_freq=3)
        y = rng.integers(0, 64, size=2) / 64
        D1 = effective_diffusivity(U, SPECTRAL).matrix
        D2 = effective_diffusivity(U.translated(y), SPECTRAL).matrix
        np.testing.assert_allclose(D1, D2, atol=1e-9)

    @given(seeds)
    def test_rotation_duality_in_plane(self, seed):
        # D(U) R^T D(-U) R = I / (<e^{2U}><e^{-2U}>) in two dimensions.
        U = random_trig_polynomial(np.random.default_rng(seed), 2, max_freq=3)
        sol = solve_cell(U, SPECTRAL)
        Dm = effective_diffusivity(-U, SPECTRAL).matrix
        prod = sol.tensor.matrix @ ROT.T @ Dm @ ROT * sol.mass_minus * sol.mass_plus
        np.testing.assert_allclose(prod, np.eye(2), atol=1e-8)

    def test_grid_convergence_second_order(self):
        U = PotentialExpr(2, Add((sin(1, 1), Scale(0.5, cos(1, -2)))))
        ref = effective_diffusivity(U, SolverConfig(N=256, scheme="spectral")).matrix
        errs = [np.abs(effective_diffusivity(U, SolverConfig(N=N)).matrix - ref).max() for N in (32, 64)]
        assert np.log2(errs[0] / errs[1]) >= 1.9

    def test_spectral_and_fv_agree(self):
        U = PotentialExpr(2, sin(1, 1))
        a = effective_diffusivity(U, SolverConfig(N=256)).matrix
        b = effective_diffusivity(U, SolverConfig(N=64, scheme="spectral")).matrix
        np.testing.assert_allclose(a, b, atol=3e-4)

    def test_amg_matches_fft_preconditioner(self):
        U = PotentialExpr(2, Add((sin(1, 0), cos(1, 2))))
        a = effective_diffusivity(U, SolverConfig(N=64)).matrix
        b = effective_diffusivity(U, SolverConfig(N=64, preconditioner="amg")).matrix
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_corrector_sup_norm_bounded(self):
        # The gauge-fixed corrector stays O(1) as the amplitude grows slowly.
        norms = []
        for a in (0.5, 1.0):
            sol = solve_cell(PotentialExpr(2, Scale(a, sin(1, 1))), SPECTRAL)
            norms.append(sol.sup_norm(0))
        assert all(np.isfinite(norms)) and max(norms) < 1.0


class TestDual:
    def test_zero_potential(self):
        np.testing.assert_allclose(dual_diffusivity(constant(2), SolverConfig(N=8)).matrix, np.eye(2), atol=1e-12)

    def test_separable_sin(self):
        Q = dual_diffusivity(PotentialExpr(2, sin(1, 0)), SolverConfig(N=256, scheme="spectral"))
        np.testing.assert_allclose(Q.matrix, np.diag([1.0, D_SIN]), atol=1e-6)

    def test_one_dimension_rejected(self):
        with pytest.raises(ConfigError):
            dual_diffusivity(PotentialExpr(1, sin(1)))

    @given(seeds)
    def test_eigenvalue_pairing(self, seed):
        U = random_trig_polynomial(np.random.default_rng(seed), 2, max_freq=3)
        D = effective_diffusivity(U, SPECTRAL)
        Q = dual_diffusivity(U, SPECTRAL)
        np.testing.assert_allclose(D.eigenvalues * Q.eigenvalues[::-1], voigt_reiss(U), rtol=1e-7)


class TestVoigtReiss:
    def test_constant(self):
        assert voigt_reiss(constant(2, 4.0)) == 1.0

    def test_sin(self):
        assert voigt_reiss(PotentialExpr(1, sin(1))) == pytest.approx(D_SIN, rel=1e-12)

    def test_separable_sum_factorizes(self):
        U = PotentialExpr(2, Add((sin(1, 0), sin(0, 1))))
        assert voigt_reiss(U) == pytest.approx(D_SIN**2, rel=1e-12)


class TestTwoScale:
    def test_zero_outer_potential(self):
        D = np.array([[0.7, 0.1], [0.1, 0.5]])
        out = two_scale_diffusivity(EffectiveTensor(D), constant(2), SolverConfig(N=8))
        np.testing.assert_allclose(out.matrix, D, atol=1e-12)

    def test_identity_inner_tensor(self):
        T = PotentialExpr(2, sin(1, 1))
        a = two_scale_diffusivity(EffectiveTensor.identity(2), T, SPECTRAL).matrix
        b = effective_diffusivity(T, SPECTRAL).matrix
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_one_dimension_product(self):
        U, T = PotentialExpr(1, sin(1)), PotentialExpr(1, Scale(0.5, cos(1)))
        inner = effective_diffusivity(U, SolverConfig(N=1024))
        out = two_scale_diffusivity(inner, T, SolverConfig(N=1024))
        assert out.lambda_min == pytest.approx(inner.lambda_min * voigt_reiss(T), rel=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            two_scale_diffusivity(np.eye(3), constant(2), SolverConfig(N=8))


class TestStreamTensor:
    def test_zero_potential(self):
        st_ = stream_tensor(constant(2), SolverConfig(N=8))
        assert np.abs(st_.H).max() < 1e-14

    def test_divergence_reproduces_defect(self):
        U = PotentialExpr(2, sin(1, 1))
        st_ = stream_tensor(U, SolverConfig(N=64))
        assert st_.skew_defect() == 0.0
        assert np.abs(st_.divergence() - st_.P).max() <= 1e-6

    def test_defect_has_zero_mean(self):
        U, _ = two_scale_pair()
        P = stream_tensor(U, SolverConfig(N=64)).P
        assert np.abs(P.mean(axis=(2, 3))).max() < 1e-8


class TestLogSpectralFactors:
    def test_identity(self):
        assert log_spectral_factors(np.eye(2), np.eye(2)) == pytest.approx((1.0, 1.0))

    def test_diagonal(self):
        lo, hi = log_spectral_factors(np.diag([2.0, 3.0]), np.diag([1.0, 2.0]))
        assert (lo, hi) == pytest.approx((1.5, 2.0))


class TestConfiguration:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"tol": 0.0},
            {"tol": 1e-3},
            {"max_iter": 10},
            {"points_per_oscillation": 1.0},
            {"N": 12},
            {"scheme": "fem"},
            {"preconditioner": "ilu"},
            {"scheme": "spectral", "preconditioner": "amg"},
        ],
    )
    def test_invalid_settings(self, kwargs):
        with pytest.raises(ConfigError):
            SolverConfig(**kwargs)

    def test_under_resolved(self):
        with pytest.raises(ResolutionError):
            effective_diffusivity(PotentialExpr(1, sin(8)), SolverConfig(N=8))

    def test_budget(self):
        with pytest.raises(ResolutionError):
            effective_diffusivity(PotentialExpr(2, sin(1, 1)), SolverConfig(N=1024, max_unknowns=1 << 16))

    def test_resolution_policy(self):
        assert SolverConfig(points_per_oscillation=16).resolution(5, 2) == 128

    def test_pcg_reports_non_convergence(self):
        A = np.diag(np.arange(1.0, 1001.0))
        with pytest.raises(ConvergenceError):
            pcg(lambda x: A @ x, np.ones(1000), lambda r: r, 1e-14, 3)

"""Tests for potentials, grid sampling and multi-scale superpositions."""

import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from homog.errors import ConfigError, ResolutionError
from homog.models import figure1_potential, random_trig_polynomial
from homog.potential import (
    Add,
    Const,
    GridField,
    MultiscaleModel,
    PotentialExpr,
    Scale,
    constant,
    cos,
    grad_potential,
    holder_seminorm,
    multiscale_evaluate,
    oscillation,
    sample_grid,
    self_similar,
    sin,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _figure1_mp(x, y):
    """Figure-1 formula in arbitrary precision, normalized to vanish at the origin."""
    mpmath.mp.dps = 40
    pi = mpmath.pi

    def raw(x, y):
        a = mpmath.cos(2 * pi * x + pi * mpmath.sin(2 * pi * y) + 1) ** 2
        b = mpmath.sin(-4 * pi * y + pi * mpmath.cos(2 * pi * x) + 2)
        c = mpmath.cos(2 * pi * y + pi * mpmath.sin(2 * pi * x))
        return a * b * c

    return raw(mpmath.mpf(x), mpmath.mpf(y)) - raw(0, 0)


class TestEvaluation:
    def test_sin_normalized_at_origin(self):
        U = PotentialExpr(1, sin(1))
        assert U.value(0.0) == 0.0
        assert U.value(0.25) == pytest.approx(1.0, abs=1e-15)

    def test_offset_subtracted(self):
        U = PotentialExpr(1, cos(1))
        assert U.value(0.0) == 0.0
        assert U.value(0.5) == pytest.approx(-2.0)

    def test_figure1_matches_arbitrary_precision(self):
        U = figure1_potential()
        expected = float(_figure1_mp("0.3", "0.7"))
        assert U.value([0.3, 0.7]) == pytest.approx(expected, abs=1e-13)
        # frozen value of the same oracle
        assert expected == pytest.approx(-0.17914893938694804, abs=1e-15)

    def test_figure1_gradient_matches_finite_differences(self):
        U = figure1_potential()
        x = np.array([0.3, 0.7])
        h = 1e-6
        fd = np.array([(U.value(x + h * e) - U.value(x - h * e)) / (2 * h) for e in np.eye(2)])
        g = grad_potential(U, x)
        np.testing.assert_allclose(g, fd, rtol=1e-6)
        np.testing.assert_allclose(g, [-6.66882622, 5.6020689], rtol=1e-7)

    def test_sin_gradient_at_origin(self):
        assert grad_potential(PotentialExpr(1, sin(1)), [0.0])[0] == pytest.approx(2 * math.pi)

    def test_constant_gradient_is_zero(self):
        np.testing.assert_array_equal(grad_potential(constant(3, 2.5), np.zeros(3)), np.zeros(3))

    @given(seeds)
    def test_periodic_in_every_axis(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 3))
        U = random_trig_polynomial(rng, d, max_freq=6)
        x = rng.uniform(-2, 2, size=(1000, d))
        base = U.value(x)
        for i in range(d):
            np.testing.assert_allclose(U.value(x + np.eye(d)[i]), base, atol=1e-12)

    @given(seeds)
    def test_gradient_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 3))
        U = random_trig_polynomial(rng, d, max_freq=4)
        x = rng.uniform(0, 1, size=(100, d))
        h = 1e-6
        g = U.grad(x)
        for i in range(d):
            e = h * np.eye(d)[i]
            fd = (U.value(x + e) - U.value(x - e)) / (2 * h)
            scale = np.abs(g).max()
            np.testing.assert_allclose(g[:, i], fd, atol=1e-6 * scale)

    def test_bounded_on_unit_cube(self):
        U = figure1_potential()
        x = np.random.default_rng(0).uniform(0, 1, size=(5000, 2))
        v = U.value(x)
        assert np.all(np.isfinite(v))
        assert np.abs(v).max() <= U.amplitude_bound()


class TestSerialization:
    @given(seeds)
    def test_json_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        U = random_trig_polynomial(rng, 2, max_freq=5)
        V = PotentialExpr.from_json(json.loads(json.dumps(U.to_json())), 2)
        x = rng.uniform(0, 1, size=(50, 2))
        np.testing.assert_array_equal(U.value(x), V.value(x))

    def test_figure1_round_trip(self):
        U = figure1_potential()
        V = PotentialExpr.from_json(U.to_json())
        assert V.d == 2
        assert V.value([0.3, 0.7]) == U.value([0.3, 0.7])

    @pytest.mark.parametrize(
        "obj",
        [
            {"op": "tan", "freq": [1]},
            {"op": "sin", "freq": [1.5]},
            {"op": "sin"},
            {"op": "add", "args": []},
            {"op": "pow", "m": -1, "arg": {"op": "const", "value": 1.0}},
            {"op": "const", "value": float("nan")},
            {"op": "sin", "freq": [1], "extra": 0},
        ],
    )
    def test_malformed_expressions_rejected(self, obj):
        with pytest.raises(ConfigError):
            PotentialExpr.from_json(obj, 1)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            PotentialExpr.from_json({"op": "sin", "freq": [1, 2]}, 1)

    def test_model_round_trip(self):
        model = self_similar(PotentialExpr(1, sin(1)), 4, 2)
        back = MultiscaleModel.from_json(json.loads(json.dumps(model.to_json())))
        assert back.ratios == (4, 4)
        assert back.R == (1, 4, 16)


class TestBandwidth:
    def test_trig_polynomial_exact(self):
        U = PotentialExpr(2, Add((sin(3, -1), cos(0, 5))))
        assert U.bandwidth == 5

    def test_rescaled_multiplies_bandwidth(self):
        U = PotentialExpr(1, sin(3))
        assert U.rescaled(4).bandwidth == 12

    def test_constant_has_zero_bandwidth(self):
        assert constant(2).bandwidth == 0


class TestGridField:
    def test_constant_samples_zero(self):
        g = sample_grid(constant(1, 3.0), 8)
        np.testing.assert_array_equal(g.samples, np.zeros(8))

    def test_sin_on_four_points(self):
        g = sample_grid(PotentialExpr(1, sin(1)), 4)
        np.testing.assert_allclose(g.samples, [0, 1, 0, -1], atol=1e-15)

    def test_decimation_idempotent(self):
        U = figure1_potential()
        np.testing.assert_array_equal(sample_grid(U, 64).decimate(2).samples, sample_grid(U, 32).samples)

    def test_periodic_indexing(self):
        g = sample_grid(PotentialExpr(1, sin(1)), 8)
        assert g.at((9,)) == g.at((1,))
        assert g.at((-1,)) == g.at((7,))

    def test_invalid_sizes(self):
        with pytest.raises(ConfigError):
            GridField(1, 6, np.zeros(6))
        with pytest.raises(ConfigError):
            GridField(1, 8, np.full(8, np.inf))

    def test_under_resolution_raises(self):
        with pytest.raises(ResolutionError):
            sample_grid(PotentialExpr(1, sin(8)), 8, min_points_per_oscillation=2)

    def test_dump_and_load(self, tmp_path):
        g = sample_grid(figure1_potential(), 16)
        g.dump(tmp_path / "u.bin")
        back = GridField.load(tmp_path / "u.bin")
        np.testing.assert_array_equal(back.samples, g.samples)


class TestSeminorms:
    def test_constant(self):
        assert oscillation(constant(2, 1.0)) == 0.0
        assert holder_seminorm(constant(2, 1.0), 0.5) == 0.0

    def test_sin_oscillation(self):
        assert oscillation(PotentialExpr(1, sin(1))) == pytest.approx(2.0, abs=1e-3)

    @pytest.mark.parametrize("a", [0.3, 1.7])
    def test_oscillation_scales(self, a):
        assert oscillation(PotentialExpr(1, Scale(a, sin(1)))) == pytest.approx(2 * a, abs=1e-3)

    def test_lipschitz_of_sin(self):
        assert holder_seminorm(PotentialExpr(1, sin(1)), 1.0) == pytest.approx(2 * math.pi, rel=1e-2)

    def test_holder_homogeneous(self):
        U = PotentialExpr(2, Add((sin(1, 2), cos(2, -1))))
        assert holder_seminorm(U * 2.5, 1.0) == pytest.approx(2.5 * holder_seminorm(U, 1.0), rel=1e-9)

    @given(seeds, st.sampled_from([0.5, 0.75, 1.0]))
    def test_oscillation_bounded_by_holder(self, seed, alpha):
        # Any two points of the circle are within distance 1/2, so
        # Osc(U) <= |U|_alpha (1/2)^alpha (up to the probe tolerances).
        rng = np.random.default_rng(seed)
        U = random_trig_polynomial(rng, 1, max_freq=6)
        assert oscillation(U) <= holder_seminorm(U, alpha) * 0.5**alpha * (1 + 2e-3) + 1e-9

    def test_invalid_alpha(self):
        with pytest.raises(ConfigError):
            holder_seminorm(PotentialExpr(1, sin(1)), 1.5)


class TestMultiscale:
    def test_single_scale_is_u0(self):
        U = PotentialExpr(1, sin(1))
        model = self_similar(U, 4, 2)
        x = np.linspace(0, 1, 11)
        np.testing.assert_allclose(multiscale_evaluate(model, 0, 0, x[:, None]), U.value(x))

    def test_telescoping_identity(self):
        U = PotentialExpr(1, Add((sin(1), Scale(-1.0, sin(81)))))
        model = self_similar(U, 81, 2)
        x = np.random.default_rng(3).uniform(0, 10, size=100)
        expected = np.sin(2 * np.pi * x / 81**2) - np.sin(2 * np.pi * 81 * x)
        np.testing.assert_allclose(multiscale_evaluate(model, 0, 2, x[:, None]), expected, atol=1e-12)

    def test_vanishes_at_origin(self):
        model = self_similar(figure1_potential(), 4, 3)
        assert multiscale_evaluate(model, 0, 3, np.zeros(2)) == pytest.approx(0.0, abs=1e-14)

    @given(seeds)
    def test_period_R_n(self, seed):
        rng = np.random.default_rng(seed)
        model = MultiscaleModel(
            tuple(random_trig_polynomial(rng, 2, max_freq=3) for _ in range(3)), (2, 3)
        )
        x = rng.uniform(-5, 5, size=(200, 2))
        base = multiscale_evaluate(model, 0, 2, x)
        for e in np.eye(2):
            np.testing.assert_allclose(multiscale_evaluate(model, 0, 2, x + 6 * e), base, atol=1e-11)

    def test_periodic_potential_matches_superposition(self):
        model = self_similar(PotentialExpr(1, sin(1)) * 0.5, 4, 2)
        W = model.periodic_potential(0, 2)
        x = np.linspace(0, 1, 33)
        np.testing.assert_allclose(W.value(x), multiscale_evaluate(model, 0, 2, 16 * x[:, None]), atol=1e-13)

    @pytest.mark.parametrize("ratios", [(1,), (2.5,), (0,)])
    def test_invalid_ratios(self, ratios):
        U = PotentialExpr(1, sin(1))
        with pytest.raises(ConfigError):
            MultiscaleModel((U, U), ratios)

    def test_hypothesis_constants_finite(self):
        model = self_similar(figure1_potential(), 4, 1)
        assert math.isfinite(model.K0) and model.K0 > 0
        assert math.isfinite(model.K_alpha)
        assert model.rho_min == model.rho_max == 4

    def test_bad_range(self):
        model = self_similar(PotentialExpr(1, sin(1)), 4, 1)
        with pytest.raises(ConfigError):
            multiscale_evaluate(model, 1, 3, np.zeros(1))

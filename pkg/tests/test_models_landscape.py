"""Tests for bundled models and real-line landscapes."""

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from homog.errors import ConfigError
from homog.landscape import Landscape, as_landscape
from homog.models import (
    battery_model,
    exceptional_model,
    exceptional_potential,
    figure1_model,
    get_model,
    model_names,
    random_trig_polynomial,
    two_scale_pair,
)
from homog.potential import PotentialExpr, constant, multiscale_evaluate, oscillation, sin

seeds = st.integers(min_value=0, max_value=2**32 - 1)


class TestModels:
    def test_names(self):
        assert model_names() == ("battery", "exceptional", "figure1")

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            get_model("nope")

    def test_battery_depth_counts_scales(self):
        assert get_model("battery", n=2).n_max == 2
        assert battery_model(4, 3).n_max == 2

    def test_overrides(self):
        m = get_model("figure1", rho=8, n=2)
        assert m.R == (1, 8, 64) and m.d == 2

    def test_exceptional_values(self):
        U = exceptional_potential(0.5, 81)
        x = np.array([0.1, 0.37])
        np.testing.assert_allclose(U.value(x), 0.5 * (np.sin(2 * np.pi * x) - np.sin(2 * np.pi * 81 * x)), atol=1e-12)
        assert exceptional_model(3, 2).ratios == (3, 3)

    def test_scale_separation_hypothesis(self):
        # Lipschitz constant pi against rho = 4 for the battery; about 20 against 4 for figure 1.
        assert battery_model(4, 3).within_hypothesis()
        assert not figure1_model(4, 3).within_hypothesis()
        assert battery_model(3, 3, amplitude=0.5).within_hypothesis() is False

    def test_two_scale_pair_dimension(self):
        U, T = two_scale_pair()
        assert U.d == T.d == 2

    @given(seeds, st.integers(min_value=1, max_value=3))
    def test_random_polynomial_oscillation(self, seed, d):
        U = random_trig_polynomial(np.random.default_rng(seed), d, max_freq=4, osc_max=2.0)
        assert 0.5 - 1e-6 <= oscillation(U) <= 2.0 + 1e-6

    def test_random_polynomial_reproducible(self):
        a = random_trig_polynomial(np.random.default_rng(9), 2)
        b = random_trig_polynomial(np.random.default_rng(9), 2)
        assert json.dumps(a.to_json()) == json.dumps(b.to_json())


class TestLandscape:
    def test_key_includes_dimension(self):
        a = Landscape(((constant(1), 1.0),))
        b = Landscape(((constant(2), 1.0),))
        assert a.key() != b.key()

    def test_model_landscape_matches_superposition(self):
        model = battery_model(4, 3)
        V = as_landscape(model)
        x = np.linspace(-20, 20, 101)
        np.testing.assert_allclose(V.value(x), multiscale_evaluate(model, 0, 2, x[:, None]), atol=1e-13)

    def test_partial_range(self):
        model = battery_model(4, 3)
        V = as_landscape(model, 2, 1)
        assert [R for _, R in V.terms] == [4.0, 16.0]

    @given(seeds)
    def test_gradient_matches_differences(self, seed):
        rng = np.random.default_rng(seed)
        V = Landscape(((random_trig_polynomial(rng, 2, max_freq=3), 1.0), (random_trig_polynomial(rng, 2, max_freq=3), 5.0)))
        x = rng.uniform(-3, 3, size=(50, 2))
        h = 1e-6
        g = V.grad(x)
        for i in range(2):
            e = h * np.eye(2)[i]
            np.testing.assert_allclose(g[:, i], (V.value(x + e) - V.value(x - e)) / (2 * h), atol=1e-6 * np.abs(g).max())

    def test_lipschitz_bound_holds(self):
        V = as_landscape(figure1_model(4, 1))
        x = np.random.default_rng(0).uniform(-4, 4, size=(5000, 2))
        assert np.linalg.norm(V.grad(x), axis=1).max() <= V.lipschitz_bound

    def test_ball_range_brackets_values(self):
        V = as_landscape(battery_model(4, 3))
        lo, hi = V.ball_range(1.0, 3.0)
        x = np.linspace(-2.0, 4.0, 20001)
        vals = V.value(x)
        assert lo <= vals.min() and vals.max() <= hi
        assert hi - lo <= (vals.max() - vals.min()) + V.lipschitz_bound * V.finest_wavelength / 16 + 1e-9

    def test_constant_ball_range(self):
        V = as_landscape(constant(2))
        assert V.ball_range((0, 0), 5.0) == (0.0, 0.0)
        assert math.isinf(V.finest_wavelength)

    @pytest.mark.parametrize(
        "terms",
        [(), ((constant(1), 1.0), (constant(2), 1.0)), ((constant(1), 0.0),), ((constant(1), math.inf),)],
    )
    def test_invalid_terms(self, terms):
        with pytest.raises(ConfigError):
            Landscape(terms)

    def test_unsupported_type(self):
        with pytest.raises(TypeError):
            as_landscape("sin")

    def test_one_dimensional_scalar_input(self):
        V = as_landscape(PotentialExpr(1, sin(1)))
        assert V.value(0.25) == pytest.approx(1.0)

"""Tests for the Euler-Maruyama Monte Carlo engine."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from homog.errors import ConfigError
from homog.landscape import Landscape, as_landscape
from homog.models import battery_model, random_trig_polynomial
from homog.oracles import exact_exit_time_1d, exact_gibbs_exit_time_1d, gibbs_mass_ratio_1d
from homog.potential import PotentialExpr, constant, oscillation, sin
from homog.sde import (
    BOUNDARY_SHIFT,
    ExitTimeRecord,
    SdeConfig,
    clopper_pearson,
    exit_exponent_fit,
    exponent_window,
    gibbs_ball_sampler,
    heat_tail,
    mean_exit_time,
    path_generator,
    stability_probe,
    tail_fit,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _gaussian_tail(t, r):
    """P(|W_t| >= r) for a one-dimensional Brownian motion."""
    return 2.0 * stats.norm.sf(r / math.sqrt(t))


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"dt": 0.0},
            {"dt": float("inf")},
            {"paths": 10},
            {"seed": -1},
            {"c1": 0.0},
            {"drift_sign": 0.5},
            {"time_cap_factor": 0.0},
            {"threads": 0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SdeConfig(**kwargs)

    def test_policy_bound(self):
        V = as_landscape(PotentialExpr(1, sin(1)))
        cfg = SdeConfig(c1=0.01, c2=0.01)
        assert cfg.step(V) == pytest.approx(min(0.01 / (2 * math.pi) ** 2, 0.01))
        with pytest.raises(ConfigError):
            SdeConfig(dt=0.1).step(V)

    def test_free_default_step(self):
        assert SdeConfig().step(as_landscape(constant(1))) == 1e-3

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv("HOMOG_THREADS", "3")
        assert SdeConfig().worker_count() == 3
        monkeypatch.setenv("HOMOG_THREADS", "x")
        with pytest.raises(ConfigError):
            SdeConfig().worker_count()

    def test_boundary_shift_constant(self):
        from scipy.special import zeta

        assert BOUNDARY_SHIFT == pytest.approx(-zeta(0.5) / math.sqrt(2 * math.pi), rel=1e-14)


class TestDeterminism:
    def test_repeatable(self):
        cfg = SdeConfig(dt=1e-3, paths=200, seed=5)
        a = mean_exit_time(constant(1), 1.0, (0.0,), cfg)
        b = mean_exit_time(constant(1), 1.0, (0.0,), cfg)
        assert a == b

    def test_thread_count_invariant(self):
        V = battery_model(4, 2)
        a = mean_exit_time(V, 2.0, "gibbs-ball", SdeConfig(dt=0.01, c1=0.2, paths=300, threads=1))
        b = mean_exit_time(V, 2.0, "gibbs-ball", SdeConfig(dt=0.01, c1=0.2, paths=300, threads=3))
        assert a.tau_mean == b.tau_mean and a.stderr == b.stderr

    def test_seed_changes_result(self):
        a = mean_exit_time(constant(1), 1.0, (0.0,), SdeConfig(dt=1e-3, paths=200, seed=1))
        b = mean_exit_time(constant(1), 1.0, (0.0,), SdeConfig(dt=1e-3, paths=200, seed=2))
        assert a.tau_mean != b.tau_mean

    def test_path_streams_independent_of_order(self):
        x = path_generator(3, 7).random(4)
        path_generator(3, 6).random(10)
        np.testing.assert_array_equal(path_generator(3, 7).random(4), x)


class TestFreeMotion:
    @pytest.mark.parametrize("d,expected", [(1, 1.0), (2, 0.5), (3, 1.0 / 3.0)])
    def test_exit_from_centre(self, d, expected):
        rec = mean_exit_time(constant(d), 1.0, np.zeros(d), SdeConfig(dt=1e-3, paths=4000))
        assert abs(rec.tau_mean - expected) <= 3 * rec.stderr + 0.01 * expected

    def test_step_halving(self):
        recs = [
            mean_exit_time(constant(1), 1.0, (0.0,), SdeConfig(dt=dt, paths=200_000, seed=11))
            for dt in (4e-3, 2e-3)
        ]
        assert abs(recs[0].tau_mean - recs[1].tau_mean) <= 0.01

    def test_shift_removes_delay(self):
        # Without the continuity correction discrete monitoring overstates the time.
        plain = mean_exit_time(constant(1), 1.0, (0.0,), SdeConfig(dt=1e-2, paths=20_000, boundary_shift=False))
        fixed = mean_exit_time(constant(1), 1.0, (0.0,), SdeConfig(dt=1e-2, paths=20_000))
        assert plain.tau_mean - 1.0 > 3 * plain.stderr
        assert abs(fixed.tau_mean - 1.0) <= 3 * fixed.stderr + 0.01

    def test_gibbs_start_free(self):
        rec = mean_exit_time(constant(1), 2.0, "gibbs-ball", SdeConfig(dt=1e-3, paths=4000))
        assert abs(rec.tau_mean - 8.0 / 3.0) <= 3 * rec.stderr + 0.02 * 8 / 3

    def test_censoring(self):
        rec = mean_exit_time(constant(1), 1.0, (0.0,), SdeConfig(dt=1e-2, paths=200, time_cap_factor=0.05))
        assert rec.censored > 0
        assert not rec.valid

    def test_invalid_start(self):
        with pytest.raises(ConfigError):
            mean_exit_time(constant(1), 1.0, "origin")
        with pytest.raises(ConfigError):
            mean_exit_time(constant(1), -1.0)


class TestBattery:
    def test_matches_quadrature(self):
        V = battery_model()
        cfg = SdeConfig(dt=0.01, c1=0.2, paths=2000, seed=3)
        rec = mean_exit_time(V, 4.0, "gibbs-ball", cfg)
        exact = exact_gibbs_exit_time_1d(V, (-4.0, 4.0))
        assert abs(rec.tau_mean - exact) <= 3 * rec.stderr + 0.02 * exact

    def test_point_start_matches_quadrature(self):
        V = battery_model(4, 2)
        rec = mean_exit_time(V, 2.0, (0.3,), SdeConfig(dt=0.005, c1=0.2, paths=2000), center=(0.0,))
        exact = exact_exit_time_1d(V, (-2.0, 2.0), 0.3)
        assert abs(rec.tau_mean - exact) <= 3 * rec.stderr + 0.02 * exact

    def test_flipped_drift_detected(self):
        V = battery_model()
        cfg = SdeConfig(dt=0.01, c1=0.2, paths=2000, seed=3, drift_sign=1.0)
        rec = mean_exit_time(V, 4.0, "gibbs-ball", cfg)
        exact = exact_gibbs_exit_time_1d(V, (-4.0, 4.0))
        assert abs(rec.tau_mean - exact) > 3 * rec.stderr + 0.02 * exact


class TestGibbsSampler:
    def test_one_dimensional_histogram(self):
        V = battery_model(4, 2)
        L = as_landscape(V)
        gen = gibbs_ball_sampler(V, 2.0, seed=0)
        x = np.array([next(gen)[0] for _ in range(5000)])
        edges = np.linspace(-2.0, 2.0, 21)
        w = [integrate.quad(lambda s: math.exp(-2 * L.value(s)), a, b)[0] for a, b in zip(edges[:-1], edges[1:])]
        expected = np.array(w) / sum(w) * x.size
        counts, _ = np.histogram(x, edges)
        assert stats.chisquare(counts, expected).pvalue > 1e-3

    def test_uniform_disc_radius(self):
        gen = gibbs_ball_sampler(constant(2), 1.5, seed=1)
        rad2 = np.array([np.sum(next(gen) ** 2) for _ in range(4000)]) / 1.5**2
        assert stats.kstest(rad2, "uniform").pvalue > 1e-3

    def test_constant_matches_zero(self):
        a = gibbs_ball_sampler(constant(1, 2.0), 1.0, seed=4)
        b = gibbs_ball_sampler(constant(1), 1.0, seed=4)
        for _ in range(50):
            np.testing.assert_array_equal(next(a), next(b))

    def test_mean_of_inverse_weight_1d(self):
        # E_m[e^{2V}] = |B| / int_B e^{-2V} for the Gibbs measure on the ball.
        V = PotentialExpr(1, sin(1)) * 0.7
        gen = gibbs_ball_sampler(V, 1.3, seed=2)
        vals = np.exp(2 * V.value(np.array([next(gen)[0] for _ in range(20_000)])))
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - gibbs_mass_ratio_1d(V, (-1.3, 1.3))) <= 4 * se

    def test_mean_of_inverse_weight_2d(self):
        V = PotentialExpr(2, sin(1, 0)) * 0.5
        r = 1.2
        mass = integrate.dblquad(
            lambda rad, th: rad * math.exp(-2 * V.value([rad * math.cos(th), rad * math.sin(th)])),
            0, 2 * math.pi, 0, r,
        )[0]
        gen = gibbs_ball_sampler(V, r, seed=3)
        pts = np.array([next(gen) for _ in range(20_000)])
        vals = np.exp(2 * V.value(pts))
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - math.pi * r * r / mass) <= 4 * se


class TestAveragedStability:
    @given(seeds)
    def test_gibbs_exit_time_perturbation(self, seed):
        rng = np.random.default_rng(seed)
        V = random_trig_polynomial(rng, 1, max_freq=4)
        P = random_trig_polynomial(rng, 1, max_freq=4, osc_max=1.0)
        r = float(rng.uniform(0.5, 3.0))
        base = exact_gibbs_exit_time_1d(Landscape(((V, 1.0),)), (-r, r))
        pert = exact_gibbs_exit_time_1d(Landscape(((V, 1.0), (P, 1.0))), (-r, r))
        bound = math.exp(2.0 * oscillation(P) * (1 + 1e-3))
        assert 1.0 / bound <= pert / base <= bound


def _record(r, tau, se=None):
    return ExitTimeRecord(r, "gibbs-ball", tau, se if se is not None else 0.01 * tau, 1000, 0.01, 0)


class TestExponentFit:
    def test_diffusive_scaling(self):
        fit = exit_exponent_fit([_record(r, 0.5 * r * r) for r in (2, 4, 8)])
        assert fit.nu_slope == pytest.approx(0.0, abs=1e-12)
        # the prefactor shows up in the pointwise exponents only
        assert fit.nu_pointwise[-1][1] == pytest.approx(math.log(0.5) / math.log(8))

    def test_power_law(self):
        fit = exit_exponent_fit([_record(r, r**2.4) for r in (2, 4, 8, 16)])
        assert fit.nu_slope == pytest.approx(0.4, abs=1e-12)
        for _, nu, _ in fit.nu_pointwise:
            assert nu == pytest.approx(0.4)

    def test_time_scaling_shifts_pointwise_only(self):
        a = exit_exponent_fit([_record(r, r**2.3) for r in (2, 4, 8)])
        b = exit_exponent_fit([_record(r, 7 * r**2.3) for r in (2, 4, 8)])
        assert a.nu_slope == pytest.approx(b.nu_slope, abs=1e-12)

    def test_windows(self):
        fit = exit_exponent_fit([_record(r, r**2.4) for r in (4, 16, 64)], bounds=(0.3, 0.9, 4, 4))
        lo, hi = exponent_window(64, 0.3, 0.9, 4, 4)
        assert fit.windows[-1] == (64.0, lo, hi)
        assert fit.in_window() == (lo <= 0.4 <= hi)
        assert "windows" in fit.to_json()

    def test_errors(self):
        with pytest.raises(ConfigError):
            exit_exponent_fit([_record(2, 4), _record(4, 16)])
        with pytest.raises(ConfigError):
            exit_exponent_fit([_record(2, 4), _record(2, 4), _record(4, 16)])
        bad = ExitTimeRecord(8, "gibbs-ball", 64, 1, 100, 0.01, 50)
        with pytest.raises(ConfigError):
            exit_exponent_fit([_record(2, 4), _record(4, 16), bad])
        with pytest.raises(ConfigError):
            exit_exponent_fit([_record(r, r * r) for r in (2, 3, 4)], scales=(1, 16, 256))
        with pytest.raises(ConfigError):
            exit_exponent_fit([_record(r, r * r) for r in (1, 2, 4)])


class TestClopperPearson:
    def test_edges(self):
        lo, hi = clopper_pearson(0, 100)
        assert lo == 0.0 and hi == pytest.approx(1 - 0.025 ** (1 / 100))
        lo, hi = clopper_pearson(100, 100)
        assert hi == 1.0 and lo == pytest.approx(0.025 ** (1 / 100))

    def test_contains_estimate(self):
        lo, hi = clopper_pearson(37, 200)
        assert lo < 37 / 200 < hi


class TestHeatTail:
    def test_free_gaussian_tails(self):
        study = heat_tail(constant(1), [1.0, 4.0], [1.0, 2.0, 4.0], SdeConfig(dt=0.01, paths=4000))
        level = 1 - 0.05 / len(study.records)
        for rec in study.records:
            lo, hi = clopper_pearson(rec.hits, rec.paths, level)
            assert lo <= _gaussian_tail(rec.t, rec.r) <= hi

    def test_free_walk_dimension(self):
        study = heat_tail(
            constant(1), [1.0, 2.0, 4.0, 8.0, 16.0], [2.0, 4.0, 6.0, 8.0], SdeConfig(dt=0.01, paths=20_000)
        )
        assert study.fit.d_w == pytest.approx(2.0, abs=0.1)

    def test_times_must_be_step_multiples(self):
        with pytest.raises(ConfigError):
            heat_tail(constant(1), [0.015], [1.0], SdeConfig(dt=0.01, paths=100))

    def test_fit_needs_cells(self):
        study = heat_tail(constant(1), [1.0], [10.0], SdeConfig(dt=0.01, paths=100))
        assert study.fit is None
        with pytest.raises(ConfigError):
            tail_fit(study.records)


class TestStabilityProbe:
    def test_zero_tail(self):
        model = battery_model(4, 2)
        rep = stability_probe(model, 1, 0.0, 2.0, SdeConfig(dt=0.01, c1=0.2, paths=1000), n_top=1)
        assert rep.osc_tail == 0.0
        assert rep.inf_ref <= rep.sup_ref
        assert rep.mu_hat == pytest.approx(1.0)

    def test_small_tail_oscillation(self):
        model = battery_model(4, 3, amplitude=0.1)
        rep = stability_probe(model, 1, 0.0, 2.0, SdeConfig(dt=0.01, c1=0.2, paths=1000), n_top=2)
        assert rep.mu_hat <= math.exp(2 * rep.osc_tail) + 1e-9
        assert not rep.inconclusive

    def test_range_checked(self):
        with pytest.raises(ConfigError):
            stability_probe(battery_model(4, 2), 2, 0.0, 1.0, n_top=1)

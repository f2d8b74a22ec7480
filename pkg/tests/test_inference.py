from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from lifespan_gamm.data import LongitudinalDataset
from lifespan_gamm.errors import NumericalError, SpecError
from lifespan_gamm.inference import (IntervalEstimate, PosteriorCurveSample, age_at_max_distribution,
                                     basis_dimension_check, covariance_factor, hdi, normal_multiplier,
                                     pointwise_band, sample_linear, sample_posterior_curves,
                                     simultaneous_band, simultaneous_multiplier, wald_term_test)
from lifespan_gamm.model import ModelSpec, Smooth, fit_model, predict


def cross_sectional(y, **columns):
    n = len(y)
    return LongitudinalDataset.from_columns(np.arange(n), columns.pop("age", np.full(n, 30.0)),
                                            np.zeros(n), y, columns)


def fit_smooths(y, k=10, **columns):
    data = cross_sectional(y, **columns)
    terms = tuple(Smooth(name, k) for name in columns)
    return fit_model(ModelSpec(terms), data)


@pytest.fixture(scope="module")
def wiggly_fit():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, 300)
    return fit_smooths(np.sin(2 * np.pi * x) + rng.normal(0, 0.3, 300), k=10, x=x)


GRID = {"x": np.linspace(0.02, 0.98, 41)}


class TestCovarianceFactor:
    def test_reproduces_covariance(self):
        A = np.random.default_rng(0).normal(size=(6, 6))
        cov = A @ A.T
        f = covariance_factor(cov)
        np.testing.assert_allclose(f @ f.T, cov, atol=1e-12)

    def test_semidefinite_gives_rank_columns(self):
        A = np.random.default_rng(1).normal(size=(6, 3))
        f = covariance_factor(A @ A.T)
        assert f.shape == (6, 3)
        np.testing.assert_allclose(f @ f.T, A @ A.T, atol=1e-12)

    def test_zero_covariance(self):
        assert covariance_factor(np.zeros((4, 4))).shape == (4, 0)

    def test_indefinite_fails_after_retry(self):
        with pytest.raises(NumericalError):
            covariance_factor(np.diag([1.0, -1.0]))


class TestPosteriorSampling:
    def test_zero_covariance_draws_equal_estimate(self, wiggly_fit):
        fitted = replace(wiggly_fit, coef_covariance=np.zeros_like(wiggly_fit.coef_covariance))
        sample = sample_posterior_curves(fitted, GRID, n_draws=50, seed=1)
        assert np.all(sample.draws == predict(fitted, GRID).estimate)

    def test_draw_covariance_matches_design(self, wiggly_fit):
        grid = {"x": np.array([0.1, 0.3, 0.5, 0.7, 0.9])}
        sample = sample_posterior_curves(wiggly_fit, grid, n_draws=200_000, seed=3)
        X = wiggly_fit.design.matrix(grid)
        expected = X @ wiggly_fit.coef_covariance @ X.T
        rel = np.abs(np.cov(sample.draws, rowvar=False) - expected) / np.sqrt(np.outer(np.diag(expected),
                                                                                     np.diag(expected)))
        assert rel.max() < 0.05

    def test_mean_matches_prediction(self, wiggly_fit):
        sample = sample_posterior_curves(wiggly_fit, GRID, n_draws=20_000, seed=4)
        pred = predict(wiggly_fit, GRID)
        assert np.all(np.abs(sample.draws.mean(axis=0) - pred.estimate) <= 3 * pred.se / np.sqrt(20_000))

    def test_independent_of_workers(self, wiggly_fit):
        a = sample_posterior_curves(wiggly_fit, GRID, n_draws=5000, seed=9, workers=1)
        b = sample_posterior_curves(wiggly_fit, GRID, n_draws=5000, seed=9, workers=4)
        assert np.array_equal(a.draws, b.draws)

    def test_seed_changes_draws(self, wiggly_fit):
        a = sample_posterior_curves(wiggly_fit, GRID, n_draws=10, seed=1)
        b = sample_posterior_curves(wiggly_fit, GRID, n_draws=10, seed=2)
        assert not np.array_equal(a.draws, b.draws)

    def test_requested_row_count(self):
        draws = sample_linear(np.eye(2), np.zeros(2), np.eye(2), 2500, seed=0)
        assert draws.shape == (2500, 2)
        with pytest.raises(SpecError):
            sample_linear(np.eye(2), np.zeros(2), np.eye(2), 0, seed=0)

    def test_non_finite_draws_rejected(self):
        with pytest.raises(NumericalError):
            PosteriorCurveSample(np.array([[np.nan]]), np.array([1.0]), 0)


class TestBands:
    def test_normal_multiplier(self):
        assert normal_multiplier(0.95) == pytest.approx(1.959964, abs=1e-6)

    def test_pointwise_band(self, wiggly_fit):
        band = pointwise_band(wiggly_fit, 0.95, GRID)
        pred = predict(wiggly_fit, GRID)
        np.testing.assert_allclose(band.upper, pred.estimate + 1.959963984540054 * pred.se, atol=1e-12)
        assert band.kind == "pointwise"

    def test_zero_se_zero_width(self):
        sample = PosteriorCurveSample(np.ones((3, 2)), np.array([0.0, 1.0]), 0, np.ones(2), np.zeros(2))
        band = pointwise_band(sample)
        assert np.array_equal(band.lower, band.upper)

    def test_single_point_reduces_to_pointwise(self, wiggly_fit):
        sample = sample_posterior_curves(wiggly_fit, {"x": np.array([0.4])}, n_draws=50_000, seed=5)
        assert simultaneous_multiplier(sample) == pytest.approx(1.96, abs=0.02)

    def test_simultaneous_wider_than_pointwise(self, wiggly_fit):
        for seed, n in ((0, 200), (1, 2000), (2, 10_000)):
            sim_band = simultaneous_band(wiggly_fit, GRID, n_draws=n, seed=seed)
            pw = pointwise_band(wiggly_fit, 0.95, GRID)
            assert sim_band.multiplier >= pw.multiplier
            assert np.all(sim_band.lower <= pw.lower) and np.all(sim_band.upper >= pw.upper)

    @pytest.mark.parametrize("kind", ["pointwise", "simultaneous"])
    def test_levels_nest(self, wiggly_fit, kind):
        sample = sample_posterior_curves(wiggly_fit, GRID, n_draws=4000, seed=6)
        make = (lambda lv: pointwise_band(sample, lv)) if kind == "pointwise" else \
            (lambda lv: simultaneous_band(wiggly_fit, level=lv, sample=sample))
        narrow, wide = make(0.8), make(0.95)
        assert np.all(wide.lower <= narrow.lower) and np.all(wide.upper >= narrow.upper)

    def test_interval_validation(self):
        with pytest.raises(SpecError):
            IntervalEstimate(0.0, 1.0, 1.5, "pointwise")
        with pytest.raises(NumericalError):
            IntervalEstimate(2.0, 1.0, 0.95, "hdi")
        with pytest.raises(SpecError):
            normal_multiplier(0.0)


class TestHdi:
    def test_deterministic_curve(self):
        grid = np.round(np.arange(4.0, 94.0 + 1e-9, 0.1), 10)
        draws = np.tile(-(grid - 50.0) ** 2, (200, 1))
        ages, interval = age_at_max_distribution(PosteriorCurveSample(draws, grid, 0))
        assert np.all(ages == 50.0)
        assert interval.lower == interval.upper == 50.0

    def test_ties_go_to_youngest_age(self):
        grid = np.array([30.0, 10.0, 20.0])
        ages, _ = age_at_max_distribution(PosteriorCurveSample(np.ones((2, 3)), grid, 0))
        assert np.all(ages == 10.0)

    def test_symmetric_sample_matches_central_interval(self):
        x = np.random.default_rng(0).normal(size=200_000)
        interval = hdi(x, 0.9)
        lo, hi = np.quantile(x, [0.05, 0.95])
        assert interval.lower == pytest.approx(lo, abs=0.02)
        assert interval.upper == pytest.approx(hi, abs=0.02)

    def test_skewed_sample_shorter_than_central(self):
        x = np.random.default_rng(1).exponential(size=50_000)
        interval = hdi(x, 0.9)
        lo, hi = np.quantile(x, [0.05, 0.95])
        assert interval.upper - interval.lower < hi - lo
        assert interval.lower == pytest.approx(0.0, abs=1e-3)

    @pytest.mark.parametrize("n", [1, 7, 100, 999])
    def test_mass_bounds(self, n):
        x = np.random.default_rng(n).gamma(2.0, size=n)
        for level in (0.5, 0.9, 0.95):
            interval = hdi(x, level)
            mass = np.mean((x >= interval.lower) & (x <= interval.upper))
            assert level <= mass <= level + 2 / n

    def test_empty_sample(self):
        with pytest.raises(SpecError):
            hdi([], 0.95)

    def test_quadratic_peak_recovered(self):
        grid = {"age": np.arange(4.0, 90.0, 0.1)}
        for seed in range(5):
            rng = np.random.default_rng(seed)
            age = rng.uniform(4, 90, 500)
            y = -((age - 40.0) / 20.0) ** 2 + rng.normal(0, 0.3, 500)
            fitted = fit_model(ModelSpec((Smooth("age", 10),)), cross_sectional(y, age=age))
            ages, _ = age_at_max_distribution(sample_posterior_curves(fitted, grid, n_draws=2000, seed=seed))
            assert abs(ages.mean() - 40.0) < 2.0


class TestWaldTest:
    @staticmethod
    def null_and_signal(rng, n=200, snr=0.0):
        x, z = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        g = np.sin(2 * np.pi * z)
        y = np.cos(2 * np.pi * x) + snr * 0.3 * g / g.std() + rng.normal(0, 0.3, n)
        return fit_smooths(y, k=8, x=x, z=z)

    def test_null_rejection_rate(self):
        rng = np.random.default_rng(10)
        p = [wald_term_test(self.null_and_signal(rng), "s(z)").p_value for _ in range(200)]
        assert 0.02 <= np.mean(np.asarray(p) < 0.05) <= 0.09

    def test_power(self):
        rng = np.random.default_rng(11)
        p = [wald_term_test(self.null_and_signal(rng, snr=10.0), "s(z)").p_value for _ in range(100)]
        assert np.mean(np.asarray(p) < 0.05) >= 0.95

    def test_zero_coefficients(self, wiggly_fit):
        term = wiggly_fit.term("s(x)")
        beta = wiggly_fit.beta_hat.copy()
        beta[term.start:term.stop] = 0.0
        result = wald_term_test(replace(wiggly_fit, beta_hat=beta), "s(x)")
        assert result.statistic == 0.0 and result.p_value == 1.0

    def test_reference_df_is_rounded_edf(self, wiggly_fit):
        result = wald_term_test(wiggly_fit, "s(x)")
        assert result.ref_df == round(wiggly_fit.edf_per_term["s(x)"])


class TestBasisDimensionCheck:
    def test_white_noise_p_uniform(self):
        rng = np.random.default_rng(12)
        p = []
        for seed in range(200):
            x = rng.uniform(0, 1, 200)
            fitted = fit_smooths(rng.normal(size=200), k=6, x=x)
            p.append(basis_dimension_check(fitted, "s(x)", seed=seed).p_value)
        assert stats.kstest(p, "uniform").pvalue > 0.01

    def test_too_small_basis_detected(self):
        rng = np.random.default_rng(13)
        p = []
        for seed in range(50):
            x = rng.uniform(0, 1, 300)
            fitted = fit_smooths(np.sin(10 * x) + rng.normal(0, 0.3, 300), k=4, x=x)
            p.append(basis_dimension_check(fitted, "s(x)", seed=seed).p_value)
        assert np.mean(np.asarray(p) < 0.05) >= 0.9

    def test_output_fields(self, wiggly_fit):
        check = basis_dimension_check(wiggly_fit, "s(x)")
        assert check.k_prime == 9
        assert 0 < check.edf <= 9 and check.k_index > 0 and 0 <= check.p_value <= 1

    def test_non_smooth_term_rejected(self, wiggly_fit):
        with pytest.raises(SpecError):
            basis_dimension_check(wiggly_fit, "(Intercept)")

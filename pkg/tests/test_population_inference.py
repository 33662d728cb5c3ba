import math

import numpy as np
import pytest

from cellvar import (
    LINEXP,
    McmcConfig,
    PopulationPrior,
    log_population_posterior,
    parameter_correlations,
    sample_population_posterior,
    ssd,
)
from cellvar import CapacityTrace, Normalization, least_squares_fit
from cellvar.population_inference import sigma_upper_bounds

FAST = McmcConfig(n_steps=6000, burn_in=2000, thin=4, seed=0)


def normal_logpdf(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


def oracle_grid_density(mu_grid, sigma_grid, mu_k, var_k, prior):
    """Brute-force oracle: numerically marginalize each cell's latent
    parameter against the population Gaussian on a fine grid, then apply
    the same prior.  Returns the normalized density over the grid."""
    theta = np.linspace(-60.0, 60.0, 24_001)
    dt = theta[1] - theta[0]
    log_density = np.empty((mu_grid.size, sigma_grid.size))
    for i, mu_g in enumerate(mu_grid):
        for j, sigma_g in enumerate(sigma_grid):
            total = 0.0
            for mu, var in zip(mu_k, var_k):
                integrand = np.exp(
                    normal_logpdf(mu, theta, var)
                    + normal_logpdf(theta, mu_g, sigma_g**2)
                )
                total += math.log(float(np.trapezoid(integrand, dx=dt)))
            total += float(normal_logpdf(mu_g, prior.mu_mean, prior.mu_var))
            total -= float(np.log(prior.sigma_upper[0]))
            log_density[i, j] = total
    density = np.exp(log_density - log_density.max())
    return density / density.sum()


class TestLogPosterior:
    def test_single_cell_zero_sigma_reduces_to_cell_density(self):
        prior = PopulationPrior(sigma_upper=np.array([5.0]))
        mu_k = np.array([[1.2]])
        var_k = np.array([[0.3]])
        value = log_population_posterior([0.9], [0.0], mu_k, var_k, prior)
        expected = (
            float(normal_logpdf(1.2, 0.9, 0.3))
            + float(normal_logpdf(0.9, 0.0, 1e4))
            - np.log(5.0)
        )
        assert value == pytest.approx(expected, rel=1e-12)

    def test_mean_maximized_at_average(self):
        # with equal per-cell variances the quadratic in mu_g is minimized
        # at the (slightly prior-shrunk) average; the wide prior moves it
        # by ~1e-4 relative, far below the grid resolution used here
        prior = PopulationPrior(sigma_upper=np.array([10.0]))
        mu_k = np.array([[1.0], [2.0], [3.0]])
        var_k = np.full((3, 1), 1e-12)
        grid = np.linspace(1.5, 2.5, 2001)
        values = [
            log_population_posterior([m], [0.5], mu_k, var_k, prior) for m in grid
        ]
        assert grid[int(np.argmax(values))] == pytest.approx(2.0, abs=1e-3)

    def test_outside_prior_support(self):
        prior = PopulationPrior(sigma_upper=np.array([1.0]))
        mu_k = np.array([[0.0], [0.1], [0.2]])
        var_k = np.full((3, 1), 0.01)
        assert log_population_posterior([0.1], [1.5], mu_k, var_k, prior) == -np.inf
        assert log_population_posterior([0.1], [-0.1], mu_k, var_k, prior) == -np.inf

    def test_matches_grid_marginalization_oracle(self):
        mu_k = np.array([-1.0, 0.4, 2.0])
        var_k = np.array([0.5, 0.2, 1.0])
        prior = PopulationPrior(sigma_upper=np.array([10.0]))
        mu_grid = np.linspace(-4.0, 4.0, 50)
        sigma_grid = np.linspace(0.05, 5.0, 50)
        oracle = oracle_grid_density(mu_grid, sigma_grid, mu_k, var_k, prior)
        ours = np.empty_like(oracle)
        for i, mu_g in enumerate(mu_grid):
            for j, sigma_g in enumerate(sigma_grid):
                ours[i, j] = log_population_posterior(
                    [mu_g], [sigma_g], mu_k[:, None], var_k[:, None], prior
                )
        ours = np.exp(ours - ours.max())
        ours /= ours.sum()
        assert np.max(np.abs(ours - oracle)) < 1e-8

    def test_variance_additivity(self):
        prior = PopulationPrior(sigma_upper=np.array([50.0]))
        mu_k = np.array([[0.3], [1.1], [-0.7], [0.9]])
        var_k = np.full((4, 1), 0.4)
        sigma_g = 1.5
        shift = 0.8
        a = log_population_posterior([0.2], [sigma_g], mu_k, var_k, prior)
        b = log_population_posterior(
            [0.2],
            [np.sqrt(sigma_g**2 - shift)],
            mu_k,
            var_k + shift,
            prior,
        )
        assert a == pytest.approx(b, rel=1e-12)

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(3)
        mu_k = rng.normal(0, 1, (12, 2))
        var_k = rng.uniform(0.1, 0.5, (12, 2))
        prior = PopulationPrior(sigma_upper=np.array([9.0, 9.0]))
        args = ([0.1, -0.2], [0.7, 0.3])
        base = log_population_posterior(*args, mu_k, var_k, prior)
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(12)
            assert log_population_posterior(*args, mu_k[perm], var_k[perm], prior) == base


class TestSampler:
    def test_recovery_from_known_population(self):
        rng = np.random.default_rng(21)
        K, mu_star, sigma_star, sigma_cell = 40, -0.01, 0.002, 0.0005
        mu_k = rng.normal(mu_star, np.sqrt(sigma_star**2 + sigma_cell**2), (K, 1))
        var_k = np.full((K, 1), sigma_cell**2)
        prior = PopulationPrior.from_summaries(mu_k)
        post = sample_population_posterior(mu_k, var_k, prior, FAST)
        assert abs(post.mu_g[0] - mu_star) < 3 * post.mu_g_sd()[0]
        assert 0.5 * sigma_star < post.sigma_g[0] < 2.0 * sigma_star

    def test_identical_summaries_concentrate_near_zero(self):
        # no between-cell spread: the data-scaled prior collapses and the
        # sigma estimate lands far below the per-cell sd of 0.2
        mu_k = np.full((3, 1), 1.0)
        var_k = np.full((3, 1), 0.04)
        prior = PopulationPrior.from_summaries(mu_k)
        post = sample_population_posterior(mu_k, var_k, prior, FAST)
        assert post.sigma_g[0] < 0.2

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        mu_k = rng.normal(0, 1, (8, 2))
        var_k = np.full((8, 2), 0.1)
        prior = PopulationPrior.from_summaries(mu_k)
        a = sample_population_posterior(mu_k, var_k, prior, FAST)
        b = sample_population_posterior(mu_k, var_k, prior, FAST)
        assert np.array_equal(a.samples, b.samples)
        assert a.to_json() == b.to_json()

    def test_needs_three_cells(self):
        with pytest.raises(ValueError, match="3"):
            sample_population_posterior(
                np.array([[0.0], [1.0]]), np.full((2, 1), 0.1),
                PopulationPrior(sigma_upper=np.array([1.0])), FAST,
            )

    def test_sigma_draws_never_negative(self):
        rng = np.random.default_rng(5)
        mu_k = rng.normal(0, 0.01, (5, 1))  # tight population: chain visits 0
        var_k = np.full((5, 1), 0.2)
        prior = PopulationPrior.from_summaries(mu_k)
        post = sample_population_posterior(mu_k, var_k, prior, FAST)
        assert np.all(post.samples[:, 1] >= 0.0)

    def test_agrees_with_ssd_at_scale(self):
        rng = np.random.default_rng(6)
        K, sigma_star = 200, 1.3
        mu_k = rng.normal(5.0, sigma_star, (K, 1))
        var_k = np.full((K, 1), 1e-6)  # per-cell noise far below the spread
        prior = PopulationPrior.from_summaries(mu_k)
        post = sample_population_posterior(mu_k, var_k, prior, FAST)
        s_g = ssd(mu_k).s_g[0]
        assert abs(post.sigma_g[0] - s_g) / s_g < 0.1


class TestSsd:
    def test_hand_arithmetic(self):
        out = ssd([1.0, 2.0, 3.0])
        assert out.m_g[0] == 2.0
        assert out.s_g[0] == 1.0

    def test_zero_spread(self):
        out = ssd([4.0, 4.0, 4.0, 4.0])
        assert out.s_g[0] == 0.0

    def test_needs_two(self):
        with pytest.raises(ValueError):
            ssd([1.0])

    def test_simulation_bounds(self):
        draws = np.random.default_rng(7).normal(5.0, 2.0, 1000)
        out = ssd(draws)
        assert abs(out.m_g[0] - 5.0) < 0.2
        assert abs(out.s_g[0] - 2.0) < 0.15


class TestCorrelations:
    def test_perfect_linear_dependence(self):
        rng = np.random.default_rng(8)
        a = rng.normal(0, 1, 30)
        mus = np.column_stack([a, 3.0 * a])
        corr = parameter_correlations(mus)
        assert corr[0, 1] == pytest.approx(1.0)
        assert corr[0, 0] == corr[1, 1] == 1.0

    def test_independent_dimensions_small(self):
        rng = np.random.default_rng(9)
        corr = parameter_correlations(rng.normal(0, 1, (200, 2)))
        assert abs(corr[0, 1]) < 0.2

    def test_zero_variance_is_nan_sentinel(self):
        mus = np.column_stack([np.ones(10), np.arange(10.0)])
        corr = parameter_correlations(mus)
        assert np.isnan(corr[0, 0]) and np.isnan(corr[0, 1]) and np.isnan(corr[1, 0])
        assert corr[1, 1] == 1.0

    def test_shape_requirements(self):
        with pytest.raises(ValueError):
            parameter_correlations(np.ones((5, 1)))
        with pytest.raises(ValueError):
            parameter_correlations(np.ones((2, 2)))

    def test_recovers_generated_correlation(self):
        # correlated knee population -> per-cell point fits -> correlation
        from cellvar import PopulationTruth, generate

        corr = np.array([[1.0, 0.9, 0.0], [0.9, 1.0, 0.0], [0.0, 0.0, 1.0]])
        truth = PopulationTruth(
            model=LINEXP,
            mu_star=np.array([-0.005, 700.0, 100.0]),
            sigma_star=np.array([0.001, 40.0, 8.0]),
            n_cells=60,
            noise=0.05,
            correlation=corr,
            seed=10,
        )
        dataset, _ = generate(truth)
        fits = np.array(
            [least_squares_fit(LINEXP, trace).theta for trace in dataset.traces]
        )
        estimated = parameter_correlations(fits)
        assert estimated[0, 1] == pytest.approx(0.9, abs=0.15)


class TestPrior:
    def test_upper_bound_rule(self):
        mus = np.array([[0.0], [1.0], [2.0]])
        prior = PopulationPrior.from_summaries(mus)
        assert prior.sigma_upper[0] == pytest.approx(10.0 * 1.0)

    def test_floor_for_degenerate_summaries(self):
        prior = PopulationPrior.from_summaries(np.full((4, 1), 2.0))
        assert prior.sigma_upper[0] == 1e-6

    def test_vectorized_bounds_match(self):
        rng = np.random.default_rng(11)
        mus = rng.normal(0, 1, (6, 10, 2))
        batched = sigma_upper_bounds(mus, axis=1)
        direct = np.array(
            [PopulationPrior.from_summaries(m).sigma_upper for m in mus]
        )
        assert np.allclose(batched, direct)

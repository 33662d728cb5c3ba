import numpy as np
import pytest

from cellvar import McmcConfig, derive_seed, effective_sample_size
from cellvar.mcmc import adapt_factor, ess_batched, run_chain


class TestDeriveSeed:
    def test_deterministic(self):
        a = derive_seed("x", 1, "cell_3").entropy
        b = derive_seed("x", 1, "cell_3").entropy
        assert a == b

    def test_order_and_type_sensitive(self):
        keys = {
            derive_seed("x", 1).entropy,
            derive_seed(1, "x").entropy,
            derive_seed("x", "1").entropy,
            derive_seed("x1").entropy,
        }
        assert len(keys) == 4

    def test_rejects_floats(self):
        with pytest.raises(TypeError):
            derive_seed(1.5)


class TestConfig:
    def test_defaults(self):
        cfg = McmcConfig()
        assert cfg.n_retained == 1500

    def test_validation(self):
        with pytest.raises(ValueError):
            McmcConfig(n_steps=100, burn_in=100)
        with pytest.raises(ValueError):
            McmcConfig(thin=0)


class TestAdaptation:
    def test_band_behaviour(self):
        window = 50
        factors = adapt_factor(np.array([0, 5, 15, 25]), window)
        assert factors[0] == 0.5          # nothing accepted: halve
        assert factors[1] == 0.8          # 10%: shrink
        assert factors[2] == 1.0          # 30%: in band
        assert factors[3] == 1.25         # 50%: grow


class TestRunChain:
    def _gaussian_chain(self, seed=0, n_steps=4000, burn_in=1000):
        def log_prob(x):
            return -0.5 * float(x @ x)

        cfg = McmcConfig(n_steps=n_steps, burn_in=burn_in, thin=3, seed=0)
        rng = np.random.default_rng(derive_seed("chain-test", seed))
        return run_chain(log_prob, np.zeros(2), np.ones(2), cfg, rng)

    def test_deterministic(self):
        a = self._gaussian_chain()
        b = self._gaussian_chain()
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.scales, b.scales)

    def test_targets_standard_normal(self):
        chain = self._gaussian_chain(n_steps=20_000, burn_in=4000)
        assert np.all(np.abs(chain.samples.mean(axis=0)) < 0.15)
        assert np.all(np.abs(chain.samples.std(axis=0) - 1.0) < 0.15)
        assert np.all((chain.acceptance > 0.05) & (chain.acceptance < 0.95))

    def test_invalid_start_rejected(self):
        cfg = McmcConfig(n_steps=10, burn_in=1)
        with pytest.raises(ValueError, match="start"):
            run_chain(lambda x: -np.inf, np.zeros(1), np.ones(1), cfg,
                      np.random.default_rng(0))


class TestEss:
    def test_iid_near_full(self):
        draws = np.random.default_rng(0).standard_normal(4000)
        assert effective_sample_size(draws) > 2000

    def test_constant_series_is_zero(self):
        assert effective_sample_size(np.ones(500)) == 0.0

    def test_correlated_much_smaller(self):
        rng = np.random.default_rng(1)
        x = np.empty(4000)
        x[0] = 0.0
        for i in range(1, x.size):     # AR(1), phi = 0.95
            x[i] = 0.95 * x[i - 1] + rng.standard_normal()
        ess = effective_sample_size(x)
        assert ess < 400

    def test_batched_shape(self):
        draws = np.random.default_rng(2).standard_normal((3, 800, 2))
        out = ess_batched(draws)
        assert out.shape == (3, 2)
        assert np.all(out > 100)

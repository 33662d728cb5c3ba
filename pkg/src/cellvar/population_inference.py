"""Second-level inference: the population behind the per-cell parameters.

With each cell's first-level posterior summarized as a Gaussian
``N(mu_k, var_k)`` and the population itself Gaussian per dimension, the
per-cell parameters integrate out analytically and the population
posterior factorizes over dimensions:

    log P(mu_g, sigma_g | data) = sum_k sum_d [ -log N(mu_kd; mu_gd,
        var_kd + sigma_gd^2) ] + log prior(mu_g, sigma_g)

Priors: wide Gaussian (mean 0, variance 1e4) on each population mean, and
uniform on each population standard deviation over [0, U] with U scaled to
ten times the spread of the cell-level means.  Sampling reuses the
component-wise random-walk kernel; sigma proposals reflect at zero.

The chain is batched: many independent replications (one per bootstrap
repeat) advance in lock step through vectorized proposals, which is what
makes thousand-repeat studies tractable.  Per-dimension sufficient
statistics (weighted moments of the summaries) are cached and refreshed
only when the matching sigma component moves, so mean updates cost O(1)
in the number of cells.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .mcmc import McmcConfig, adapt_factor, derive_seed, ess_batched

MU_PRIOR_MEAN = 0.0
MU_PRIOR_VAR = 1e4
SIGMA_UPPER_MULTIPLIER = 10.0
SIGMA_UPPER_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)
RECORD_SCHEMA = 1


@dataclass(frozen=True)
class PopulationPrior:
    """Prior over (mu_g, sigma_g); ``sigma_upper`` is per dimension."""

    sigma_upper: np.ndarray
    mu_mean: float = MU_PRIOR_MEAN
    mu_var: float = MU_PRIOR_VAR

    def __post_init__(self):
        upper = np.asarray(self.sigma_upper, dtype=float)
        if upper.ndim != 1 or not np.all(np.isfinite(upper)) or np.any(upper <= 0):
            raise ValueError(f"sigma_upper must be finite and positive, got {upper}")
        object.__setattr__(self, "sigma_upper", upper)

    @classmethod
    def from_summaries(cls, mus: np.ndarray) -> "PopulationPrior":
        """Data-scaled support: U = 10 x spread of the cell-level means."""
        mus = np.atleast_2d(np.asarray(mus, dtype=float))
        upper = SIGMA_UPPER_MULTIPLIER * mus.std(axis=0, ddof=1)
        return cls(np.maximum(upper, SIGMA_UPPER_FLOOR))


def sigma_upper_bounds(mus: np.ndarray, axis: int = 0) -> np.ndarray:
    """The uniform prior's upper bound, vectorized over leading axes."""
    upper = SIGMA_UPPER_MULTIPLIER * np.asarray(mus, dtype=float).std(axis=axis, ddof=1)
    return np.maximum(upper, SIGMA_UPPER_FLOOR)


def log_population_posterior(
    mu_g, sigma_g, mus, variances, prior: PopulationPrior
) -> float:
    """Log posterior density of (mu_g, sigma_g) given cell summaries.

    Summation uses exact (correctly rounded) accumulation, so the value is
    invariant under reordering of the cells.
    """
    mu_g = np.asarray(mu_g, dtype=float)
    sigma_g = np.asarray(sigma_g, dtype=float)
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    variances = np.atleast_2d(np.asarray(variances, dtype=float))
    if mus.shape != variances.shape or mus.shape[1] != mu_g.size:
        raise ValueError("summary and parameter shapes disagree")
    if np.any(sigma_g < 0) or np.any(sigma_g > prior.sigma_upper):
        return -np.inf
    total = variances + sigma_g**2
    terms = -0.5 * (np.log(2.0 * np.pi * total) + (mus - mu_g) ** 2 / total)
    log_prior_mu = -0.5 * (
        np.log(2.0 * np.pi * prior.mu_var) + (mu_g - prior.mu_mean) ** 2 / prior.mu_var
    )
    return (
        math.fsum(terms.ravel().tolist())
        + math.fsum(log_prior_mu.tolist())
        - math.fsum(np.log(prior.sigma_upper).tolist())
    )


@dataclass(frozen=True)
class BatchChain:
    """Batched draws of (mu_g, sigma_g): R replications in lock step."""

    samples: np.ndarray      # (R, n_retained, 2p) -- mu dims then sigma dims
    acceptance: np.ndarray   # (R, 2p), post burn-in
    ess: np.ndarray          # (R, 2p)


def population_chain(
    mus: np.ndarray,
    variances: np.ndarray,
    sigma_upper: np.ndarray,
    cfg: McmcConfig,
    seed: np.random.SeedSequence,
    mu_mean: float = MU_PRIOR_MEAN,
    mu_var: float = MU_PRIOR_VAR,
) -> BatchChain:
    """Run R independent population chains in one vectorized sweep.

    ``mus``/``variances`` are (R, N, p), ``sigma_upper`` is (R, p).  Each
    replication starts at the mean and spread of its own summaries.
    """
    mus = np.asarray(mus, dtype=float)
    variances = np.asarray(variances, dtype=float)
    R, N, p = mus.shape
    uppers = np.broadcast_to(np.asarray(sigma_upper, dtype=float), (R, p))
    rng = np.random.default_rng(seed)

    mu = mus.mean(axis=1)
    sigma = np.minimum(mus.std(axis=1, ddof=1), uppers)
    half_inv_prior = 0.5 / mu_var

    # per-dimension sufficient statistics under the current sigma values
    w0 = np.empty((R, p))
    w1 = np.empty((R, p))
    w2 = np.empty((R, p))
    log_tot = np.empty((R, p))

    def refresh(d: int, sigma_d: np.ndarray):
        total = variances[:, :, d] + sigma_d[:, None] ** 2
        inv = 1.0 / total
        w0[:, d] = inv.sum(axis=1)
        w1[:, d] = (mus[:, :, d] * inv).sum(axis=1)
        w2[:, d] = (mus[:, :, d] ** 2 * inv).sum(axis=1)
        log_tot[:, d] = np.log(total).sum(axis=1)

    def term(m: np.ndarray, w0d, w1d, w2d, log_totd):
        quad = w2d - 2.0 * m * w1d + m**2 * w0d
        centered = m - mu_mean
        return (
            -0.5 * (N * LOG_2PI + log_totd)
            - 0.5 * quad
            - half_inv_prior * centered**2
        )

    for d in range(p):
        refresh(d, sigma[:, d])
    log_post = np.empty((R, p))
    for d in range(p):
        log_post[:, d] = term(mu[:, d], w0[:, d], w1[:, d], w2[:, d], log_tot[:, d])

    scales = np.tile(np.maximum(np.maximum(0.5 * sigma, 0.05 * uppers), 1e-10), (1, 2))
    samples = np.empty((R, cfg.n_retained, 2 * p))
    kept = 0
    window_acc = np.zeros((R, 2 * p))
    total_acc = np.zeros((R, 2 * p))

    for step in range(cfg.n_steps):
        for d in range(p):
            proposal = mu[:, d] + scales[:, d] * rng.standard_normal(R)
            lp_new = term(proposal, w0[:, d], w1[:, d], w2[:, d], log_tot[:, d])
            accept = np.log(rng.random(R)) < lp_new - log_post[:, d]
            mu[accept, d] = proposal[accept]
            log_post[accept, d] = lp_new[accept]
            window_acc[accept, d] += 1
            if step >= cfg.burn_in:
                total_acc[accept, d] += 1
        for d in range(p):
            col = p + d
            proposal = np.abs(sigma[:, d] + scales[:, col] * rng.standard_normal(R))
            total = variances[:, :, d] + proposal[:, None] ** 2
            inv = 1.0 / total
            w0_new = inv.sum(axis=1)
            w1_new = (mus[:, :, d] * inv).sum(axis=1)
            w2_new = (mus[:, :, d] ** 2 * inv).sum(axis=1)
            log_tot_new = np.log(total).sum(axis=1)
            lp_new = term(mu[:, d], w0_new, w1_new, w2_new, log_tot_new)
            lp_new = np.where(proposal <= uppers[:, d], lp_new, -np.inf)
            accept = np.log(rng.random(R)) < lp_new - log_post[:, d]
            sigma[accept, d] = proposal[accept]
            w0[accept, d] = w0_new[accept]
            w1[accept, d] = w1_new[accept]
            w2[accept, d] = w2_new[accept]
            log_tot[accept, d] = log_tot_new[accept]
            log_post[accept, d] = lp_new[accept]
            window_acc[accept, col] += 1
            if step >= cfg.burn_in:
                total_acc[accept, col] += 1
        if step < cfg.burn_in and (step + 1) % cfg.adapt_window == 0:
            scales *= adapt_factor(window_acc, cfg.adapt_window)
            window_acc[:, :] = 0.0
        if step >= cfg.burn_in and (step - cfg.burn_in) % cfg.thin == 0:
            samples[:, kept, :p] = mu
            samples[:, kept, p:] = sigma
            kept += 1

    acceptance = total_acc / (cfg.n_steps - cfg.burn_in)
    return BatchChain(samples, acceptance, ess_batched(samples))


@dataclass(frozen=True)
class PopulationPosterior:
    """Posterior-mean estimates and retained draws of (mu_g, sigma_g)."""

    mu_g: np.ndarray
    sigma_g: np.ndarray          # posterior mean of the sigma draws
    samples: np.ndarray          # (n_retained, 2p)
    acceptance_rate: float
    ess: np.ndarray
    converged: bool

    @property
    def param_count(self) -> int:
        return self.mu_g.size

    def mu_g_sd(self) -> np.ndarray:
        return self.samples[:, : self.param_count].std(axis=0, ddof=1)

    def sigma_g_sd(self) -> np.ndarray:
        return self.samples[:, self.param_count :].std(axis=0, ddof=1)

    def to_dict(self) -> dict:
        return {
            "schema": RECORD_SCHEMA,
            "mu_g": self.mu_g.tolist(),
            "sigma_g": self.sigma_g.tolist(),
            "samples": self.samples.tolist(),
            "diagnostics": {
                "acceptance_rate": self.acceptance_rate,
                "ess": self.ess.tolist(),
                "converged": self.converged,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def sample_population_posterior(
    mus: np.ndarray,
    variances: np.ndarray,
    prior: PopulationPrior,
    cfg: McmcConfig,
) -> PopulationPosterior:
    """Sample the population posterior for one set of cell summaries."""
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    variances = np.atleast_2d(np.asarray(variances, dtype=float))
    if mus.shape[0] < 3:
        raise ValueError(f"need at least 3 cells, got {mus.shape[0]}")
    chain = population_chain(
        mus[None],
        variances[None],
        prior.sigma_upper[None],
        cfg,
        derive_seed("population-chain", cfg.seed),
        mu_mean=prior.mu_mean,
        mu_var=prior.mu_var,
    )
    samples = chain.samples[0]
    p = mus.shape[1]
    ess = chain.ess[0]
    return PopulationPosterior(
        mu_g=samples[:, :p].mean(axis=0),
        sigma_g=samples[:, p:].mean(axis=0),
        samples=samples,
        acceptance_rate=float(chain.acceptance[0].mean()),
        ess=ess,
        converged=bool(np.all(ess >= 100)),
    )


@dataclass(frozen=True)
class SsdSummary:
    """Plain mean and spread of per-cell point estimates."""

    m_g: np.ndarray
    s_g: np.ndarray

    def to_dict(self) -> dict:
        return {
            "schema": RECORD_SCHEMA,
            "m_g": self.m_g.tolist(),
            "s_g": self.s_g.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def ssd(theta_estimates) -> SsdSummary:
    """Sub-sample distribution baseline: mean and (K-1)-denominator spread."""
    thetas = np.asarray(theta_estimates, dtype=float)
    if thetas.ndim == 1:
        thetas = thetas[:, None]
    if thetas.shape[0] < 2:
        raise ValueError(f"need at least 2 estimates, got {thetas.shape[0]}")
    return SsdSummary(thetas.mean(axis=0), thetas.std(axis=0, ddof=1))


def parameter_correlations(mus: np.ndarray) -> np.ndarray:
    """Pearson product-moment correlations of cell-level means across cells.

    Dimensions with zero spread get NaN rows/columns rather than a division
    blow-up.
    """
    mus = np.asarray(mus, dtype=float)
    if mus.ndim != 2 or mus.shape[1] < 2:
        raise ValueError("need a (K, p) array with p >= 2")
    K = mus.shape[0]
    if K < 3:
        raise ValueError(f"need at least 3 cells, got {K}")
    p = mus.shape[1]
    centered = mus - mus.mean(axis=0)
    sd = mus.std(axis=0, ddof=1)
    corr = np.full((p, p), np.nan)
    valid = sd > 0
    if valid.any():
        sub = centered[:, valid]
        cov = sub.T @ sub / (K - 1)
        block = cov / np.outer(sd[valid], sd[valid])
        np.clip(block, -1.0, 1.0, out=block)
        np.fill_diagonal(block, 1.0)
        corr[np.ix_(valid, valid)] = block
    return corr

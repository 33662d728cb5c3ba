"""First-level inference: per-cell parameter posteriors.

Measurement noise is additive Gaussian with an unknown scale carrying a
scale-invariant 1/sigma^2 prior, which integrates out analytically: the
marginal log-likelihood of a parameter vector depends on the data only
through the residual sum of squares,

    log P(B | theta) = -(n/2) * log SSR(theta) + const.

The posterior over theta (flat prior) is explored with the shared
random-walk Metropolis sampler and summarized as an independent Gaussian
per parameter.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import CapacityTrace, Dataset, dataset_hash
from .mcmc import ChainResult, McmcConfig, derive_seed, run_chain
from .models import EXP_GUARD, FitResult, ModelKind, ModelSpec, least_squares_fit, residuals

SSR_FLOOR = 1e-300       # keeps the likelihood finite on noiseless data
VARIANCE_FLOOR = 1e-12
MIN_SUMMARY_DRAWS = 100
CACHE_SCHEMA = 1

CACHE_ENV = "CELLVAR_CACHE"


def log_marginal_likelihood(spec: ModelSpec, theta, trace: CapacityTrace) -> float:
    """Noise-marginal log-likelihood, up to a theta-independent constant.

    Invalid parameters (non-positive ``tau``) and overflowing model values
    return ``-inf`` so the sampler rejects them.
    """
    n = trace.n_points
    if n < spec.param_count + 2:
        raise ValueError(
            f"{trace.cell_id}: {n} points cannot constrain "
            f"{spec.param_count} parameters plus noise"
        )
    theta = np.asarray(theta, dtype=float)
    if spec.kind is ModelKind.LINEXP and theta[2] <= 0:
        return -np.inf
    r = residuals(spec, theta, trace)
    if not np.all(np.isfinite(r)):
        return -np.inf
    ssr = max(float(r @ r), SSR_FLOOR)
    return -0.5 * n * np.log(ssr)


def _make_log_marginal(spec: ModelSpec, trace: CapacityTrace):
    """Closure over the trace arrays, avoiding per-step validation cost."""
    t = trace.times
    n = t.size
    half_n = 0.5 * n

    if spec.kind is ModelKind.LINEAR1:
        y = trace.capacities - 100.0

        def log_prob(theta):
            r = y - theta[0] * t
            return -half_n * np.log(max(r @ r, SSR_FLOOR))

    elif spec.kind is ModelKind.LINEAR2:
        y = trace.capacities

        def log_prob(theta):
            r = y - theta[0] - theta[1] * t
            return -half_n * np.log(max(r @ r, SSR_FLOOR))

    else:
        y = trace.capacities - 100.0

        def log_prob(theta):
            c3, t_f, tau = theta
            if tau <= 0:
                return -np.inf
            z = (t - t_f) / tau
            if z[-1] > EXP_GUARD:
                return -np.inf
            r = y - c3 * t + np.exp(z)
            return -half_n * np.log(max(r @ r, SSR_FLOOR))

    return log_prob


@dataclass(frozen=True)
class CellPosterior:
    """Gaussian summary and retained draws of one cell's posterior."""

    cell_id: str
    mu: np.ndarray               # posterior mean per parameter
    var: np.ndarray              # posterior marginal variance per parameter
    samples: np.ndarray          # retained thinned draws, (n_retained, p)
    acceptance_rate: float
    ess: np.ndarray
    converged: bool              # every dimension reached ESS >= 100
    ls_converged: bool           # the initializing least-squares fit converged

    def to_dict(self) -> dict:
        return {
            "schema": CACHE_SCHEMA,
            "cell_id": self.cell_id,
            "mu": self.mu.tolist(),
            "var": self.var.tolist(),
            "samples": self.samples.tolist(),
            "diagnostics": {
                "acceptance_rate": self.acceptance_rate,
                "ess": self.ess.tolist(),
                "converged": self.converged,
                "ls_converged": self.ls_converged,
            },
        }

    @classmethod
    def from_dict(cls, record: dict) -> "CellPosterior":
        diag = record["diagnostics"]
        return cls(
            cell_id=record["cell_id"],
            mu=np.array(record["mu"], dtype=float),
            var=np.array(record["var"], dtype=float),
            samples=np.array(record["samples"], dtype=float),
            acceptance_rate=float(diag["acceptance_rate"]),
            ess=np.array(diag["ess"], dtype=float),
            converged=bool(diag["converged"]),
            ls_converged=bool(diag["ls_converged"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CellPosterior":
        return cls.from_dict(json.loads(text))


def _mean_and_variance(samples: np.ndarray, context: str) -> tuple[np.ndarray, np.ndarray]:
    mu = samples.mean(axis=0)
    var = samples.var(axis=0, ddof=1)
    if np.any(var < VARIANCE_FLOOR):
        warnings.warn(
            f"{context}: degenerate posterior variance floored at {VARIANCE_FLOOR}",
            UserWarning,
            stacklevel=3,
        )
        var = np.maximum(var, VARIANCE_FLOOR)
    return mu, var


def sample_cell_posterior(
    spec: ModelSpec, trace: CapacityTrace, cfg: McmcConfig
) -> CellPosterior:
    """Sample one cell's parameter posterior.

    The chain starts at the least-squares fit, with per-dimension proposal
    scales adapted during burn-in.  The stream is derived from
    ``(cfg.seed, cell_id)``, so one configuration fans out to independent,
    reproducible chains across cells.
    """
    fit = least_squares_fit(spec, trace)
    x0 = fit.theta
    scales = np.maximum(0.1 * np.abs(x0), 1e-4)
    rng = np.random.default_rng(derive_seed("cell-chain", cfg.seed, trace.cell_id))
    chain = run_chain(_make_log_marginal(spec, trace), x0, scales, cfg, rng)
    mu, var = _mean_and_variance(chain.samples, trace.cell_id)
    return CellPosterior(
        cell_id=trace.cell_id,
        mu=mu,
        var=var,
        samples=chain.samples,
        acceptance_rate=float(chain.acceptance.mean()),
        ess=chain.ess,
        converged=bool(np.all(chain.ess >= 100)),
        ls_converged=fit.converged,
    )


def summarize_gaussian(posterior: CellPosterior) -> tuple[np.ndarray, np.ndarray]:
    """Per-parameter sample mean and unbiased variance of the retained draws."""
    if posterior.samples.shape[0] < MIN_SUMMARY_DRAWS:
        raise ValueError(
            f"{posterior.cell_id}: {posterior.samples.shape[0]} retained draws "
            f"(< {MIN_SUMMARY_DRAWS}) cannot support a Gaussian summary"
        )
    return _mean_and_variance(posterior.samples, posterior.cell_id)


def _cache_key(ds_hash: str, spec: ModelSpec, cfg: McmcConfig, cell_id: str) -> str:
    h = hashlib.sha256()
    for token in (
        f"schema={CACHE_SCHEMA}",
        ds_hash,
        spec.kind.value,
        f"{cfg.n_steps},{cfg.burn_in},{cfg.thin},{cfg.seed},{cfg.adapt_window}",
        cell_id,
    ):
        h.update(token.encode())
        h.update(b"\x1f")
    return h.hexdigest()


def resolve_cache_dir(cache_dir: str | Path | None) -> Path | None:
    if cache_dir is None:
        cache_dir = os.environ.get(CACHE_ENV) or None
    if cache_dir is None:
        return None
    path = Path(cache_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def compute_cell_posteriors(
    dataset: Dataset,
    spec: ModelSpec,
    cfg: McmcConfig,
    cache_dir: str | Path | None = None,
    threads: int = 1,
) -> dict[str, CellPosterior]:
    """First-level posteriors for every cell, in dataset order.

    Results are cached as JSON records keyed by (dataset hash, model,
    chain settings, cell id); the cache directory comes from the argument
    or the ``CELLVAR_CACHE`` environment variable.  Cached and fresh runs
    are interchangeable bit for bit.
    """
    cache = resolve_cache_dir(cache_dir)
    ds_hash = dataset_hash(dataset)

    def one(trace: CapacityTrace) -> CellPosterior:
        if cache is not None:
            record = cache / f"{_cache_key(ds_hash, spec, cfg, trace.cell_id)}.json"
            if record.exists():
                posterior = CellPosterior.from_json(record.read_text())
                if posterior.cell_id == trace.cell_id:
                    return posterior
            posterior = sample_cell_posterior(spec, trace, cfg)
            record.write_text(posterior.to_json())
            return posterior
        return sample_cell_posterior(spec, trace, cfg)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, dataset.traces))
    else:
        results = [one(trace) for trace in dataset.traces]
    return {p.cell_id: p for p in results}


def summaries_arrays(
    posteriors: dict[str, CellPosterior]
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Stack posterior summaries into (cell_ids, means (K,p), variances (K,p))."""
    ids = list(posteriors)
    mus = np.array([posteriors[i].mu for i in ids])
    variances = np.array([posteriors[i].var for i in ids])
    return ids, mus, variances

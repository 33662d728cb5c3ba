"""The sub-sampling study: how many cells until the variability estimate is stable?

For every sub-sample size N (from 3 up to K - 3), cells are drawn with
replacement ``n_repeats`` times; each draw gets a two-level population fit
(on the cached first-level summaries) and the plain sub-sample statistics.
The spread of the population-sigma estimates across repeats, as a function
of N, settles onto a log-linear decay ``log y = a N + b``; the required
cell count is where the curve enters, and stays inside, a (1 + alpha) band
above the line fitted through the largest-N half of the curve.

First-level posteriors depend only on each cell's own data, so they are
computed once per cell and reused by every repeat.  Per-repeat draw
streams and per-size chain streams are derived from the master seed, so
results are reproducible bit for bit and independent of thread count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import __version__
from .cell_inference import compute_cell_posteriors, summaries_arrays
from .dataset import Dataset, dataset_hash
from .mcmc import McmcConfig, derive_seed
from .models import ModelSpec
from .population_inference import (
    PopulationPosterior,
    PopulationPrior,
    parameter_correlations,
    population_chain,
    sample_population_posterior,
    sigma_upper_bounds,
)

RESULT_SCHEMA = 1
MAX_EXCLUDED_FRACTION = 0.05


class StudyError(RuntimeError):
    """A study aborted: too many repeats failed at some sub-sample size."""


@dataclass(frozen=True)
class StudyConfig:
    """Sub-sampling protocol settings.

    ``n_repeats`` defaults to a desk-scale 200; 1,000 gives the smoothest
    curves.  ``tail_fraction`` is the portion of largest sub-sample sizes
    used for the stability-line fit.
    """

    n_repeats: int = 200
    subsample_min: int = 3
    subsample_max: int | None = None     # resolved to K - 3
    alpha: float = 0.10
    master_seed: int = 0
    tail_fraction: float = 0.5

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        if self.subsample_min < 3:
            raise ValueError("subsample_min must be >= 3")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 0.0 < self.tail_fraction <= 1.0:
            raise ValueError("tail_fraction must be in (0, 1]")

    def resolve_max(self, K: int) -> int:
        upper = K - 3 if self.subsample_max is None else self.subsample_max
        if not self.subsample_min <= upper <= K - 3:
            raise ValueError(
                f"need subsample_min <= subsample_max <= K - 3 "
                f"(min={self.subsample_min}, max={upper}, K={K})"
            )
        return upper


def draw_subsample(
    cell_ids: Sequence[str], n: int, rng: np.random.Generator
) -> list[str]:
    """Draw ``n`` cell ids uniformly with replacement (one bootstrap draw)."""
    if n < 3:
        raise ValueError("sub-samples hold at least 3 cells")
    idx = rng.integers(0, len(cell_ids), size=n)
    return [cell_ids[i] for i in idx]


def _subsample_indices(K: int, n_max: int, n_repeats: int, master_seed: int) -> np.ndarray:
    """One with-replacement id stream per repeat, shaped (n_repeats, n_max).

    A sub-sample of size N is the first N draws of its repeat's stream, so
    growing N extends the previous sub-sample by one extra draw.
    """
    idx = np.empty((n_repeats, n_max), dtype=np.intp)
    for r in range(n_repeats):
        rng = np.random.default_rng(derive_seed("subsample", master_seed, r))
        idx[r] = rng.integers(0, K, size=n_max)
    return idx


@dataclass(frozen=True)
class SizePoint:
    """Second-level estimates for every repeat at one sub-sample size."""

    n: int
    mlb_sigma: np.ndarray      # (R, p) posterior means of sigma_g
    mlb_mu: np.ndarray         # (R, p)
    mlb_sigma_sd: np.ndarray   # (R, p) posterior sds, for band plots
    mlb_mu_sd: np.ndarray
    ssd_s: np.ndarray          # (R, p)
    ssd_m: np.ndarray
    excluded: int


def _second_level(
    mus: np.ndarray,
    variances: np.ndarray,
    idx_n: np.ndarray,
    n: int,
    master_seed: int,
    mcmc_cfg: McmcConfig,
) -> SizePoint:
    sub_mus = mus[idx_n]
    sub_vars = variances[idx_n]
    uppers = sigma_upper_bounds(sub_mus, axis=1)
    chain = population_chain(
        sub_mus, sub_vars, uppers, mcmc_cfg, derive_seed("mlb", master_seed, n)
    )
    p = mus.shape[1]
    mu_draws = chain.samples[:, :, :p]
    sigma_draws = chain.samples[:, :, p:]
    point = SizePoint(
        n=n,
        mlb_sigma=sigma_draws.mean(axis=1),
        mlb_mu=mu_draws.mean(axis=1),
        mlb_sigma_sd=sigma_draws.std(axis=1, ddof=1),
        mlb_mu_sd=mu_draws.std(axis=1, ddof=1),
        ssd_s=sub_mus.std(axis=1, ddof=1),
        ssd_m=sub_mus.mean(axis=1),
        excluded=0,
    )
    finite = (
        np.isfinite(point.mlb_sigma).all(axis=1)
        & np.isfinite(point.mlb_mu).all(axis=1)
    )
    if finite.all():
        return point
    keep = np.flatnonzero(finite)
    return SizePoint(
        n=n,
        mlb_sigma=point.mlb_sigma[keep],
        mlb_mu=point.mlb_mu[keep],
        mlb_sigma_sd=point.mlb_sigma_sd[keep],
        mlb_mu_sd=point.mlb_mu_sd[keep],
        ssd_s=point.ssd_s[keep],
        ssd_m=point.ssd_m[keep],
        excluded=int(len(finite) - len(keep)),
    )


def _spread(values: np.ndarray) -> np.ndarray:
    """Across-repeat standard deviation; NaN when there are < 2 repeats."""
    if values.shape[0] < 2:
        return np.full(values.shape[1], np.nan)
    return values.std(axis=0, ddof=1)


@dataclass(frozen=True)
class CurveBlock:
    """Across-repeat dispersion and level of one estimator, per (N, param)."""

    std_sigma: np.ndarray
    std_mu: np.ndarray
    mean_sigma: np.ndarray
    mean_mu: np.ndarray


@dataclass(frozen=True)
class StudyCurves:
    ns: np.ndarray
    mlb: CurveBlock
    ssd: CurveBlock


@dataclass(frozen=True)
class StabilityFit:
    """Log-linear decay of the sigma-estimate dispersion, and the entry point."""

    param: str
    slope: float
    intercept: float
    fit_region: tuple[int, ...]
    required_n: int | None
    converged: bool


def fit_stability(
    ns: np.ndarray, stds: np.ndarray, cfg: StudyConfig, param: str = ""
) -> StabilityFit:
    """Fit ``log y = a N + b`` over the largest-N tail and locate stability.

    The required N is the smallest size from which the curve stays at or
    below ``(1 + alpha)`` times the fitted line.  A non-negative slope
    means the dispersion never settles: ``converged=False``.
    """
    ns = np.asarray(ns)
    stds = np.asarray(stds, dtype=float)
    usable = np.isfinite(stds) & (stds > 0)
    n_tail = int(np.ceil(cfg.tail_fraction * usable.sum()))
    tail_idx = np.flatnonzero(usable)[-n_tail:] if n_tail else np.array([], dtype=int)
    if tail_idx.size < 4:
        raise ValueError(
            f"stability fit needs >= 4 tail points, have {tail_idx.size}"
        )
    slope, intercept = np.polyfit(ns[tail_idx], np.log(stds[tail_idx]), 1)
    region = tuple(int(v) for v in ns[tail_idx])
    if slope >= 0:
        return StabilityFit(param, float(slope), float(intercept), region, None, False)

    band = (1.0 + cfg.alpha) * np.exp(slope * ns + intercept)
    inside = usable & (stds <= band)
    required: int | None = None
    if inside.all():
        required = int(ns[0])
    else:
        last_violation = int(np.flatnonzero(~inside)[-1])
        if last_violation + 1 < ns.size:
            required = int(ns[last_violation + 1])
    return StabilityFit(param, float(slope), float(intercept), region, required, True)


@dataclass(frozen=True)
class StudyResult:
    dataset_name: str
    model: ModelSpec
    K: int
    curves: StudyCurves
    stability: tuple[StabilityFit, ...]
    required_n_model: int | None
    correlations: np.ndarray | None
    population_full: PopulationPosterior
    cell_ids: tuple[str, ...]
    sample_mu: np.ndarray          # (K, p) first-level posterior means
    sample_var: np.ndarray         # (K, p)
    excluded: dict[int, int]
    provenance: dict

    def to_dict(self) -> dict:
        def block(b: CurveBlock) -> dict:
            return {
                "std_sigma_g": b.std_sigma.tolist(),
                "std_mu_g": b.std_mu.tolist(),
                "mean_sigma_g": b.mean_sigma.tolist(),
                "mean_mu_g": b.mean_mu.tolist(),
            }

        return {
            "schema": RESULT_SCHEMA,
            "dataset": self.dataset_name,
            "model": self.model.kind.value,
            "param_names": list(self.model.param_names),
            "K": self.K,
            "curves": {
                "ns": [int(n) for n in self.curves.ns],
                "mlb": block(self.curves.mlb),
                "ssd": block(self.curves.ssd),
            },
            "stability": [
                {
                    "param": s.param,
                    "slope": s.slope,
                    "intercept": s.intercept,
                    "fit_region": list(s.fit_region),
                    "required_n": s.required_n,
                    "converged": s.converged,
                }
                for s in self.stability
            ],
            "required_n_model": self.required_n_model,
            "correlations": None if self.correlations is None else self.correlations.tolist(),
            "population_full": self.population_full.to_dict(),
            "cell_ids": list(self.cell_ids),
            "sample_mu": self.sample_mu.tolist(),
            "sample_var": self.sample_var.tolist(),
            "excluded": {str(k): v for k, v in self.excluded.items()},
            "provenance": self.provenance,
        }


def _prepare(dataset: Dataset, spec: ModelSpec, study_cfg: StudyConfig,
             mcmc_cfg: McmcConfig, cache_dir, threads):
    if dataset.K < 6:
        raise ValueError(f"{dataset.name}: need at least 6 cells, have {dataset.K}")
    if dataset.normalization is not spec.required_normalization:
        raise ValueError(
            f"{dataset.name}: normalized to {dataset.normalization.value!r}; "
            f"{spec.kind.value} requires {spec.required_normalization.value!r}"
        )
    n_max = study_cfg.resolve_max(dataset.K)
    first_cfg = replace(mcmc_cfg, seed=study_cfg.master_seed)
    posteriors = compute_cell_posteriors(
        dataset, spec, first_cfg, cache_dir=cache_dir, threads=threads
    )
    cell_ids, mus, variances = summaries_arrays(posteriors)
    return n_max, cell_ids, mus, variances


def run_study(
    dataset: Dataset,
    spec: ModelSpec,
    study_cfg: StudyConfig,
    mcmc_cfg: McmcConfig,
    cache_dir=None,
    threads: int = 1,
) -> StudyResult:
    """Full sub-sampling study on one dataset/model pair."""
    n_max, cell_ids, mus, variances = _prepare(
        dataset, spec, study_cfg, mcmc_cfg, cache_dir, threads
    )
    p = spec.param_count
    sizes = list(range(study_cfg.subsample_min, n_max + 1))
    idx = _subsample_indices(dataset.K, n_max, study_cfg.n_repeats, study_cfg.master_seed)

    def at_size(n: int) -> SizePoint:
        return _second_level(mus, variances, idx[:, :n], n,
                             study_cfg.master_seed, mcmc_cfg)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(at_size, sizes))
    else:
        points = [at_size(n) for n in sizes]

    excluded = {pt.n: pt.excluded for pt in points if pt.excluded}
    for pt in points:
        if pt.excluded > MAX_EXCLUDED_FRACTION * study_cfg.n_repeats:
            raise StudyError(
                f"{dataset.name}: {pt.excluded}/{study_cfg.n_repeats} repeats "
                f"failed at N={pt.n} (> {MAX_EXCLUDED_FRACTION:.0%})"
            )

    curves = StudyCurves(
        ns=np.array(sizes),
        mlb=CurveBlock(
            std_sigma=np.vstack([_spread(pt.mlb_sigma) for pt in points]),
            std_mu=np.vstack([_spread(pt.mlb_mu) for pt in points]),
            mean_sigma=np.vstack([pt.mlb_sigma.mean(axis=0) for pt in points]),
            mean_mu=np.vstack([pt.mlb_mu.mean(axis=0) for pt in points]),
        ),
        ssd=CurveBlock(
            std_sigma=np.vstack([_spread(pt.ssd_s) for pt in points]),
            std_mu=np.vstack([_spread(pt.ssd_m) for pt in points]),
            mean_sigma=np.vstack([pt.ssd_s.mean(axis=0) for pt in points]),
            mean_mu=np.vstack([pt.ssd_m.mean(axis=0) for pt in points]),
        ),
    )

    stability = []
    for d, name in enumerate(spec.param_names):
        try:
            stability.append(
                fit_stability(curves.ns, curves.mlb.std_sigma[:, d], study_cfg, name)
            )
        except ValueError as exc:
            warnings.warn(f"{dataset.name}/{name}: {exc}", UserWarning, stacklevel=2)
            stability.append(StabilityFit(name, float("nan"), float("nan"), (), None, False))
    reached = [s.required_n for s in stability]
    required_n_model = max(reached) if all(r is not None for r in reached) else None

    correlations = parameter_correlations(mus) if p >= 2 else None
    full_prior = PopulationPrior.from_summaries(mus)
    population_full = sample_population_posterior(
        mus, variances, full_prior,
        replace(mcmc_cfg, seed=study_cfg.master_seed),
    )

    provenance = {
        "dataset_hash": dataset_hash(dataset),
        "study": {
            "n_repeats": study_cfg.n_repeats,
            "subsample_min": study_cfg.subsample_min,
            "subsample_max": n_max,
            "alpha": study_cfg.alpha,
            "master_seed": study_cfg.master_seed,
            "tail_fraction": study_cfg.tail_fraction,
        },
        "mcmc": {
            "n_steps": mcmc_cfg.n_steps,
            "burn_in": mcmc_cfg.burn_in,
            "thin": mcmc_cfg.thin,
            "adapt_window": mcmc_cfg.adapt_window,
        },
        "version": __version__,
    }
    return StudyResult(
        dataset_name=dataset.name,
        model=spec,
        K=dataset.K,
        curves=curves,
        stability=tuple(stability),
        required_n_model=required_n_model,
        correlations=correlations,
        population_full=population_full,
        cell_ids=tuple(cell_ids),
        sample_mu=mus,
        sample_var=variances,
        excluded=excluded,
        provenance=provenance,
    )


@dataclass(frozen=True)
class SingleDrawTrace:
    """One repeat per sub-sample size, with 1-sigma posterior bands."""

    ns: np.ndarray
    param_names: tuple[str, ...]
    mu_g: np.ndarray         # (len(ns), p)
    mu_g_sd: np.ndarray
    sigma_g: np.ndarray
    sigma_g_sd: np.ndarray


def single_draw_trace(
    dataset: Dataset,
    spec: ModelSpec,
    study_cfg: StudyConfig,
    mcmc_cfg: McmcConfig,
    cache_dir=None,
    threads: int = 1,
) -> SingleDrawTrace:
    """Parameter estimates along a single nested bootstrap path.

    Uses the same streams as repeat 0 of :func:`run_study`, so a study run
    with ``n_repeats=1`` reproduces these values exactly.
    """
    n_max, _, mus, variances = _prepare(
        dataset, spec, study_cfg, mcmc_cfg, cache_dir, threads
    )
    sizes = list(range(study_cfg.subsample_min, n_max + 1))
    idx = _subsample_indices(dataset.K, n_max, 1, study_cfg.master_seed)
    points = [
        _second_level(mus, variances, idx[:, :n], n, study_cfg.master_seed, mcmc_cfg)
        for n in sizes
    ]
    return SingleDrawTrace(
        ns=np.array(sizes),
        param_names=spec.param_names,
        mu_g=np.vstack([pt.mlb_mu[0] for pt in points]),
        mu_g_sd=np.vstack([pt.mlb_mu_sd[0] for pt in points]),
        sigma_g=np.vstack([pt.mlb_sigma[0] for pt in points]),
        sigma_g_sd=np.vstack([pt.mlb_sigma_sd[0] for pt in points]),
    )

"""Synthetic datasets from a known population - the ground truth oracle.

Per-cell parameters are drawn from a Gaussian population (optionally
correlated across dimensions); traces are the model evaluated on a common
check-up grid plus i.i.d. Gaussian measurement noise.  Generated traces
are already on the percent scale and carry the model's required
normalization tag, so they feed straight into inference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import CapacityTrace, Dataset, Normalization
from .mcmc import derive_seed
from .models import ModelKind, ModelSpec, evaluate

TRUTH_SCHEMA = 1
MAX_TAU_REDRAWS = 1000


def default_time_grid(n_points: int = 50, t_end: float = 1000.0) -> np.ndarray:
    """Equally spaced check-ups from t = 0, the typical cadence."""
    return np.linspace(0.0, t_end, n_points)


@dataclass(frozen=True)
class PopulationTruth:
    model: ModelSpec
    mu_star: np.ndarray
    sigma_star: np.ndarray
    n_cells: int
    noise: float = 0.1                      # measurement noise, percent capacity
    correlation: np.ndarray | None = None   # defaults to independent dimensions
    time_grid: np.ndarray = field(default_factory=default_time_grid)
    seed: int = 0

    def __post_init__(self):
        p = self.model.param_count
        mu = np.asarray(self.mu_star, dtype=float)
        sigma = np.asarray(self.sigma_star, dtype=float)
        grid = np.asarray(self.time_grid, dtype=float)
        if mu.shape != (p,) or sigma.shape != (p,):
            raise ValueError(f"mu_star and sigma_star must have shape ({p},)")
        if np.any(sigma < 0):
            raise ValueError("population standard deviations must be >= 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_cells < 1:
            raise ValueError("need at least one cell")
        if grid.ndim != 1 or grid.size < p + 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise ValueError("time grid must start at 0, increase strictly, "
                             f"and hold at least {p + 2} points")
        if self.correlation is not None:
            corr = np.asarray(self.correlation, dtype=float)
            if corr.shape != (p, p) or not np.allclose(corr, corr.T):
                raise ValueError("correlation must be a symmetric (p, p) matrix")
            if not np.allclose(np.diag(corr), 1.0):
                raise ValueError("correlation must have a unit diagonal")
            if np.linalg.eigvalsh(corr).min() < -1e-10:
                raise ValueError("correlation must be positive semi-definite")
            object.__setattr__(self, "correlation", corr)
        object.__setattr__(self, "mu_star", mu)
        object.__setattr__(self, "sigma_star", sigma)
        object.__setattr__(self, "time_grid", grid)


def _correlation_factor(corr: np.ndarray | None, p: int) -> np.ndarray | None:
    if corr is None:
        return None
    eigvals, eigvecs = np.linalg.eigh(corr)
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def generate(truth: PopulationTruth) -> tuple[Dataset, np.ndarray]:
    """Draw a dataset plus the hidden per-cell parameters that made it.

    For the knee model, parameter draws are rejected until the time
    constant is positive; a thousand consecutive rejections aborts with
    advice to narrow the population.
    """
    spec = truth.model
    p = spec.param_count
    rng = np.random.default_rng(derive_seed("synth", truth.seed))
    factor = _correlation_factor(truth.correlation, p)
    tau_index = spec.param_names.index("tau") if spec.kind is ModelKind.LINEXP else None

    thetas = np.empty((truth.n_cells, p))
    failures = 0
    k = 0
    while k < truth.n_cells:
        z = rng.standard_normal(p)
        if factor is not None:
            z = factor @ z
        theta = truth.mu_star + truth.sigma_star * z
        if tau_index is not None and theta[tau_index] <= 0:
            failures += 1
            if failures >= MAX_TAU_REDRAWS:
                raise ValueError(
                    f"{MAX_TAU_REDRAWS} consecutive draws produced tau <= 0; "
                    "narrow the population (sigma_star for tau is too wide)"
                )
            continue
        failures = 0
        thetas[k] = theta
        k += 1

    width = len(str(truth.n_cells - 1))
    traces = []
    for k in range(truth.n_cells):
        clean = evaluate(spec, thetas[k], truth.time_grid)
        noise = truth.noise * rng.standard_normal(truth.time_grid.size)
        traces.append(
            CapacityTrace(
                cell_id=f"cell_{k:0{width}d}",
                times=truth.time_grid,
                capacities=clean + noise,
                normalization=spec.required_normalization,
            )
        )
    dataset = Dataset(
        name=f"synthetic-{spec.kind.value}",
        traces=tuple(traces),
        nominal_capacity=100.0,      # traces are already percent
    )
    return dataset, thetas


def write_truth(
    truth: PopulationTruth, thetas: np.ndarray, dataset: Dataset, path: str | Path
) -> None:
    """JSON sidecar recording the generating population and per-cell truths."""
    record = {
        "schema": TRUTH_SCHEMA,
        "model": truth.model.kind.value,
        "param_names": list(truth.model.param_names),
        "mu_star": truth.mu_star.tolist(),
        "sigma_star": truth.sigma_star.tolist(),
        "correlation": None if truth.correlation is None else truth.correlation.tolist(),
        "noise": truth.noise,
        "n_cells": truth.n_cells,
        "time_grid": truth.time_grid.tolist(),
        "seed": truth.seed,
        "theta": {
            trace.cell_id: thetas[i].tolist()
            for i, trace in enumerate(dataset.traces)
        },
    }
    Path(path).write_text(json.dumps(record, indent=2) + "\n")

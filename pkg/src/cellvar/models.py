"""Empirical capacity-fade models and their least-squares fits.

Three models of percent capacity against time:

* ``linear1``: B(t) = 100 + c1*t
* ``linear2``: B(t) = B0 + c2*t
* ``linexp``:  B(t) = 100 + c3*t - exp((t - t_f)/tau), a linear fade with an
  accelerating tail of onset ``t_f`` and time constant ``tau``

``linear1`` and ``linexp`` expect traces normalized to each cell's initial
capacity; ``linear2`` expects normalization to the nominal capacity.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import least_squares as _scipy_least_squares

from .dataset import CapacityTrace, Normalization

# double-precision exp overflows near 709; past this guard the model
# evaluates to -inf, which likelihoods treat as probability zero
EXP_GUARD = 700.0


class ModelKind(str, Enum):
    LINEAR1 = "linear1"
    LINEAR2 = "linear2"
    LINEXP = "linexp"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    param_names: tuple[str, ...]
    required_normalization: Normalization

    @property
    def param_count(self) -> int:
        return len(self.param_names)


LINEAR1 = ModelSpec(ModelKind.LINEAR1, ("c1",), Normalization.INITIAL)
LINEAR2 = ModelSpec(ModelKind.LINEAR2, ("B0", "c2"), Normalization.NOMINAL)
LINEXP = ModelSpec(ModelKind.LINEXP, ("c3", "t_f", "tau"), Normalization.INITIAL)

_BY_KIND = {spec.kind: spec for spec in (LINEAR1, LINEAR2, LINEXP)}


def model_spec(kind: ModelKind | str) -> ModelSpec:
    return _BY_KIND[ModelKind(kind)]


def check_theta(spec: ModelSpec, theta) -> np.ndarray:
    """Validate a parameter vector against a model: shape and finiteness."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.param_count,):
        raise ValueError(
            f"{spec.kind.value}: expected {spec.param_count} parameters "
            f"{spec.param_names}, got shape {theta.shape}"
        )
    if not np.all(np.isfinite(theta)):
        raise ValueError(f"{spec.kind.value}: non-finite parameters {theta}")
    return theta


def evaluate(spec: ModelSpec, theta, t):
    """Model capacity (percent) at time(s) ``t``; scalar in, scalar out."""
    theta = check_theta(spec, theta)
    t_arr = np.asarray(t, dtype=float)
    if spec.kind is ModelKind.LINEAR1:
        out = 100.0 + theta[0] * t_arr
    elif spec.kind is ModelKind.LINEAR2:
        out = theta[0] + theta[1] * t_arr
    else:
        c3, t_f, tau = theta
        if tau <= 0:
            raise ValueError("tau must be positive")
        z = (t_arr - t_f) / tau
        out = 100.0 + c3 * t_arr - np.exp(np.minimum(z, EXP_GUARD))
        out = np.where(z > EXP_GUARD, -np.inf, out)
    return float(out) if out.ndim == 0 else out


def residuals(spec: ModelSpec, theta, trace: CapacityTrace) -> np.ndarray:
    """Measured minus modelled capacity at the trace's check-up times."""
    if trace.normalization is not spec.required_normalization:
        raise ValueError(
            f"{trace.cell_id}: trace is normalized to "
            f"{trace.normalization.value!r} but {spec.kind.value} requires "
            f"{spec.required_normalization.value!r}"
        )
    return trace.capacities - evaluate(spec, theta, trace.times)


@dataclass(frozen=True)
class FitResult:
    theta: np.ndarray
    converged: bool


def least_squares_fit(spec: ModelSpec, trace: CapacityTrace) -> FitResult:
    """Point fit of a trace: exact OLS for the linear models, damped
    nonlinear least squares for ``linexp``.

    The linexp start point (slope of the first half, knee just past the
    record, time constant a tenth of the span) sits in the right basin for
    knee-shaped traces, where the accelerating term is small over most of
    the record.  Non-convergence returns the best point found with
    ``converged=False``.
    """
    if trace.normalization is not spec.required_normalization:
        raise ValueError(
            f"{trace.cell_id}: trace normalization "
            f"{trace.normalization.value!r} does not match {spec.kind.value}"
        )
    n = trace.n_points
    if n < spec.param_count + 2:
        raise ValueError(
            f"{trace.cell_id}: {n} points cannot constrain "
            f"{spec.param_count} parameters plus noise"
        )
    t = trace.times
    y = trace.capacities

    if spec.kind is ModelKind.LINEAR1:
        c1 = float(t @ (y - 100.0) / (t @ t))
        return FitResult(np.array([c1]), True)

    if spec.kind is ModelKind.LINEAR2:
        design = np.column_stack([np.ones_like(t), t])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        return FitResult(coef, True)

    half = max(3, n // 2)
    th, yh = t[:half], y[:half]
    slope = float(th @ (yh - 100.0) / (th @ th))
    span = float(t[-1] - t[0])

    def fit_residuals(theta):
        c3, t_f, tau = theta
        # clipped exponent keeps the objective finite if the solver strays
        z = np.minimum((t - t_f) / tau, 50.0)
        return y - (100.0 + c3 * t - np.exp(z))

    def solve(x0):
        return _scipy_least_squares(
            fit_residuals,
            x0,
            bounds=([-np.inf, -np.inf, 1e-9], [np.inf, np.inf, np.inf]),
            method="trf",
            gtol=1e-8,
            ftol=1e-12,
            xtol=1e-12,
            x_scale="jac",
            max_nfev=500,
        )

    starts = [np.array([slope, float(t[-1]) * 1.05, 0.1 * span])]
    knee = _knee_start(t, y, slope, span)
    if knee is not None:
        starts.append(np.array([slope, *knee]))
    results = [solve(x0) for x0 in starts]
    best = min(results, key=lambda r: float(r.fun @ r.fun))
    return FitResult(best.x, bool(best.status != 0))


def _knee_start(t, y, slope, span):
    """Second start point for traces whose knee dominates the record.

    Log-linearizes the deviation of the last two check-ups below the
    first-half line (that deviation is the exponential term if a knee is
    present); returns None when the record end does not dip below the line.
    """
    deviation = (100.0 + slope * t) - y
    if deviation[-1] <= 0 or deviation[-2] <= 0:
        return None
    tau = (t[-1] - t[-2]) / np.log(deviation[-1] / deviation[-2]) \
        if deviation[-1] != deviation[-2] else span
    if not np.isfinite(tau) or tau <= 0:
        return None
    tau = float(np.clip(tau, span / 100.0, span))
    t_f = float(t[-1] - tau * np.log(deviation[-1]))
    return t_f, tau

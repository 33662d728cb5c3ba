"""Random-walk Metropolis machinery shared by both inference levels.

The sampler is component-wise: each step proposes every dimension in turn
from a per-dimension Gaussian whose scale is adapted during burn-in toward
a 20-40% acceptance rate and frozen afterwards, so the post-burn-in chain
satisfies detailed balance.  All randomness flows through
:func:`numpy.random.default_rng` generators seeded by :func:`derive_seed`,
which hashes structured keys (never Python's salted ``hash``), so every
result is reproducible bit for bit across runs, platforms, and thread
counts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

ACCEPT_LOW = 0.2
ACCEPT_HIGH = 0.4


def derive_seed(*parts: int | str | bytes) -> np.random.SeedSequence:
    """Deterministic seed stream id from structured parts (ints, strings)."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str, bytes)):
            raise TypeError(f"seed parts must be int, str, or bytes, got {part!r}")
        if isinstance(part, int):
            token = b"i:" + str(part).encode()
        elif isinstance(part, str):
            token = b"s:" + part.encode()
        else:
            token = b"b:" + part
        h.update(token)
        h.update(b"\x1f")
    return np.random.SeedSequence(int.from_bytes(h.digest(), "big"))


@dataclass(frozen=True)
class McmcConfig:
    """Chain-length and adaptation settings.

    Defaults give 1,500 retained draws, enough for effective sample sizes
    in the hundreds-to-thousands on the 1-3 dimensional posteriors here.
    """

    n_steps: int = 20_000
    burn_in: int = 5_000
    thin: int = 10
    seed: int = 0
    adapt_window: int = 50

    def __post_init__(self):
        if not (0 <= self.burn_in < self.n_steps):
            raise ValueError(f"need 0 <= burn_in < n_steps, got {self}")
        if self.thin < 1 or self.adapt_window < 1:
            raise ValueError(f"thin and adapt_window must be >= 1, got {self}")

    @property
    def n_retained(self) -> int:
        return (self.n_steps - self.burn_in + self.thin - 1) // self.thin


def adapt_factor(accepted, window: int):
    """Multiplier nudging proposal scales toward the 20-40% acceptance band.

    A fully rejecting window halves the scale so the chain recovers quickly
    from a far-too-wide proposal.
    """
    rate = np.asarray(accepted, dtype=float) / window
    factor = np.ones_like(rate)
    factor[rate < ACCEPT_LOW] = 0.8
    factor[rate == 0.0] = 0.5
    factor[rate > ACCEPT_HIGH] = 1.25
    return factor


@dataclass(frozen=True)
class ChainResult:
    samples: np.ndarray          # (n_retained, ndim)
    acceptance: np.ndarray       # per dimension, post burn-in
    ess: np.ndarray              # per dimension
    scales: np.ndarray           # frozen proposal scales


def run_chain(
    log_prob: Callable[[np.ndarray], float],
    x0: np.ndarray,
    scales: np.ndarray,
    cfg: McmcConfig,
    rng: np.random.Generator,
) -> ChainResult:
    """Component-wise random-walk Metropolis from ``x0``.

    ``log_prob`` may return ``-inf`` to reject invalid states (which also
    makes the start point's validity the caller's responsibility).
    """
    x = np.array(x0, dtype=float)
    ndim = x.size
    scales = np.array(scales, dtype=float)
    lp = log_prob(x)
    if not np.isfinite(lp):
        raise ValueError(f"chain start has zero probability: x0={x0}")

    samples = np.empty((cfg.n_retained, ndim))
    kept = 0
    window_acc = np.zeros(ndim)
    total_acc = np.zeros(ndim)

    for step in range(cfg.n_steps):
        for d in range(ndim):
            proposal = x.copy()
            proposal[d] += scales[d] * rng.standard_normal()
            lp_new = log_prob(proposal)
            if np.log(rng.random()) < lp_new - lp:
                x = proposal
                lp = lp_new
                window_acc[d] += 1
                if step >= cfg.burn_in:
                    total_acc[d] += 1
        if step < cfg.burn_in and (step + 1) % cfg.adapt_window == 0:
            scales *= adapt_factor(window_acc, cfg.adapt_window)
            window_acc[:] = 0
        if step >= cfg.burn_in and (step - cfg.burn_in) % cfg.thin == 0:
            samples[kept] = x
            kept += 1

    acceptance = total_acc / (cfg.n_steps - cfg.burn_in)
    ess = ess_batched(samples[None, :, :])[0]
    return ChainResult(samples, acceptance, ess, scales)


def _autocorr(x: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation along the last axis, via FFT."""
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, n=size, axis=-1)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), n=size, axis=-1)[..., :n]
    var = acov[..., :1].copy()
    var[var <= 0] = np.nan
    return acov / var


def ess_batched(samples: np.ndarray) -> np.ndarray:
    """Effective sample size per series for draws shaped ``(R, M, D)``.

    Uses the initial-positive-sequence estimator on paired autocorrelation
    sums; a constant series reports an ESS of 0.
    """
    R, M, D = samples.shape
    rho = _autocorr(np.moveaxis(samples, 1, 2))      # (R, D, M)
    n_pairs = M // 2
    pairs = rho[..., 0 : 2 * n_pairs : 2] + rho[..., 1 : 2 * n_pairs : 2]
    positive = np.cumprod(pairs > 0, axis=-1).astype(bool)
    tau = 2.0 * np.where(positive, pairs, 0.0).sum(axis=-1) - 1.0
    ess = M / np.maximum(tau, 1.0)
    return np.where(np.isnan(rho[..., 0]), 0.0, np.minimum(ess, M))


def effective_sample_size(draws: np.ndarray) -> float:
    """ESS of a single 1-D chain."""
    draws = np.asarray(draws, dtype=float)
    return float(ess_batched(draws[None, :, None])[0, 0])

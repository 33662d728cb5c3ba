"""Study and fit reports: delimited tables plus rendered figures.

Every figure has a flat CSV twin carrying the same numbers, so downstream
tooling never has to scrape pixels.  Figures are rendered with the Agg
backend straight to PNG files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .cell_inference import CellPosterior
from .dataset import Dataset
from .models import ModelSpec, evaluate
from .study import SingleDrawTrace, StudyResult


def _fmt(value) -> str:
    return repr(float(value))


def write_study_json(result: StudyResult, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    return path


def write_dispersion_csv(result: StudyResult, path: str | Path) -> Path:
    """Across-repeat dispersion of the population estimates, per method."""
    path = Path(path)
    curves = result.curves
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "param", "n", "std_sigma_g", "std_mu_g",
             "mean_sigma_g", "mean_mu_g"]
        )
        for method, block in (("mlb", curves.mlb), ("ssd", curves.ssd)):
            for d, param in enumerate(result.model.param_names):
                for i, n in enumerate(curves.ns):
                    writer.writerow(
                        [method, param, int(n),
                         _fmt(block.std_sigma[i, d]), _fmt(block.std_mu[i, d]),
                         _fmt(block.mean_sigma[i, d]), _fmt(block.mean_mu[i, d])]
                    )
    return path


def write_single_draw_csv(trace: SingleDrawTrace, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "n", "mu_g", "mu_g_sd", "sigma_g", "sigma_g_sd"])
        for d, param in enumerate(trace.param_names):
            for i, n in enumerate(trace.ns):
                writer.writerow(
                    [param, int(n),
                     _fmt(trace.mu_g[i, d]), _fmt(trace.mu_g_sd[i, d]),
                     _fmt(trace.sigma_g[i, d]), _fmt(trace.sigma_g_sd[i, d])]
                )
    return path


def write_required_n_csv(result: StudyResult, path: str | Path) -> Path:
    """Required cell count per parameter (and the model-level maximum)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "param_count", "param", "slope", "intercept",
             "required_n", "converged"]
        )
        for fit in result.stability:
            writer.writerow(
                [result.model.kind.value, result.model.param_count, fit.param,
                 _fmt(fit.slope), _fmt(fit.intercept),
                 "" if fit.required_n is None else fit.required_n,
                 fit.converged]
            )
        writer.writerow(
            [result.model.kind.value, result.model.param_count, "__model__",
             "", "",
             "" if result.required_n_model is None else result.required_n_model,
             all(f.converged for f in result.stability)]
        )
    return path


def write_sample_vs_population_csv(result: StudyResult, path: str | Path) -> Path:
    """Per-cell means next to the full-sample population fit, per parameter."""
    path = Path(path)
    p = result.model.param_count
    pop_mu = result.population_full.mu_g
    pop_sigma = result.population_full.sigma_g
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "cell_id", "mu_k", "sigma_k", "pop_mu_g", "pop_sigma_g"])
        for d in range(p):
            param = result.model.param_names[d]
            for i, cell in enumerate(result.cell_ids):
                writer.writerow(
                    [param, cell,
                     _fmt(result.sample_mu[i, d]),
                     _fmt(np.sqrt(result.sample_var[i, d])),
                     _fmt(pop_mu[d]), _fmt(pop_sigma[d])]
                )
    return path


def write_study_tables(result: StudyResult, trace: SingleDrawTrace | None,
                       outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    written = [
        write_study_json(result, outdir / "study_result.json"),
        write_dispersion_csv(result, outdir / "dispersion_vs_n.csv"),
        write_required_n_csv(result, outdir / "required_n.csv"),
        write_sample_vs_population_csv(result, outdir / "sample_vs_population.csv"),
    ]
    if trace is not None:
        written.append(write_single_draw_csv(trace, outdir / "single_draw.csv"))
    return written


# ---------------------------------------------------------------------------
# figures


def _finish(fig, path: Path) -> Path:
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_dispersion_figures(result: StudyResult, outdir: str | Path) -> list[Path]:
    """One semilog dispersion plot per parameter: MLB vs SSD, with the
    fitted stability line, its (1 + alpha) band, and the required-N mark."""
    outdir = Path(outdir)
    ns = result.curves.ns
    alpha = result.provenance["study"]["alpha"]
    paths = []
    for d, param in enumerate(result.model.param_names):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.semilogy(ns, result.curves.mlb.std_sigma[:, d], "o-", label="MLB",
                    color="tab:blue", ms=4)
        ax.semilogy(ns, result.curves.ssd.std_sigma[:, d], "s-", label="SSD",
                    color="tab:orange", ms=4)
        fit = result.stability[d]
        if np.isfinite(fit.slope):
            line = np.exp(fit.slope * ns + fit.intercept)
            ax.semilogy(ns, line, "--", color="gray", label="stability fit")
            ax.fill_between(ns, line, (1 + alpha) * line, color="gray", alpha=0.3,
                            label=f"+{alpha:.0%} band")
        if fit.required_n is not None:
            ax.axvline(fit.required_n, color="black", ls=":",
                       label=f"required N = {fit.required_n}")
        ax.set_xlabel("cells in sub-sample")
        ax.set_ylabel(f"std of $\\sigma_g$ estimate ({param})")
        ax.set_title(f"{result.dataset_name}: {result.model.kind.value} / {param}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        paths.append(_finish(fig, outdir / f"dispersion_{param}.png"))
    return paths


def render_single_draw_figure(trace: SingleDrawTrace, outdir: str | Path) -> Path:
    outdir = Path(outdir)
    p = len(trace.param_names)
    fig, axes = plt.subplots(2, p, figsize=(4 * p, 6), squeeze=False)
    for d, param in enumerate(trace.param_names):
        top, bottom = axes[0][d], axes[1][d]
        top.plot(trace.ns, trace.mu_g[:, d], color="tab:blue")
        top.fill_between(trace.ns,
                         trace.mu_g[:, d] - trace.mu_g_sd[:, d],
                         trace.mu_g[:, d] + trace.mu_g_sd[:, d],
                         color="tab:blue", alpha=0.3)
        top.set_ylabel(f"$\\mu_g$ ({param})")
        bottom.plot(trace.ns, trace.sigma_g[:, d], color="tab:red")
        bottom.fill_between(trace.ns,
                            trace.sigma_g[:, d] - trace.sigma_g_sd[:, d],
                            trace.sigma_g[:, d] + trace.sigma_g_sd[:, d],
                            color="tab:red", alpha=0.3)
        bottom.set_ylabel(f"$\\sigma_g$ ({param})")
        bottom.set_xlabel("cells in sub-sample")
    fig.suptitle("single-draw estimates with 1-$\\sigma$ posterior bands")
    fig.tight_layout()
    return _finish(fig, outdir / "single_draw.png")


def render_required_n_figure(result: StudyResult, outdir: str | Path) -> Path:
    outdir = Path(outdir)
    fig, ax = plt.subplots(figsize=(5, 4))
    names = [f.param for f in result.stability]
    values = [np.nan if f.required_n is None else f.required_n
              for f in result.stability]
    ax.bar(names, values, color="tab:blue")
    if result.required_n_model is not None:
        ax.axhline(result.required_n_model, color="black", ls=":",
                   label=f"model: {result.required_n_model}")
        ax.legend()
    ax.set_ylabel("required cells")
    ax.set_title(f"{result.dataset_name}: {result.model.kind.value}")
    fig.tight_layout()
    return _finish(fig, outdir / "required_n.png")


def render_sample_vs_population_figure(result: StudyResult, outdir: str | Path) -> Path:
    outdir = Path(outdir)
    p = result.model.param_count
    fig, axes = plt.subplots(1, p, figsize=(4 * p, 3.5), squeeze=False)
    for d in range(p):
        ax = axes[0][d]
        mu_k = result.sample_mu[:, d]
        ax.hist(mu_k, bins=min(15, max(5, result.K // 3)), density=True,
                color="tab:gray", alpha=0.6, label="cells")
        mu = result.population_full.mu_g[d]
        sigma = max(result.population_full.sigma_g[d], 1e-12)
        grid = np.linspace(mu - 4 * sigma, mu + 4 * sigma, 200)
        ax.plot(grid,
                np.exp(-0.5 * ((grid - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi)),
                color="tab:blue", label="population fit")
        ax.set_xlabel(result.model.param_names[d])
        ax.legend(fontsize=8)
    fig.suptitle("per-cell estimates vs fitted population")
    fig.tight_layout()
    return _finish(fig, outdir / "sample_vs_population.png")


def render_study_figures(result: StudyResult, trace: SingleDrawTrace | None,
                         outdir: str | Path) -> list[Path]:
    paths = render_dispersion_figures(result, outdir)
    paths.append(render_required_n_figure(result, outdir))
    paths.append(render_sample_vs_population_figure(result, outdir))
    if trace is not None:
        paths.append(render_single_draw_figure(trace, outdir))
    return paths


def render_fit_figure(dataset: Dataset, spec: ModelSpec,
                      posteriors: dict[str, CellPosterior],
                      outdir: str | Path) -> Path:
    """Traces with their fitted mean curves overlaid."""
    outdir = Path(outdir)
    fig, ax = plt.subplots(figsize=(6, 4))
    for trace in dataset.traces:
        ax.plot(trace.times, trace.capacities, ".", ms=2, color="tab:gray", alpha=0.5)
        post = posteriors[trace.cell_id]
        ax.plot(trace.times, evaluate(spec, post.mu, trace.times), "-",
                lw=0.8, color="tab:blue", alpha=0.7)
    ax.set_xlabel("time")
    ax.set_ylabel("capacity (%)")
    ax.set_title(f"{dataset.name}: {spec.kind.value} posterior-mean fits")
    fig.tight_layout()
    return _finish(fig, outdir / "fit_overview.png")


def write_fit_summary_csv(posteriors: dict[str, CellPosterior],
                          spec: ModelSpec, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["cell_id"]
        for name in spec.param_names:
            header += [f"{name}_mean", f"{name}_sd", f"{name}_ess"]
        header += ["acceptance_rate", "converged", "ls_converged"]
        writer.writerow(header)
        for cell_id, post in posteriors.items():
            row = [cell_id]
            for d in range(spec.param_count):
                row += [_fmt(post.mu[d]), _fmt(np.sqrt(post.var[d])), _fmt(post.ess[d])]
            row += [_fmt(post.acceptance_rate), post.converged, post.ls_converged]
            writer.writerow(row)
    return path

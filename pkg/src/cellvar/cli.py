"""Command-line front-end: synth / fit / study / truncate.

Every command writes its outputs into a fresh directory together with a
``manifest.json`` recording the resolved configuration, input hashes, and
output hashes.  Re-running the manifest's argv reproduces every output
byte for byte (the manifest itself carries the only timestamp).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cell_inference import compute_cell_posteriors
from .dataset import (
    Dataset,
    IngestConfig,
    Normalization,
    ingest_csv,
    normalize,
    truncate_pre_knee,
    write_csv,
)
from .mcmc import McmcConfig
from .models import LINEXP, ModelKind, ModelSpec, least_squares_fit, model_spec
from .study import StudyConfig, run_study, single_draw_trace
from .synth import PopulationTruth, default_time_grid, generate, write_truth

MANIFEST_SCHEMA = 1

DEFAULT_TRUTHS = {
    ModelKind.LINEAR1: ([-0.01], [0.002]),
    ModelKind.LINEAR2: ([99.7, -0.01], [0.3, 0.002]),
    ModelKind.LINEXP: ([-0.005, 800.0, 100.0], [0.001, 60.0, 15.0]),
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(outdir: Path, command: str, argv: list[str],
                   resolved: dict, inputs: list[Path]) -> Path:
    outputs = {
        p.name: _sha256(p)
        for p in sorted(outdir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "argv": argv,
        "resolved_config": resolved,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": outputs,
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",")]


def _add_mcmc_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("sampler")
    group.add_argument("--steps", type=int, default=20_000, help="chain length")
    group.add_argument("--burn-in", type=int, default=5_000, help="discarded prefix")
    group.add_argument("--thin", type=int, default=10, help="keep every n-th draw")
    group.add_argument("--adapt-window", type=int, default=50,
                       help="steps between proposal-scale adaptations during burn-in")
    group.add_argument("--seed", type=int, default=0, help="sampler seed")


def _add_ingest_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("ingestion")
    group.add_argument("--cell-col", default="cell_id")
    group.add_argument("--time-col", default="time")
    group.add_argument("--capacity-col", default="capacity")
    group.add_argument("--nominal", type=float, default=None,
                       help="nominal capacity (same unit as the capacity column)")
    group.add_argument("--min-points", type=int, default=5)
    group.add_argument("--ingest-config", default=None,
                       help="key=value file; flags override its entries")
    group.add_argument("--name", default=None, help="dataset name")
    group.add_argument(
        "--normalization", choices=["auto", "initial", "nominal", "none"],
        default="auto",
        help="auto follows the model; none tags already-percent data as-is",
    )


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker cap; results do not depend on it")
    parser.add_argument("--cache-dir", default=None,
                        help="first-level posterior cache (or set CELLVAR_CACHE)")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip PNG rendering, keep the CSV tables")


def _mcmc_from(args) -> McmcConfig:
    return McmcConfig(n_steps=args.steps, burn_in=args.burn_in, thin=args.thin,
                      seed=args.seed, adapt_window=args.adapt_window)


def _ingest_from(args) -> IngestConfig:
    """File config (if any) supplies defaults; explicit flags override."""
    cfg = IngestConfig.from_file(args.ingest_config) if args.ingest_config \
        else IngestConfig()
    defaults = IngestConfig()
    for attr, value in (
        ("cell_col", args.cell_col),
        ("time_col", args.time_col),
        ("capacity_col", args.capacity_col),
        ("min_points", args.min_points),
    ):
        if value != getattr(defaults, attr):
            setattr(cfg, attr, value)
    if args.nominal is not None:
        cfg.nominal_capacity = args.nominal
    if args.name:
        cfg.name = args.name
    return cfg


def _retag(dataset: Dataset, mode: Normalization) -> Dataset:
    traces = tuple(replace(t, normalization=mode) for t in dataset.traces)
    return replace(dataset, traces=traces)


def _load_normalized(args, spec: ModelSpec) -> tuple[Dataset, Path]:
    data_path = Path(args.data)
    dataset = ingest_csv(data_path, _ingest_from(args))
    if args.normalization == "none":
        dataset = _retag(dataset, spec.required_normalization)
    else:
        mode = (spec.required_normalization if args.normalization == "auto"
                else Normalization(args.normalization))
        if mode is Normalization.NOMINAL and dataset.nominal_capacity is None:
            # percent-scale data normalizes against 100 by definition
            dataset = replace(dataset, nominal_capacity=args.nominal or 100.0)
        dataset = normalize(dataset, mode)
    return dataset, data_path


def cmd_synth(args, argv: list[str]) -> int:
    spec = model_spec(args.model)
    mu_default, sigma_default = DEFAULT_TRUTHS[spec.kind]
    mu_star = _float_list(args.mu_star) if args.mu_star else mu_default
    sigma_star = _float_list(args.sigma_star) if args.sigma_star else sigma_default
    correlation = None
    if args.rho is not None:
        correlation = np.full((spec.param_count, spec.param_count), args.rho)
        np.fill_diagonal(correlation, 1.0)
    truth = PopulationTruth(
        model=spec,
        mu_star=np.asarray(mu_star, dtype=float),
        sigma_star=np.asarray(sigma_star, dtype=float),
        n_cells=args.k,
        noise=args.noise,
        correlation=correlation,
        time_grid=default_time_grid(args.points, args.t_end),
        seed=args.seed,
    )
    dataset, thetas = generate(truth)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(dataset, outdir / "data.csv")
    write_truth(truth, thetas, dataset, outdir / "truth.json")
    resolved = {
        "model": spec.kind.value, "k": args.k, "seed": args.seed,
        "mu_star": mu_star, "sigma_star": sigma_star, "noise": args.noise,
        "rho": args.rho, "points": args.points, "t_end": args.t_end,
    }
    write_manifest(outdir, "synth", argv, resolved, [])
    print(f"wrote {outdir / 'data.csv'} ({dataset.K} cells)")
    return 0


def cmd_fit(args, argv: list[str]) -> int:
    from .report import render_fit_figure, write_fit_summary_csv

    spec = model_spec(args.model)
    dataset, data_path = _load_normalized(args, spec)
    cfg = _mcmc_from(args)
    posteriors = compute_cell_posteriors(
        dataset, spec, cfg, cache_dir=args.cache_dir, threads=args.threads
    )
    outdir = Path(args.out)
    (outdir / "cells").mkdir(parents=True, exist_ok=True)
    for cell_id, post in posteriors.items():
        (outdir / "cells" / f"{cell_id}.json").write_text(post.to_json() + "\n")
    write_fit_summary_csv(posteriors, spec, outdir / "summary.csv")
    if not args.no_figures:
        render_fit_figure(dataset, spec, posteriors, outdir)

    shaky = [cid for cid, post in posteriors.items()
             if not (post.converged and post.ls_converged)]
    if shaky:
        hint = ""
        if spec.kind is ModelKind.LINEXP:
            hint = (" (fitting the knee model to knee-free data is a common"
                    " cause: consider linear1/linear2)")
        print(f"warning: convergence flags raised for cells {shaky}{hint}",
              file=sys.stderr)

    resolved = {
        "model": spec.kind.value, "data": str(data_path),
        "normalization": args.normalization, "seed": args.seed,
        "steps": args.steps, "burn_in": args.burn_in, "thin": args.thin,
        "adapt_window": args.adapt_window, "figures": not args.no_figures,
    }
    write_manifest(outdir, "fit", argv, resolved, [data_path])
    for cell_id, post in posteriors.items():
        mean = ", ".join(
            f"{name}={post.mu[d]:.6g}" for d, name in enumerate(spec.param_names)
        )
        print(f"{cell_id}: {mean} (acceptance {post.acceptance_rate:.2f})")
    return 0


def cmd_study(args, argv: list[str]) -> int:
    from .report import render_study_figures, write_study_tables

    spec = model_spec(args.model)
    dataset, data_path = _load_normalized(args, spec)
    mcmc_cfg = _mcmc_from(args)
    study_cfg = StudyConfig(
        n_repeats=args.repeats,
        subsample_min=args.subsample_min,
        subsample_max=args.subsample_max,
        alpha=args.alpha,
        master_seed=args.master_seed,
        tail_fraction=args.tail_fraction,
    )
    result = run_study(dataset, spec, study_cfg, mcmc_cfg,
                       cache_dir=args.cache_dir, threads=args.threads)
    trace = single_draw_trace(dataset, spec, study_cfg, mcmc_cfg,
                              cache_dir=args.cache_dir, threads=args.threads)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_study_tables(result, trace, outdir)
    if not args.no_figures:
        render_study_figures(result, trace, outdir)
    resolved = {
        "model": spec.kind.value, "data": str(data_path),
        "normalization": args.normalization,
        "repeats": args.repeats, "alpha": args.alpha,
        "subsample_min": args.subsample_min,
        "subsample_max": result.provenance["study"]["subsample_max"],
        "tail_fraction": args.tail_fraction,
        "master_seed": args.master_seed,
        "steps": args.steps, "burn_in": args.burn_in, "thin": args.thin,
        "adapt_window": args.adapt_window, "figures": not args.no_figures,
    }
    write_manifest(outdir, "study", argv, resolved, [data_path])
    print(f"wrote {outdir}", file=sys.stderr)
    required = result.required_n_model
    print(f"required_N={'not-reached' if required is None else required}")
    return 0


def cmd_truncate(args, argv: list[str]) -> int:
    data_path = Path(args.data)
    raw = ingest_csv(data_path, _ingest_from(args))
    inputs = [data_path]
    if args.fits:
        knee = _knee_from_summary(Path(args.fits))
        inputs.append(Path(args.fits))
    else:
        knee = _fit_knees(raw)
    truncated = truncate_pre_knee(raw, knee, min_points=args.keep_min_points)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(truncated, outdir / "pre_knee.csv")
    resolved = {
        "data": str(data_path), "fits": args.fits,
        "keep_min_points": args.keep_min_points,
        "cells_in": raw.K, "cells_out": truncated.K,
    }
    write_manifest(outdir, "truncate", argv, resolved, inputs)
    print(f"wrote {outdir / 'pre_knee.csv'} ({truncated.K}/{raw.K} cells kept)")
    return 0


def _fit_knees(raw: Dataset) -> dict[str, tuple[float, float]]:
    """Quick point fits of the knee model, gated on knee evidence.

    A knee is only trusted when the knee model at least halves the residual
    sum of squares of the straight-line fit; otherwise the knee fit is just
    chasing noise and the cell is kept whole (cutoff beyond the record).
    """
    from .models import LINEAR1, evaluate

    fitted = normalize(raw, Normalization.INITIAL) \
        if raw.normalization is Normalization.RAW else raw
    knee = {}
    for trace in fitted.traces:
        line = least_squares_fit(LINEAR1, trace).theta
        ssr_line = float(np.sum(
            (trace.capacities - evaluate(LINEAR1, line, trace.times)) ** 2
        ))
        kfit = least_squares_fit(LINEXP, trace).theta
        ssr_knee = float(np.sum(
            (trace.capacities - evaluate(LINEXP, kfit, trace.times)) ** 2
        ))
        if ssr_knee < 0.5 * ssr_line:
            knee[trace.cell_id] = (float(kfit[1]), float(kfit[2]))
        else:
            knee[trace.cell_id] = (np.inf, 1.0)
    return knee


def _knee_from_summary(path: Path) -> dict[str, tuple[float, float]]:
    import csv as _csv

    knee = {}
    with path.open(newline="") as fh:
        reader = _csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "t_f_mean" not in fields or "tau_mean" not in fields:
            raise ValueError(
                f"{path}: expected knee-model fit summary with t_f_mean/tau_mean"
            )
        for record in reader:
            knee[record["cell_id"]] = (
                float(record["t_f_mean"]), float(record["tau_mean"])
            )
    return knee


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellvar",
        description="Cell-to-cell variability: population inference and "
                    "required-sample-size studies for capacity-fade data.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--model", required=True,
                         choices=[k.value for k in ModelKind])
    p_synth.add_argument("--k", type=int, default=40, help="number of cells")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--mu-star", default=None, help="comma-separated means")
    p_synth.add_argument("--sigma-star", default=None,
                         help="comma-separated population spreads")
    p_synth.add_argument("--noise", type=float, default=0.1,
                         help="measurement noise, percent capacity")
    p_synth.add_argument("--rho", type=float, default=None,
                         help="uniform off-diagonal population correlation")
    p_synth.add_argument("--points", type=int, default=50, help="check-ups per cell")
    p_synth.add_argument("--t-end", type=float, default=1000.0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_fit = sub.add_parser("fit", help="per-cell posterior fits")
    p_fit.add_argument("--model", required=True,
                       choices=[k.value for k in ModelKind])
    p_fit.add_argument("--data", required=True, help="long-form capacity CSV")
    _add_ingest_flags(p_fit)
    _add_mcmc_flags(p_fit)
    _add_common_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_study = sub.add_parser("study", help="sub-sampling required-N study")
    p_study.add_argument("--model", required=True,
                         choices=[k.value for k in ModelKind])
    p_study.add_argument("--data", required=True)
    p_study.add_argument("--repeats", type=int, default=200)
    p_study.add_argument("--subsample-min", type=int, default=3)
    p_study.add_argument("--subsample-max", type=int, default=None)
    p_study.add_argument("--alpha", type=float, default=0.10)
    p_study.add_argument("--tail-fraction", type=float, default=0.5)
    p_study.add_argument("--master-seed", type=int, default=0)
    _add_ingest_flags(p_study)
    _add_mcmc_flags(p_study)
    _add_common_flags(p_study)
    p_study.set_defaults(func=cmd_study)

    p_trunc = sub.add_parser("truncate", help="extract pre-knee data")
    p_trunc.add_argument("--data", required=True)
    p_trunc.add_argument("--fits", default=None,
                         help="summary.csv from `fit --model linexp`; "
                              "omitted: point fits are computed here")
    p_trunc.add_argument("--out", required=True)
    _add_ingest_flags(p_trunc)
    p_trunc.add_argument("--keep-min-points", type=int, default=4,
                         help="drop truncated traces shorter than this")
    p_trunc.set_defaults(func=cmd_truncate)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args, argv)
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Cell-to-cell variability of battery capacity fade.

Fits empirical fade models to per-cell ageing traces, infers the
population distribution of the model parameters with two-level Bayesian
inference, and determines via a bootstrap sub-sampling study how many
cells must be tested before the population-variability estimate is
stable.
"""

__version__ = "0.1.0"

from .dataset import (
    CapacityTrace,
    DataWarning,
    Dataset,
    IngestConfig,
    IngestError,
    Normalization,
    dataset_hash,
    ingest_csv,
    normalize,
    truncate_pre_knee,
    write_csv,
)
from .mcmc import McmcConfig, derive_seed, effective_sample_size
from .models import (
    LINEAR1,
    LINEAR2,
    LINEXP,
    FitResult,
    ModelKind,
    ModelSpec,
    evaluate,
    least_squares_fit,
    model_spec,
    residuals,
)
from .cell_inference import (
    CellPosterior,
    compute_cell_posteriors,
    log_marginal_likelihood,
    sample_cell_posterior,
    summaries_arrays,
    summarize_gaussian,
)
from .population_inference import (
    PopulationPosterior,
    PopulationPrior,
    SsdSummary,
    log_population_posterior,
    parameter_correlations,
    sample_population_posterior,
    ssd,
)
from .study import (
    SingleDrawTrace,
    StabilityFit,
    StudyConfig,
    StudyError,
    StudyResult,
    draw_subsample,
    fit_stability,
    run_study,
    single_draw_trace,
)
from .synth import PopulationTruth, default_time_grid, generate, write_truth

__all__ = [
    "__version__",
    "CapacityTrace", "DataWarning", "Dataset", "IngestConfig", "IngestError",
    "Normalization", "dataset_hash", "ingest_csv", "normalize",
    "truncate_pre_knee", "write_csv",
    "McmcConfig", "derive_seed", "effective_sample_size",
    "LINEAR1", "LINEAR2", "LINEXP", "FitResult", "ModelKind", "ModelSpec",
    "evaluate", "least_squares_fit", "model_spec", "residuals",
    "CellPosterior", "compute_cell_posteriors", "log_marginal_likelihood",
    "sample_cell_posterior", "summaries_arrays", "summarize_gaussian",
    "PopulationPosterior", "PopulationPrior", "SsdSummary",
    "log_population_posterior", "parameter_correlations",
    "sample_population_posterior", "ssd",
    "SingleDrawTrace", "StabilityFit", "StudyConfig", "StudyError",
    "StudyResult", "draw_subsample", "fit_stability", "run_study",
    "single_draw_trace",
    "PopulationTruth", "default_time_grid", "generate", "write_truth",
]

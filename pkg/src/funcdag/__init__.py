"""funcdag: causal DAG structure learning for nodes carrying multivariate
functional data, via a latent basis-coefficient model fitted with a
regularized EM algorithm under a continuous acyclicity constraint."""

from .core import (
    BlockAdjacency,
    FunctionalDataset,
    ModelParams,
    PosteriorSummary,
    ProblemShape,
    assemble_C,
    compute_W,
    default_mask,
    normalize_ck,
    param_distance,
)
from .em import FitConfig, FitReport, fit, initialize
from .inference import expected_complete_loglik, ffbs_posterior, posterior_direct, prior_covariance
from .mstep import SolverConfig, notears_h, prox_group_lasso, solve_C
from .synth import GroundTruth, SynthConfig, fourier_basis, generate_dataset, sample_er_dag

__version__ = "0.1.0"

__all__ = [
    "BlockAdjacency",
    "FunctionalDataset",
    "ModelParams",
    "PosteriorSummary",
    "ProblemShape",
    "assemble_C",
    "compute_W",
    "default_mask",
    "normalize_ck",
    "param_distance",
    "FitConfig",
    "FitReport",
    "fit",
    "initialize",
    "expected_complete_loglik",
    "ffbs_posterior",
    "posterior_direct",
    "prior_covariance",
    "SolverConfig",
    "notears_h",
    "prox_group_lasso",
    "solve_C",
    "GroundTruth",
    "SynthConfig",
    "fourier_basis",
    "generate_dataset",
    "sample_er_dag",
    "__version__",
]

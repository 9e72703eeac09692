"""Softmax-gated multinomial-logistic mixtures of experts.

Batch MM fitting, mixing-measure merge chains, dendrogram-based selection of
the number of experts, and parameter-recovery diagnostics.
"""

__version__ = "0.1.0"

from .diagnostics import component_errors, rate_slope, tv_discrepancy, voronoi_assign, voronoi_loss
from .experiments import RateConfig, SelectionConfig, run_rate_experiment, run_selection_experiment
from .init import init_from_clustering, init_perturbed_truth
from .mixing import Atom, MergeChain, MixingMeasure, build_chain, dissimilarity, from_theta, merge_pair
from .mm import FitOptions, FitTrace, SingularCurvatureError, fit_gradient_baseline, fit_mm, mm_step
from .model import (
    Dataset,
    InvalidInputError,
    ModelSpec,
    Theta,
    log_likelihood,
    predict_proba,
    reference_truth,
    sample_dataset,
)
from .selection import SelectionReport, criterion_scores, dsc_scores, param_count, sweep_fit

__all__ = [
    "Atom",
    "Dataset",
    "FitOptions",
    "FitTrace",
    "InvalidInputError",
    "MergeChain",
    "MixingMeasure",
    "ModelSpec",
    "RateConfig",
    "SelectionConfig",
    "SelectionReport",
    "SingularCurvatureError",
    "Theta",
    "build_chain",
    "component_errors",
    "criterion_scores",
    "dissimilarity",
    "dsc_scores",
    "fit_gradient_baseline",
    "fit_mm",
    "from_theta",
    "init_from_clustering",
    "init_perturbed_truth",
    "log_likelihood",
    "merge_pair",
    "mm_step",
    "param_count",
    "predict_proba",
    "rate_slope",
    "reference_truth",
    "run_rate_experiment",
    "run_selection_experiment",
    "sample_dataset",
    "sweep_fit",
    "tv_discrepancy",
    "voronoi_assign",
    "voronoi_loss",
]

"""Generative-modeling core: joint encoder-flow training, baselines, sampling."""

from .config import (
    AdaptiveNoiseState,
    PerturbationBatch,
    SCHEMES,
    SchemeConfig,
    TrainRecord,
    interpolant_form,
    perturbation_form,
    sigma_floor,
)
from .models import ModelPair, NetworkConfig, SchemeModels, build_models
from .samplers import edm_euler, edm_sigma_grid, flow_euler
from .schemes import (
    OptimizerSettings,
    Scheme,
    TrainingAborted,
    cdm_sample,
    cdm_train_step,
    cfm_sample,
    cfm_train_step,
    compute_residual_std,
    corrdiff_sample,
    corrdiff_train_step,
    make_scheme,
    regression_predict,
    regression_train_step,
    sfm_sample,
    sfm_train_step,
)
from .runs import TrainSettings, evaluate_run, load_run, run_is_complete, sample_run, train_run

__all__ = [
    "AdaptiveNoiseState",
    "ModelPair",
    "NetworkConfig",
    "OptimizerSettings",
    "PerturbationBatch",
    "SCHEMES",
    "Scheme",
    "SchemeConfig",
    "SchemeModels",
    "TrainRecord",
    "TrainSettings",
    "TrainingAborted",
    "build_models",
    "cdm_sample",
    "cdm_train_step",
    "cfm_sample",
    "cfm_train_step",
    "compute_residual_std",
    "corrdiff_sample",
    "corrdiff_train_step",
    "edm_euler",
    "edm_sigma_grid",
    "evaluate_run",
    "flow_euler",
    "interpolant_form",
    "load_run",
    "make_scheme",
    "perturbation_form",
    "regression_predict",
    "regression_train_step",
    "run_is_complete",
    "sample_run",
    "sfm_sample",
    "sfm_train_step",
    "sigma_floor",
    "train_run",
]

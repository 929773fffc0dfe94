"""Soft-BART ensembles with Bayesian backfitting."""

from .ensemble import (
    ForestConfig,
    ForestTrace,
    SigmaState,
    SoftTree,
    SoftTreeEnsemble,
    backfit_sweep,
    calibrate_sigma_prior,
    cutpoint_grid,
    predict_ensemble,
    soft_path_weight,
    split_probability,
    tree_size_prior,
    update_sigma2,
)

__all__ = [
    "ForestConfig",
    "ForestTrace",
    "SigmaState",
    "SoftTree",
    "SoftTreeEnsemble",
    "backfit_sweep",
    "calibrate_sigma_prior",
    "cutpoint_grid",
    "predict_ensemble",
    "soft_path_weight",
    "split_probability",
    "tree_size_prior",
    "update_sigma2",
]

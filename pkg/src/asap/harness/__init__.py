"""Experiment harness: synthetic cases, replacement study, latency, CLI."""

from .cases import ActivationProfile, AttentionCase, gen_case, load_case_file, save_case_file
from .experiment import EVAL, FIT, ExperimentConfig, FitFailure, RunReport, fit_layers, run_replacement

__all__ = [
    "ActivationProfile",
    "AttentionCase",
    "gen_case",
    "load_case_file",
    "save_case_file",
    "ExperimentConfig",
    "RunReport",
    "FitFailure",
    "fit_layers",
    "run_replacement",
    "FIT",
    "EVAL",
]

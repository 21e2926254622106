"""Amortized doubly-stochastic attention: compile a frozen finite Sinkhorn
layer into sliced-dual prediction followed by entropic c-transforms."""

from .calibration import CompiledLayer, FitDataset, fit_kl, fit_ls, kl_objective
from .ctransform import (
    TransportPlan,
    count_passes,
    gibbs_plan,
    head_output,
    key_ctransform,
    key_normalized_plan,
    reconstruct,
    source_ctransform,
)
from .numerics import SliceBank, center, logsumexp, sample_slice_bank, solve_spd
from .sinkhorn import TeacherConfig, build_kernels, sinkhorn_run, teacher_reference
from .sliced import feature_matrix, slice_potential_1d

__version__ = "0.1.0"

"""Grid-free marker localization and deformation estimation from tilt-series images."""

from .sparsealign import final_cleanup, run_coarse_to_fine, run_sparsealign
from .state import AlignmentResult, LevelSummary, LossRecord, SolverConfig, SolverState
from .steps import (candidate_grid, consolidate, fit_deformation, lmo_objective_map, lmo_select, loss_and_residual,
                    loss_landscape, merge_markers, prune, refine_support, solve_weights)

__all__ = [
    'SolverConfig', 'SolverState', 'LossRecord', 'LevelSummary', 'AlignmentResult',
    'run_sparsealign', 'run_coarse_to_fine', 'final_cleanup',
    'candidate_grid', 'loss_and_residual', 'lmo_select', 'lmo_objective_map', 'solve_weights',
    'prune', 'merge_markers', 'consolidate', 'fit_deformation', 'refine_support', 'loss_landscape',
]

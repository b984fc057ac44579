"""
Marker insertion with block-coordinate descent, at one resolution and
coarse-to-fine across a resolution schedule.
"""

import logging
import time
from dataclasses import replace
from typing import Callable, Optional, Tuple

from ..errors import DataError, SparseAlignError
from ..evaluate import EvaluationGrid, global_error, marker_error
from ..model.types import DeformationModel, MarkerSet, TiltGeometry, TiltStack
from ..multires import ResolutionSchedule, downsample_stack
from .state import AlignmentResult, LevelSummary, SolverConfig, SolverState
from .steps import (candidate_grid, consolidate, fit_deformation, lmo_select, loss_and_residual, make_forward,
                    merge_markers, prune, refine_support, solve_weights)

logger = logging.getLogger(__name__)

IterationCallback = Callable[[int, int, SolverState], None]
Truth = Tuple[MarkerSet, DeformationModel]


def _with_context(error: SparseAlignError, level: int, iteration: int) -> SparseAlignError:
    wrapped = type(error)(f"level {level}, iteration {iteration}: {error}")
    wrapped.__cause__ = error
    return wrapped


def run_sparsealign(data: TiltStack, config: SolverConfig, init_state: Optional[SolverState] = None,
                    geometry: Optional[TiltGeometry] = None, level: int = 0,
                    on_iteration: Optional[IterationCallback] = None) -> SolverState:
    """
    Alternate one-marker insertion with block-coordinate descent over
    weights, deformation and locations until the loss stalls or `n_max`
    outer iterations have run.

    Args:
        data: Measured stack on the working grid.
        config: Solver settings; `loss_tolerance` is the stopping threshold.
        init_state: Warm start. A cold start uses no markers and zero deformation.
        geometry: Full-resolution geometry; when given, the data grid must be its decimation.
        level: Resolution level index recorded in the loss history.
        on_iteration: Called as on_iteration(level, iteration, state) after every outer iteration.

    Returns:
        The final SolverState. `iteration` holds the number of outer iterations run.
    """
    if geometry is not None:
        expected = geometry.coarsen(data.decimation).detector_shape
        if tuple(expected) != tuple(data.geometry.detector_shape):
            raise DataError(
                f"Data grid {data.geometry.detector_shape} at eta={data.eta} does not match "
                f"geometry decimated to {tuple(expected)}"
            )
    geometry = data.geometry
    forward = make_forward(data, config)
    grid = candidate_grid(geometry.sample_box, config.grid_shape(geometry.dim))
    refine_box = config.refinement_box(geometry)
    decimation = data.decimation

    if init_state is None:
        state = SolverState(MarkerSet.empty(geometry.dim), config.initial_model(geometry))
    else:
        state = SolverState(init_state.markers, init_state.model, list(init_state.loss_history))
    state.level = level
    state.iteration = 0

    def current_loss() -> float:
        return forward.loss_and_gradients(state.markers, state.model, data.frames, wrt=()).loss

    loss, residual = loss_and_residual(state, data, forward)
    state.record(decimation, 'initial', loss)
    previous = loss
    converged = False

    for iteration in range(1, config.n_max + 1):
        state.iteration = iteration
        try:
            location = lmo_select(residual, state, grid, forward)
            state.markers = state.markers.append(location, 0.0)

            for _ in range(config.bcd_rounds):
                state.markers = state.markers.with_weights(
                    solve_weights(state, data, forward, config.weight_tolerance))
                after_weights = current_loss()
                state.record(decimation, 'weights', after_weights)

                state.markers = consolidate(state, data, config, after_weights, forward)
                state.record(decimation, 'prune', current_loss())

                if iteration >= config.fit_deformation_from_iteration:
                    state.model = fit_deformation(state, data, config, forward)
                    state.record(decimation, 'deformation', current_loss())

                state.markers = refine_support(state, data, refine_box, config, forward)
                state.record(decimation, 'support', current_loss())

            loss, residual = loss_and_residual(state, data, forward)
        except SparseAlignError as e:
            raise _with_context(e, level, iteration)

        logger.info(f"level {level} (eta=1/{decimation}) iteration {iteration}: "
                    f"loss={loss:.6e}, markers={len(state.markers)}")
        if on_iteration is not None:
            on_iteration(level, iteration, state)

        if abs(previous - loss) < config.loss_tolerance:
            converged = True
            break
        previous = loss

    if not converged:
        logger.warning(f"level {level}: reached n_max={config.n_max} without meeting the loss tolerance")
    state.converged = converged
    return state


def run_coarse_to_fine(data_full: TiltStack, geometry: TiltGeometry, schedule: ResolutionSchedule,
                       config: SolverConfig, truth: Optional[Truth] = None,
                       evaluation_grid: Optional[EvaluationGrid] = None,
                       on_iteration: Optional[IterationCallback] = None) -> AlignmentResult:
    """
    Run the solver at every level of the schedule, each level warm-started
    from the previous one, then merge and prune the markers once more.

    When `truth` holds the ground-truth markers and deformation, the
    deformation errors at the markers and over the evaluation grid are
    recorded after every outer iteration.
    """
    if tuple(data_full.geometry.detector_shape) != tuple(geometry.coarsen(data_full.decimation).detector_shape):
        raise DataError(f"Stack shape {data_full.geometry.detector_shape} does not match the geometry")
    error_trace = []
    if truth is not None and evaluation_grid is None:
        evaluation_grid = EvaluationGrid.default(geometry.sample_box, coarse=True)

    def track(level: int, iteration: int, state: SolverState) -> None:
        if truth is not None:
            gt_markers, gt_model = truth
            error_trace.append({
                'level': level,
                'iteration': iteration,
                'n_markers': len(state.markers),
                'loss': state.last_loss,
                'e_markers': marker_error(gt_model, state.model, gt_markers),
                'e_global': global_error(gt_model, state.model, evaluation_grid),
            })
        if on_iteration is not None:
            on_iteration(level, iteration, state)

    if truth is not None:
        gt_markers, gt_model = truth
        start_model = config.initial_model(geometry)
        error_trace.append({
            'level': -1, 'iteration': 0, 'n_markers': 0, 'loss': None,
            'e_markers': marker_error(gt_model, start_model, gt_markers),
            'e_global': global_error(gt_model, start_model, evaluation_grid),
        })

    state = None
    levels = []
    for level, (decimation, tolerance) in enumerate(zip(schedule.decimations, schedule.tolerances)):
        started = time.time()
        data = downsample_stack(data_full, f"1/{decimation}")
        logger.info(f"Level {level}: eta=1/{decimation}, detector {data.geometry.detector_shape}, "
                    f"tolerance {tolerance:g}")
        entry = len(state.loss_history) if state is not None else 0
        state = run_sparsealign(data, replace(config, loss_tolerance=tolerance), state,
                                level=level, on_iteration=track)
        level_records = state.loss_history[entry:]
        levels.append(LevelSummary(level, decimation, state.iteration, level_records[0].loss,
                                   level_records[-1].loss, state.converged, len(state.markers)))
        logger.info(f"Level {level} done in {time.time() - started:.2f}s: {state.iteration} iterations, "
                    f"loss {level_records[0].loss:.6e} -> {level_records[-1].loss:.6e}")

    final_cleanup(state, data, config)
    return AlignmentResult(state.markers, state.model, state.loss_history, levels, error_trace)


def final_cleanup(state: SolverState, data: TiltStack, config: SolverConfig) -> SolverState:
    """
    Merge coincident markers and drop low-weight ones once more at the end
    of a run, then re-solve the weights and locations of the survivors.

    Unlike the per-iteration step this may raise the loss; it is recorded
    as 'final_prune'. Does nothing when no marker is merged or pruned.
    """
    radius = config.merge_radius * data.geometry.shape_sigma
    merged = merge_markers(state.markers, radius)
    survivors = prune(SolverState(merged, state.model), config.prune_threshold)
    if len(survivors) == len(state.markers):
        return state
    forward = make_forward(data, config)
    state.markers = survivors
    if len(survivors):
        state.markers = survivors.with_weights(solve_weights(state, data, forward, config.weight_tolerance))
        state.markers = refine_support(state, data, config.refinement_box(data.geometry), config, forward)
    final_loss, _ = loss_and_residual(state, data, forward)
    state.record(data.decimation, 'final_prune', final_loss)
    return state

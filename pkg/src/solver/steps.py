"""
Individual steps of the alignment loop: residual, linear minimization over
candidate locations, weight solve, pruning, deformation fit and off-grid
support refinement.

Every step takes the current SolverState and returns new values; none of them
mutates the state it is given.
"""

import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize, sparse, spatial
from scipy.sparse import csgraph

from ..errors import DataError, OptimizationError
from ..model.projection import ForwardModel
from ..model.types import DeformationModel, MarkerSet, TiltStack
from .state import SolverConfig, SolverState

logger = logging.getLogger(__name__)

# Relative slack when comparing an optimizer's exit loss against its entry loss
LOSS_SLACK = 1e-12


def make_forward(data: TiltStack, config: SolverConfig) -> ForwardModel:
    """Renderer on the grid of `data` with the solver's blob, truncation and threading settings."""
    return ForwardModel.for_stack(data, sigma_mode=config.sigma_mode, truncate=config.truncate,
                                  num_threads=config.num_threads, chunk_size=config.chunk_size)


def candidate_grid(box: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """
    Cell-centred nodes of a regular grid over the (d, 2) box, in C order so
    that row i is the node with linear index i.
    """
    box = np.asarray(box, dtype=float)
    axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for (lo, hi), n in zip(box, shape)]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _check_model_grid(state: SolverState, data: TiltStack, forward: ForwardModel) -> None:
    """Reject markers of the wrong dimension and data not on the renderer's grid."""
    if state.markers.dim != data.geometry.dim:
        raise DataError(f"{state.markers.dim}D markers cannot be compared with {data.geometry.dim}D data")
    if data.frames.shape != forward.frame_shape or data.decimation != forward.decimation:
        raise DataError(
            f"Data grid {data.frames.shape} at eta={data.eta} does not match the model grid "
            f"{forward.frame_shape} at eta=1/{forward.decimation}"
        )


def loss_and_residual(state: SolverState, data: TiltStack,
                      forward: Optional[ForwardModel] = None) -> Tuple[float, TiltStack]:
    """Squared L2 loss and the residual render(state) - data."""
    forward = forward or ForwardModel.for_stack(data)
    _check_model_grid(state, data, forward)
    rendered = forward.render_frames(state.markers.locations, state.markers.weights, state.model)
    residual = rendered - data.frames
    return float(np.sum(residual ** 2)), data.with_frames(residual)


def lmo_objective_map(residual: TiltStack, state: SolverState, grid: np.ndarray,
                      forward: Optional[ForwardModel] = None) -> np.ndarray:
    """2 <residual, psi(r)> for a unit-weight marker at every grid node, in grid order."""
    forward = forward or ForwardModel.for_stack(residual)
    return 2.0 * forward.unit_inner_products(residual.frames, grid, state.model)


def lmo_select(residual: TiltStack, state: SolverState, grid: np.ndarray,
               forward: Optional[ForwardModel] = None) -> np.ndarray:
    """
    Pick the next marker location.

    Args:
        residual: Current render minus data, on the working grid
        state: Current estimate; its deformation displaces the candidates
        grid: Candidate locations, one per row
        forward: Renderer to reuse, built from the residual when omitted

    Returns:
        The grid node with the most negative inner product against the
        residual; ties go to the lowest index.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.shape[0] == 0:
        raise DataError("Candidate grid is empty")
    scores = lmo_objective_map(residual, state, grid, forward)
    index = int(np.argmin(scores))
    logger.debug(f"LMO picked node {index} at {grid[index].tolist()} (score {scores[index]:.6e})")
    return grid[index].copy()


def solve_weights(state: SolverState, data: TiltStack, forward: Optional[ForwardModel] = None,
                  tolerance: float = 1e-10) -> np.ndarray:
    """
    Box-constrained least squares for the weights in [0, 1] with locations
    and deformation fixed.

    The quadratic is reduced to its normal equations and solved with bounded
    variable least squares on the square-root factor of the Gram matrix.
    Directions in the Gram null space (coincident markers) are dropped, which
    leaves the minimizer well defined in the image.

    Args:
        state: Current markers and deformation; only the weights change
        data: Measured stack on the working grid
        forward: Renderer to reuse, built from the data when omitted
        tolerance: BVLS convergence tolerance

    Returns:
        Weights in [0, 1], one per marker. The entry weights are returned
        when the solve would raise the loss.
    """
    forward = forward or ForwardModel.for_stack(data)
    markers = state.markers
    if len(markers) == 0:
        return np.zeros(0)
    gram, products = forward.normal_equations(markers.locations, state.model, data.frames)

    eigvals, eigvecs = linalg.eigh(gram)
    keep = eigvals > max(eigvals.max(), 0.0) * 1e-12
    if not np.any(keep):
        return np.zeros(len(markers))
    root = np.sqrt(eigvals[keep])
    factor = root[:, None] * eigvecs[:, keep].T
    target = (eigvecs[:, keep].T @ products) / root

    solution = optimize.lsq_linear(factor, target, bounds=(0.0, 1.0), method='bvls', tol=tolerance)
    weights = np.clip(solution.x, 0.0, 1.0)

    def quadratic(w):
        return float(w @ gram @ w - 2.0 * products @ w)

    entry = np.asarray(markers.weights, dtype=float)
    if quadratic(weights) > quadratic(entry) + LOSS_SLACK * max(1.0, abs(quadratic(entry))):
        logger.warning("Weight solve did not improve on the entry weights; keeping them")
        return entry.copy()
    return weights


def prune(state: SolverState, threshold: float) -> MarkerSet:
    """Drop markers whose weight is strictly below the threshold."""
    if not 0.0 <= threshold < 1.0:
        raise DataError(f"Prune threshold must lie in [0, 1), got {threshold}")
    keep = state.markers.weights >= threshold
    if not np.all(keep):
        logger.debug(f"Pruned {int(np.sum(~keep))} of {len(state.markers)} markers below {threshold}")
    return state.markers.select(keep)


def merge_markers(markers: MarkerSet, radius: float) -> MarkerSet:
    """
    Fuse markers that lie within `radius` of each other, directly or
    through a chain of neighbours.

    Each group becomes one marker at the weight-averaged location carrying
    the summed weight, clipped to 1. Groups keep the position of their first
    member, so the result is deterministic.

    Args:
        markers: Current marker estimate.
        radius: Fusion distance in sample units; zero disables merging.

    Returns:
        The merged MarkerSet, or `markers` itself when nothing is close.
    """
    if radius <= 0 or len(markers) < 2:
        return markers
    pairs = spatial.cKDTree(markers.locations).query_pairs(radius, output_type='ndarray')
    if pairs.size == 0:
        return markers
    n = len(markers)
    adjacency = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = csgraph.connected_components(adjacency, directed=False)
    _, first = np.unique(labels, return_index=True)

    locations, weights = [], []
    for group in labels[np.sort(first)]:
        members = np.flatnonzero(labels == group)
        member_weights = markers.weights[members]
        total = float(member_weights.sum())
        if total > 0:
            locations.append(member_weights @ markers.locations[members] / total)
        else:
            locations.append(markers.locations[members].mean(axis=0))
        weights.append(min(total, 1.0))
    logger.debug(f"Merged {n} markers into {len(weights)} within radius {radius:g}")
    return MarkerSet(np.asarray(locations), weights)


def consolidate(state: SolverState, data: TiltStack, config: SolverConfig, entry_loss: float,
                forward: Optional[ForwardModel] = None) -> MarkerSet:
    """
    Merge and prune the markers, then re-solve the weights, as one step
    that never raises the loss.

    Merge-then-prune is tried first, then prune alone. The first candidate
    whose re-solved loss does not exceed `entry_loss` is kept. When neither
    qualifies, the current markers are returned unchanged and the low-weight
    ones wait for the final prune.
    """
    forward = forward or make_forward(data, config)
    markers = state.markers
    radius = config.merge_radius * data.geometry.shape_sigma
    candidates = []
    for candidate in (prune(SolverState(merge_markers(markers, radius), state.model), config.prune_threshold),
                      prune(state, config.prune_threshold)):
        if len(candidate) != len(markers) and not any(_same_markers(candidate, seen) for seen in candidates):
            candidates.append(candidate)

    slack = LOSS_SLACK * max(1.0, abs(entry_loss))
    for candidate in candidates:
        trial = SolverState(candidate, state.model)
        candidate = candidate.with_weights(solve_weights(trial, data, forward, config.weight_tolerance))
        loss = forward.loss_and_gradients(candidate, state.model, data.frames, wrt=()).loss
        if loss <= entry_loss + slack:
            return candidate
        logger.debug(f"Dropping to {len(candidate)} markers would raise the loss "
                     f"{entry_loss:.6e} -> {loss:.6e}; trying the next candidate")
    if candidates:
        logger.debug(f"Keeping {len(markers)} markers until the final prune")
    return markers


def _same_markers(first: MarkerSet, second: MarkerSet) -> bool:
    """True when both sets hold identical locations and weights in the same order."""
    return (first.locations.shape == second.locations.shape
            and np.array_equal(first.locations, second.locations)
            and np.array_equal(first.weights, second.weights))


def _check_finite(gradient: np.ndarray, labels: Sequence[str], what: str) -> None:
    """Raise OptimizationError naming the first parameter with a non-finite gradient entry."""
    bad = np.flatnonzero(~np.isfinite(gradient))
    if bad.size:
        raise OptimizationError(f"Non-finite {what} gradient for {labels[bad[0]]}")


def _bounded_descent(objective: Callable[[np.ndarray], Tuple[float, np.ndarray]], x0: np.ndarray,
                     bounds: np.ndarray, config: SolverConfig, what: str) -> np.ndarray:
    """L-BFGS-B from x0 that falls back to x0 when the exit loss is not lower."""
    x0 = np.clip(x0, bounds[:, 0], bounds[:, 1])
    entry_loss, _ = objective(x0)
    result = optimize.minimize(
        objective, x0, jac=True, method='L-BFGS-B', bounds=bounds,
        options={'maxfun': config.lbfgs_max_evals, 'maxiter': config.lbfgs_max_evals,
                 'maxcor': config.lbfgs_memory, 'ftol': config.lbfgs_ftol, 'gtol': config.lbfgs_gtol},
    )
    if not np.all(np.isfinite(result.x)) or result.fun > entry_loss:
        logger.warning(f"{what} fit did not lower the loss ({result.message}); keeping entry values")
        return x0
    if not result.success:
        logger.debug(f"{what} fit stopped early: {result.message}")
    return np.asarray(result.x, dtype=float)


def fit_deformation(state: SolverState, data: TiltStack, config: SolverConfig,
                    forward: Optional[ForwardModel] = None) -> DeformationModel:
    """Bounded quasi-Newton descent on the active deformation parameters, locations and weights fixed."""
    forward = forward or make_forward(data, config)
    model, markers = state.model, state.markers
    if model.n_parameters == 0 or len(markers) == 0:
        return model
    labels = model.parameter_labels()
    bound = config.deformation_bound(data.geometry)

    def objective(vector):
        result = forward.loss_and_gradients(markers, model.with_parameters(vector), data.frames,
                                            wrt=('parameters',))
        _check_finite(result.parameters, labels, 'deformation')
        return result.loss, result.parameters

    bounds = np.tile([-bound, bound], (model.n_parameters, 1))
    return model.with_parameters(_bounded_descent(objective, model.parameter_vector(), bounds,
                                                  config, 'Deformation'))


def refine_support(state: SolverState, data: TiltStack, box: np.ndarray, config: SolverConfig,
                   forward: Optional[ForwardModel] = None) -> MarkerSet:
    """
    Move all marker locations jointly off the grid within the box, weights
    and deformation fixed.

    Args:
        state: Current markers and deformation
        data: Measured stack on the working grid
        box: (d, 2) bounds for every location, usually the widened sample box
        config: Quasi-Newton budget and tolerances
        forward: Renderer to reuse

    Returns:
        The moved markers, or the entry markers when the descent would raise the loss
    """
    forward = forward or make_forward(data, config)
    markers, model = state.markers, state.model
    if len(markers) == 0:
        return markers
    box = np.asarray(box, dtype=float)
    outside = markers.outside(box)
    if outside:
        logger.debug(f"Markers {outside} start outside the refinement box; clipping")
    axes = 'xz' if markers.dim == 2 else 'xyz'
    labels = [f"r[{j}]_{axes[k]}" for j in range(len(markers)) for k in range(markers.dim)]

    def objective(flat):
        result = forward.loss_and_gradients(markers.with_locations(flat), model, data.frames,
                                            wrt=('locations',))
        gradient = result.locations.ravel()
        _check_finite(gradient, labels, 'location')
        return result.loss, gradient

    bounds = np.tile(box, (len(markers), 1))
    return markers.with_locations(_bounded_descent(objective, markers.locations.ravel(), bounds,
                                                   config, 'Support'))


def loss_landscape(markers: MarkerSet, model: DeformationModel, data: TiltStack, parameter_index: int,
                   values: Sequence[float], config: Optional[SolverConfig] = None) -> np.ndarray:
    """Image loss as one deformation parameter sweeps through `values`, the others held fixed."""
    forward = make_forward(data, config or SolverConfig())
    if not 0 <= parameter_index < model.n_parameters:
        raise DataError(f"Parameter index {parameter_index} outside 0..{model.n_parameters - 1}")
    base = model.parameter_vector()
    losses = []
    for value in values:
        vector = base.copy()
        vector[parameter_index] = value
        losses.append(forward.loss_and_gradients(markers, model.with_parameters(vector), data.frames,
                                                 wrt=()).loss)
    return np.asarray(losses)

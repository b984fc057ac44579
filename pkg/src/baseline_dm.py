"""
Doming-model baseline: fit marker locations and deformation coefficients to
labelled projected-marker traces by nonlinear least squares.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from .errors import DataError
from .model.deformation import monomial_values, spatial_jacobians, time_powers
from .model.projection import projected_locations
from .model.types import DeformationModel, MarkerSet, TiltGeometry, component_index

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarkerTraces:
    """Projected location of marker j in frame t, positions[t, j], with a validity mask."""

    positions: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.ndim == 2:
            positions = positions[:, :, None]
        valid = np.array(self.valid, dtype=bool)
        if positions.ndim != 3 or valid.shape != positions.shape[:2]:
            raise DataError(f"Trace positions {positions.shape} and mask {valid.shape} do not agree")
        if not np.all(np.isfinite(positions[valid])):
            raise DataError("Valid trace entries must be finite")
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'valid', valid)

    @classmethod
    def complete(cls, positions: np.ndarray) -> 'MarkerTraces':
        """Traces with every entry observed."""
        positions = np.asarray(positions, dtype=float)
        return cls(positions, np.ones(positions.shape[:2], dtype=bool))

    @property
    def n_tilts(self) -> int:
        return self.positions.shape[0]

    @property
    def n_markers(self) -> int:
        return self.positions.shape[1]

    @property
    def n_observations(self) -> int:
        """Number of scalar detector coordinates that enter the fit."""
        return int(self.valid.sum()) * self.positions.shape[2]


@dataclass
class DmResult:
    """Fitted markers and deformation, the final trace loss and the number of loss evaluations."""
    markers: MarkerSet
    model: DeformationModel
    residual: float
    evaluations: int

    def to_dict(self):
        return {
            'markers': self.markers.to_dict(),
            'model': self.model.to_dict(),
            'residual': self.residual,
            'evaluations': self.evaluations,
        }


def generate_traces(markers: MarkerSet, model: DeformationModel, geometry: TiltGeometry) -> MarkerTraces:
    """Exact projected locations of every marker in every frame."""
    positions = np.stack([projected_locations(markers, model, geometry, t) for t in range(geometry.n_tilts)])
    return MarkerTraces.complete(positions)


class TraceProblem:
    """Residuals and Jacobian of the trace loss over stacked (locations, parameters)."""

    def __init__(self, traces: MarkerTraces, geometry: TiltGeometry, template: DeformationModel):
        """
        Bind traces to a geometry.

        Args:
            traces: Labelled projected locations, one column per marker
            geometry: Tilt angles, times and detector axes of the traces
            template: Deformation model fixing degrees, scale and active components
        """
        if traces.n_tilts != geometry.n_tilts:
            raise DataError(f"{traces.n_tilts} trace frames for {geometry.n_tilts} tilts")
        if traces.positions.shape[2] != geometry.dim - 1:
            raise DataError(f"{traces.positions.shape[2]}-D trace entries for a {geometry.dim}D geometry")
        self.traces = traces
        self.geometry = geometry
        self.template = template
        self.dim = geometry.dim
        self.n_markers = traces.n_markers
        self.matrices = geometry.projection_matrices()
        self.mask = np.repeat(traces.valid[:, :, None], self.dim - 1, axis=2).ravel()

    @property
    def n_unknowns(self) -> int:
        return self.n_markers * self.dim + self.template.n_parameters

    def unpack(self, x: np.ndarray) -> Tuple[MarkerSet, DeformationModel]:
        """Split a stacked vector into unit-weight markers and a model."""
        split = self.n_markers * self.dim
        locations = x[:split].reshape(self.n_markers, self.dim)
        return (MarkerSet(locations, np.ones(self.n_markers)),
                self.template.with_parameters(x[split:]))

    @staticmethod
    def pack(markers: MarkerSet, model: DeformationModel) -> np.ndarray:
        """Inverse of unpack: marker locations first, then the active parameters."""
        return np.concatenate([markers.locations.ravel(), model.parameter_vector()])

    def _positions(self, locations: np.ndarray, model: DeformationModel) -> np.ndarray:
        mono = monomial_values(model, locations)
        tpow = time_powers(model, self.geometry.times)
        return locations[None] + np.einsum('tz,nm,zmk->tnk', tpow, mono, model.coeffs)

    def residuals(self, x: np.ndarray) -> np.ndarray:
        """Predicted minus observed detector coordinates over the valid entries."""
        markers, model = self.unpack(x)
        predicted = np.einsum('tac,tmc->tma', self.matrices, self._positions(markers.locations, model))
        return (predicted - self.traces.positions).ravel()[self.mask]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """
        Analytic Jacobian of `residuals`, rows in the same order.

        Marker columns only couple to their own marker's rows; parameter
        columns follow the order of `DeformationModel.parameter_vector`.
        """
        markers, model = self.unpack(x)
        locations = markers.locations
        T, M, d = self.geometry.n_tilts, self.n_markers, self.dim
        jac_r = spatial_jacobians(model, locations, self.geometry.times) + np.eye(d)[None, None]
        dq_dr = np.einsum('tac,tmci->tmai', self.matrices, jac_r)

        full = np.zeros((T, M, d - 1, self.n_unknowns))
        for j in range(M):
            full[:, j, :, j * d:(j + 1) * d] = dq_dr[:, j]

        mono = monomial_values(model, locations)
        tpow = time_powers(model, self.geometry.times)
        active = list(model.active_components)
        # parameter order (zeta, monomial, component) as in parameter_vector()
        dq_dp = np.einsum('tz,mn,tac->tmaznc', tpow, mono, self.matrices[:, :, active])
        full[:, :, :, M * d:] = dq_dp.reshape(T, M, d - 1, -1)
        return full.reshape(-1, self.n_unknowns)[self.mask]

    def loss(self, x: np.ndarray) -> float:
        return float(np.sum(self.residuals(x) ** 2))

    def loss_and_gradient(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        """Trace loss and its gradient 2 J^T r."""
        residuals = self.residuals(x)
        return float(residuals @ residuals), 2.0 * self.jacobian(x).T @ residuals


def initial_locations(traces: MarkerTraces, geometry: TiltGeometry) -> np.ndarray:
    """Back-project each marker's first valid trace entry onto the z = 0 plane."""
    theta = np.deg2rad(geometry.angles_deg)
    locations = np.zeros((traces.n_markers, geometry.dim))
    for j in range(traces.n_markers):
        frames = np.flatnonzero(traces.valid[:, j])
        if frames.size == 0:
            raise DataError(f"Marker {j} has no valid trace entries")
        t = frames[0]
        q = traces.positions[t, j]
        if geometry.dim == 2:
            locations[j] = (q[0] / np.cos(theta[t]), 0.0)
        elif geometry.tilt_axis == 'y':
            locations[j] = (q[0] / np.cos(theta[t]), q[1], 0.0)
        else:
            locations[j] = (q[0], q[1] / np.cos(theta[t]), 0.0)
    return locations


def dm_fit(traces: MarkerTraces, geometry: TiltGeometry, spatial_degree: int = 2, temporal_degree: int = 1,
           components: Sequence[str] = ('z',), coordinate_scale: Optional[Sequence[float]] = None,
           bound_factor: float = 10.0, max_evaluations: int = 2000) -> DmResult:
    """
    Fit marker locations and the active deformation coefficients to the traces.

    A bounded quasi-Newton pass from the back-projected start is polished by a
    trust-region least-squares solve. Constant offsets that the traces cannot
    tell apart are reported in the fit, not removed.

    Args:
        traces: Labelled projected locations
        geometry: Tilt angles, times and detector axes of the traces
        spatial_degree: Highest total degree of the deformation monomials
        temporal_degree: Highest power of t
        components: Output directions to fit, by name
        coordinate_scale: Per-axis scale of the polynomial inputs
        bound_factor: Coefficient bound in units of the largest box half width
        max_evaluations: Budget of each of the two solves
    """
    active = tuple(component_index(geometry.dim, c) for c in components)
    template = DeformationModel.zeros(geometry.dim, spatial_degree, temporal_degree,
                                      coordinate_scale, active)
    problem = TraceProblem(traces, geometry, template)
    if problem.n_unknowns > traces.n_observations:
        raise DataError(
            f"Underdetermined trace fit: {problem.n_unknowns} unknowns "
            f"for {traces.n_observations} observations"
        )

    half_width = float(np.max(geometry.fov_half_width()))
    box = np.array(geometry.sample_box, dtype=float)
    margin = bound_factor * half_width
    lower = np.concatenate([np.tile(box[:, 0] - margin, traces.n_markers),
                            np.full(template.n_parameters, -margin)])
    upper = np.concatenate([np.tile(box[:, 1] + margin, traces.n_markers),
                            np.full(template.n_parameters, margin)])
    start = MarkerSet(np.clip(initial_locations(traces, geometry), box[:, 0], box[:, 1]),
                      np.ones(traces.n_markers))
    x0 = problem.pack(start, template)
    logger.info(f"DM fit: {traces.n_markers} markers, {template.n_parameters} deformation parameters, "
                f"{traces.n_observations} observations")

    first = optimize.minimize(problem.loss_and_gradient, x0, jac=True, method='L-BFGS-B',
                              bounds=list(zip(lower, upper)),
                              options={'maxfun': max_evaluations, 'maxiter': max_evaluations,
                                       'ftol': 1e-15, 'gtol': 1e-12})
    polished = optimize.least_squares(problem.residuals, np.clip(first.x, lower, upper), jac=problem.jacobian,
                                      bounds=(lower, upper), method='trf', x_scale='jac',
                                      ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=max_evaluations)
    best = polished.x if problem.loss(polished.x) <= problem.loss(first.x) else first.x
    markers, model = problem.unpack(best)
    residual = problem.loss(best)
    logger.info(f"DM fit finished: residual {residual:.3e} after {first.nfev + polished.nfev} evaluations")
    return DmResult(markers, model, residual, int(first.nfev + polished.nfev))


def trace_loss(traces: MarkerTraces, markers: MarkerSet, model: DeformationModel, geometry: TiltGeometry) -> float:
    """Sum of squared trace residuals of an estimate, on the traces' valid entries."""
    problem = TraceProblem(traces, geometry, model)
    return problem.loss(problem.pack(markers, model))


def trace_loss_landscape(traces: MarkerTraces, markers: MarkerSet, model: DeformationModel,
                         geometry: TiltGeometry, parameter_index: int, values: Sequence[float]) -> np.ndarray:
    """Trace loss as one deformation parameter sweeps through `values`."""
    if not 0 <= parameter_index < model.n_parameters:
        raise DataError(f"Parameter index {parameter_index} outside 0..{model.n_parameters - 1}")
    problem = TraceProblem(traces, geometry, model)
    base = problem.pack(markers, model)
    offset = len(markers) * geometry.dim + parameter_index
    losses = []
    for value in values:
        x = base.copy()
        x[offset] = value
        losses.append(problem.loss(x))
    return np.asarray(losses)

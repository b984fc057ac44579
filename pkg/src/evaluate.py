"""
Comparison of estimated against ground-truth deformation fields and marker sets.

All deformation errors are squared norms of the displacement difference at
t = 1, the end of the tilt series.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import DataError
from .model.deformation import displacements
from .model.types import DeformationModel, MarkerSet

logger = logging.getLogger(__name__)

DEFAULT_GRID_SHAPES = {2: (1000, 1000), 3: (100, 100, 100)}
COARSE_GRID_SHAPES = {2: (100, 100), 3: (25, 25, 25)}
DEFAULT_CHUNK = 1 << 18


@dataclass(frozen=True)
class EvaluationGrid:
    """Regular grid including the box corners; nodes are enumerated in C order."""

    box: np.ndarray
    shape: Tuple[int, ...]

    def __post_init__(self):
        box = np.array(self.box, dtype=float)
        shape = tuple(int(n) for n in self.shape)
        if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] != len(shape):
            raise DataError(f"Evaluation box {box.tolist()} does not match grid shape {shape}")
        if any(n < 2 for n in shape) or np.any(box[:, 0] >= box[:, 1]):
            raise DataError(f"Evaluation grid needs >= 2 nodes per axis and a proper box, got {shape}")
        object.__setattr__(self, 'box', box)
        object.__setattr__(self, 'shape', shape)

    @classmethod
    def default(cls, box: np.ndarray, coarse: bool = False) -> 'EvaluationGrid':
        """Default grid for a box: 1000^2 in 2D, 100^3 in 3D; the coarse variant is for per-iteration tracking."""
        dim = np.asarray(box).shape[0]
        return cls(box, (COARSE_GRID_SHAPES if coarse else DEFAULT_GRID_SHAPES)[dim])

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        """Distance between neighbouring nodes along each axis."""
        return (self.box[:, 1] - self.box[:, 0]) / (np.asarray(self.shape) - 1)

    def axes(self) -> List[np.ndarray]:
        """Node coordinates along each axis, corners included."""
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.box, self.shape)]

    def chunks(self, chunk_size: int = DEFAULT_CHUNK) -> Iterator[np.ndarray]:
        """Node coordinates in consecutive blocks of at most `chunk_size` rows."""
        axes = self.axes()
        for start in range(0, self.size, chunk_size):
            flat = np.arange(start, min(start + chunk_size, self.size))
            index = np.unravel_index(flat, self.shape)
            yield np.stack([axes[k][index[k]] for k in range(self.dim)], axis=-1)

    def nearest_index(self, points: np.ndarray) -> Tuple[np.ndarray, ...]:
        """Index tuple of the grid node nearest each point, clipped to the grid."""
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        steps = np.rint((points - self.box[:, 0]) / self.spacing).astype(int)
        steps = np.clip(steps, 0, np.asarray(self.shape) - 1)
        return tuple(steps[:, k] for k in range(self.dim))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the closed box."""
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        return np.all((points >= self.box[:, 0]) & (points <= self.box[:, 1]), axis=1)


def _check_models(gt: DeformationModel, est: DeformationModel) -> None:
    if gt.dim != est.dim:
        raise DataError(f"Cannot compare a {gt.dim}D ground truth with a {est.dim}D estimate")


def squared_difference(gt: DeformationModel, est: DeformationModel, points: np.ndarray) -> np.ndarray:
    """||D_1^gt(r) - D_1^est(r)||^2 at each point."""
    _check_models(gt, est)
    diff = displacements(gt, points, [1.0])[0] - displacements(est, points, [1.0])[0]
    return np.sum(diff ** 2, axis=1)


def deformation_error_field(gt: DeformationModel, est: DeformationModel, grid: EvaluationGrid) -> np.ndarray:
    """Squared displacement difference at t = 1 on every grid node, shaped like the grid."""
    _check_models(gt, est)
    if grid.dim != gt.dim:
        raise DataError(f"{grid.dim}D grid for {gt.dim}D models")
    values = np.concatenate([squared_difference(gt, est, chunk) for chunk in grid.chunks()])
    return values.reshape(grid.shape)


def global_error(gt: DeformationModel, est: DeformationModel, grid: EvaluationGrid) -> float:
    """Grid mean of the error field without materializing it."""
    _check_models(gt, est)
    total = 0.0
    for chunk in grid.chunks():
        total += float(np.sum(squared_difference(gt, est, chunk)))
    return total / grid.size


def marker_error(gt: DeformationModel, est: DeformationModel, gt_markers: MarkerSet) -> float:
    """Mean squared displacement difference evaluated exactly at the ground-truth markers."""
    if len(gt_markers) == 0:
        raise DataError("No ground-truth markers to evaluate at")
    return float(np.mean(squared_difference(gt, est, gt_markers.locations)))


@dataclass
class MarkerMatching:
    """Injective pairing of estimated to ground-truth markers."""
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    missed: List[int] = field(default_factory=list)
    spurious: List[int] = field(default_factory=list)
    radius: float = 0.0

    @property
    def cost(self) -> float:
        """Sum of the matched distances."""
        return float(sum(distance for _, _, distance in self.pairs))

    def to_dict(self) -> Dict:
        return {
            'radius': self.radius,
            'pairs': [{'estimate': e, 'ground_truth': g, 'distance': d} for e, g, d in self.pairs],
            'missed': list(self.missed),
            'spurious': list(self.spurious),
        }


def match_markers(est: MarkerSet, gt: MarkerSet, radius: float) -> MarkerMatching:
    """Greedy matching by ascending distance; pairs further apart than `radius` are not formed."""
    if not radius > 0:
        raise DataError(f"Matching radius must be positive, got {radius}")
    if len(est) and len(gt) and est.dim != gt.dim:
        raise DataError(f"Cannot match {est.dim}D estimates to {gt.dim}D ground truth")
    matching = MarkerMatching(radius=float(radius))
    if len(est) and len(gt):
        distances = np.linalg.norm(est.locations[:, None, :] - gt.locations[None, :, :], axis=2)
        order = np.argsort(distances, axis=None, kind='stable')
        used_est, used_gt = set(), set()
        for flat in order:
            e, g = np.unravel_index(flat, distances.shape)
            if distances[e, g] > radius:
                break
            if e in used_est or g in used_gt:
                continue
            used_est.add(e)
            used_gt.add(g)
            matching.pairs.append((int(e), int(g), float(distances[e, g])))
    matched_est = {e for e, _, _ in matching.pairs}
    matched_gt = {g for _, g, _ in matching.pairs}
    matching.missed = [g for g in range(len(gt)) if g not in matched_gt]
    matching.spurious = [e for e in range(len(est)) if e not in matched_est]
    return matching


@dataclass
class ErrorReport:
    """Global and at-marker deformation errors plus the marker matching."""
    e_global: float
    e_markers: float
    grid_shape: Tuple[int, ...]
    grid_spacing: Tuple[float, ...]
    marker_mode: str = 'nearest'
    matching: Optional[MarkerMatching] = None
    error_field: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> Dict:
        data = {
            'e_global': self.e_global,
            'e_markers': self.e_markers,
            'grid_shape': list(self.grid_shape),
            'grid_spacing': list(self.grid_spacing),
            'marker_mode': self.marker_mode,
        }
        if self.matching is not None:
            data['matching'] = self.matching.to_dict()
            data['matched'] = len(self.matching.pairs)
            data['missed'] = len(self.matching.missed)
            data['spurious'] = len(self.matching.spurious)
        return data


def summarize_errors(error_field: np.ndarray, gt_markers: MarkerSet, grid: EvaluationGrid) -> ErrorReport:
    """Grid mean of the field and its mean at the grid nodes nearest each ground-truth marker."""
    error_field = np.asarray(error_field, dtype=float)
    if error_field.shape != grid.shape:
        raise DataError(f"Error field shape {error_field.shape} does not match grid {grid.shape}")
    inside = grid.contains(gt_markers.locations)
    if not np.all(inside):
        bad = [int(i) for i in np.flatnonzero(~inside)]
        raise DataError(f"Ground-truth markers {bad} lie outside the evaluation grid")
    e_markers = float(np.mean(error_field[grid.nearest_index(gt_markers.locations)])) if len(gt_markers) else 0.0
    return ErrorReport(float(np.mean(error_field)), e_markers, grid.shape, tuple(grid.spacing.tolist()),
                       'nearest', error_field=error_field)


def build_error_report(gt_model: DeformationModel, est_model: DeformationModel, gt_markers: MarkerSet,
                       est_markers: Optional[MarkerSet], grid: EvaluationGrid,
                       radius: Optional[float] = None) -> ErrorReport:
    """
    Error field, exact at-marker error and (when estimates are given) marker matching.

    Args:
        gt_model: Ground-truth deformation
        est_model: Estimated deformation of the same dimension
        gt_markers: Ground-truth markers, all inside the grid
        est_markers: Estimated markers; matching is skipped when None
        grid: Evaluation grid for the error field and the global error
        radius: Matching radius in length units; matching is skipped when None
    """
    error_field = deformation_error_field(gt_model, est_model, grid)
    report = summarize_errors(error_field, gt_markers, grid)
    report.e_markers = marker_error(gt_model, est_model, gt_markers)
    report.marker_mode = 'exact'
    if est_markers is not None and radius is not None:
        report.matching = match_markers(est_markers, gt_markers, radius)
        logger.info(f"Matched {len(report.matching.pairs)}/{len(gt_markers)} markers within {radius:g}; "
                    f"{len(report.matching.spurious)} spurious")
    logger.info(f"E_global={report.e_global:.6e}, E_markers={report.e_markers:.6e}")
    return report


def field_image(error_field: np.ndarray) -> np.ndarray:
    """2D view of an error field: the field itself, or its central slice normal to the last axis."""
    error_field = np.asarray(error_field)
    if error_field.ndim == 2:
        return error_field
    return error_field[..., error_field.shape[-1] // 2]

"""Value types for markers, deformation fields, tilt geometry and projection stacks."""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations_with_replacement
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import DataError

logger = logging.getLogger(__name__)

AXIS_NAMES = {2: ('x', 'z'), 3: ('x', 'y', 'z')}


def _frozen_array(values: Any, dtype=float) -> np.ndarray:
    """Copy values into a read-only array."""
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


def monomial_exponents(dim: int, degree: int) -> List[Tuple[int, ...]]:
    """
    Exponent tuples of all monomials in `dim` variables up to total `degree`.

    Ordered by total degree, then with higher powers of earlier axes first,
    e.g. 2D degree 2 gives 1, x, z, x^2, xz, z^2.
    """
    exponents = []
    for total in range(degree + 1):
        for combo in combinations_with_replacement(range(dim), total):
            exponents.append(tuple(combo.count(axis) for axis in range(dim)))
    return exponents


def component_index(dim: int, name: str) -> int:
    """Map an axis name ('x', 'y', 'z') to its index for the given dimension."""
    names = AXIS_NAMES[dim]
    if name not in names:
        raise DataError(f"Axis '{name}' does not exist in {dim}D (axes: {', '.join(names)})")
    return names.index(name)


@dataclass(frozen=True)
class MarkerSet:
    """Point-source marker configuration: locations at t=0 and weights in [0, 1]."""

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        """Validate shapes, finiteness and the [0, 1] weight range; store read-only copies."""
        locations = np.array(self.locations, dtype=float)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if locations.ndim != 2 or locations.shape[1] not in (2, 3):
            raise DataError(f"Marker locations must have shape (M, 2) or (M, 3), got {locations.shape}")
        if locations.shape[0] != weights.shape[0]:
            raise DataError(
                f"Marker count mismatch: {locations.shape[0]} locations vs {weights.shape[0]} weights"
            )
        if not np.all(np.isfinite(locations)) or not np.all(np.isfinite(weights)):
            raise DataError("Marker locations and weights must be finite")
        if np.any(weights < 0.0) or np.any(weights > 1.0):
            raise DataError(f"Marker weights must lie in [0, 1], got range [{weights.min()}, {weights.max()}]")
        object.__setattr__(self, 'locations', _frozen_array(locations))
        object.__setattr__(self, 'weights', _frozen_array(weights))

    @classmethod
    def empty(cls, dim: int) -> 'MarkerSet':
        """Marker set with no markers in `dim` dimensions."""
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    def __len__(self) -> int:
        return self.locations.shape[0]

    def append(self, location: Sequence[float], weight: float = 0.0) -> 'MarkerSet':
        """
        New marker set with one more marker at the end.

        Args:
            location: Marker location at t = 0, length `dim`
            weight: Initial weight; a freshly selected marker starts at 0

        Returns:
            A new MarkerSet; this one is unchanged
        """
        location = np.asarray(location, dtype=float).reshape(1, self.dim)
        return MarkerSet(np.vstack([self.locations, location]), np.append(self.weights, weight))

    def select(self, keep: np.ndarray) -> 'MarkerSet':
        """Subset of markers (boolean mask or index array), order preserved."""
        return MarkerSet(self.locations[keep], self.weights[keep])

    def with_weights(self, weights: Sequence[float]) -> 'MarkerSet':
        """Same locations with new weights, which are validated like any others."""
        return MarkerSet(self.locations, weights)

    def with_locations(self, locations: np.ndarray) -> 'MarkerSet':
        """Same weights with new locations, reshaped to (M, d)."""
        return MarkerSet(np.asarray(locations, dtype=float).reshape(self.locations.shape), self.weights)

    def outside(self, box: np.ndarray) -> List[int]:
        """Indices of markers lying outside the (d, 2) bounding box."""
        box = np.asarray(box, dtype=float)
        bad = np.any((self.locations < box[:, 0]) | (self.locations > box[:, 1]), axis=1)
        return [int(i) for i in np.flatnonzero(bad)]

    def to_dict(self) -> Dict:
        return {
            'dimension': self.dim,
            'locations': self.locations.tolist(),
            'weights': self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'MarkerSet':
        """Inverse of to_dict; 'dimension' defaults to 2."""
        dim = int(data.get('dimension', 2))
        locations = np.asarray(data.get('locations', []), dtype=float).reshape(-1, dim)
        return cls(locations, data.get('weights', []))


@dataclass(frozen=True)
class DeformationModel:
    """
    Time-dependent polynomial deformation field.

    coeffs[zeta - 1, m, k] multiplies monomial m of the scaled coordinates
    (x/s_x, ..., z/s_z) times t**zeta in output direction k. There is no
    zeta = 0 term, so the field vanishes at t = 0.
    """

    dim: int
    spatial_degree: int
    temporal_degree: int
    coeffs: np.ndarray
    coordinate_scale: np.ndarray
    active_components: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise DataError(f"Deformation dimension must be 2 or 3, got {self.dim}")
        if self.spatial_degree < 0:
            raise DataError(f"Spatial degree must be >= 0, got {self.spatial_degree}")
        if self.temporal_degree < 1:
            raise DataError(f"Temporal degree must be >= 1, got {self.temporal_degree}")
        n_mono = len(monomial_exponents(self.dim, self.spatial_degree))
        expected = (self.temporal_degree, n_mono, self.dim)
        coeffs = np.array(self.coeffs, dtype=float)
        if coeffs.shape != expected:
            raise DataError(f"Coefficient array must have shape {expected}, got {coeffs.shape}")
        scale = np.array(self.coordinate_scale, dtype=float).reshape(-1)
        if scale.shape != (self.dim,) or np.any(scale <= 0):
            raise DataError(f"Coordinate scale must be {self.dim} positive numbers, got {scale.tolist()}")
        active = tuple(sorted(set(int(c) for c in self.active_components))) or tuple(range(self.dim))
        if any(c < 0 or c >= self.dim for c in active):
            raise DataError(f"Active components {active} out of range for {self.dim}D")
        object.__setattr__(self, 'coeffs', _frozen_array(coeffs))
        object.__setattr__(self, 'coordinate_scale', _frozen_array(scale))
        object.__setattr__(self, 'active_components', active)

    @classmethod
    def zeros(cls, dim: int, spatial_degree: int = 2, temporal_degree: int = 1,
              coordinate_scale: Optional[Sequence[float]] = None,
              active_components: Sequence[int] = ()) -> 'DeformationModel':
        """
        Model with all coefficients zero.

        Args:
            dim: Spatial dimension, 2 or 3
            spatial_degree: Highest total degree of the monomials
            temporal_degree: Highest power of t
            coordinate_scale: Per-axis scale s applied to r before the monomials (ones when omitted)
            active_components: Output directions the solver may change
        """
        n_mono = len(monomial_exponents(dim, spatial_degree))
        scale = np.ones(dim) if coordinate_scale is None else coordinate_scale
        return cls(dim, spatial_degree, temporal_degree, np.zeros((temporal_degree, n_mono, dim)),
                   scale, tuple(active_components))

    @property
    def exponents(self) -> List[Tuple[int, ...]]:
        """Monomial exponent tuples in storage order."""
        return monomial_exponents(self.dim, self.spatial_degree)

    @property
    def n_parameters(self) -> int:
        """Number of free coefficients, i.e. those of the active components."""
        return self.temporal_degree * len(self.exponents) * len(self.active_components)

    def _index(self, exponents: Sequence[int], zeta: int, component: int) -> Tuple[int, int, int]:
        exponents = tuple(int(e) for e in exponents)
        try:
            m = self.exponents.index(exponents)
        except ValueError:
            raise DataError(f"Monomial {exponents} not in a degree-{self.spatial_degree} {self.dim}D model")
        if not 1 <= zeta <= self.temporal_degree:
            raise DataError(f"Temporal power {zeta} outside 1..{self.temporal_degree}")
        return zeta - 1, m, component

    def coefficient(self, exponents: Sequence[int], zeta: int = 1, component: int = -1) -> float:
        """Coefficient of the monomial with `exponents` times t**zeta in direction `component` (default: last axis)."""
        component = component % self.dim
        return float(self.coeffs[self._index(exponents, zeta, component)])

    def with_coefficient(self, exponents: Sequence[int], zeta: int, component: int,
                         value: float) -> 'DeformationModel':
        """Copy of the model with one coefficient replaced."""
        component = component % self.dim
        coeffs = np.array(self.coeffs)
        coeffs[self._index(exponents, zeta, component)] = value
        return self.with_coeffs(coeffs)

    def with_coeffs(self, coeffs: np.ndarray) -> 'DeformationModel':
        """Copy of the model with a full coefficient array of the same shape."""
        return DeformationModel(self.dim, self.spatial_degree, self.temporal_degree, coeffs,
                                self.coordinate_scale, self.active_components)

    def parameter_vector(self) -> np.ndarray:
        """Free coefficients (active components only), flattened."""
        return np.array(self.coeffs[:, :, list(self.active_components)]).ravel()

    def with_parameters(self, vector: np.ndarray) -> 'DeformationModel':
        """Inverse of parameter_vector: a copy with the active coefficients replaced."""
        coeffs = np.array(self.coeffs)
        active = list(self.active_components)
        coeffs[:, :, active] = np.asarray(vector, dtype=float).reshape(
            self.temporal_degree, len(self.exponents), len(active))
        return self.with_coeffs(coeffs)

    def parameter_labels(self) -> List[str]:
        """Readable label per entry of parameter_vector, used in gradient error messages."""
        names = AXIS_NAMES[self.dim]
        labels = []
        for zeta in range(1, self.temporal_degree + 1):
            for exps in self.exponents:
                monomial = ' '.join(f"{names[a]}^{e}" for a, e in enumerate(exps))
                for c in self.active_components:
                    labels.append(f"P[{monomial} t^{zeta}]_{names[c]}")
        return labels

    def zeroed(self) -> 'DeformationModel':
        """Copy with every coefficient set to zero, active components kept."""
        return self.with_coeffs(np.zeros_like(self.coeffs))

    def to_dict(self) -> Dict:
        names = AXIS_NAMES[self.dim]
        return {
            'dimension': self.dim,
            'spatial_degree': self.spatial_degree,
            'temporal_degree': self.temporal_degree,
            'coordinate_scale': self.coordinate_scale.tolist(),
            'active_components': [names[c] for c in self.active_components],
            'exponents': [list(e) for e in self.exponents],
            'coeffs': self.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'DeformationModel':
        """Inverse of to_dict. Active components may be given by name or index."""
        dim = int(data['dimension'])
        active = [component_index(dim, c) if isinstance(c, str) else int(c)
                  for c in data.get('active_components', [])]
        return cls(dim, int(data['spatial_degree']), int(data['temporal_degree']),
                   np.asarray(data['coeffs'], dtype=float), data['coordinate_scale'], tuple(active))


@dataclass(frozen=True)
class TiltGeometry:
    """
    Acquisition geometry of a tilt series.

    Sample coordinates are (x, z) in 2D and (x, y, z) in 3D. The detector has
    one axis in 2D and two in 3D; `detector_origin` holds the coordinate of
    the centre of pixel 0 along each detector axis.
    """

    angles_deg: np.ndarray
    times: np.ndarray
    detector_shape: Tuple[int, ...]
    pixel_size: float
    shape_sigma: float
    sample_box: np.ndarray
    tilt_axis: str = 'y'
    detector_origin: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        angles = np.array(self.angles_deg, dtype=float).reshape(-1)
        times = np.array(self.times, dtype=float).reshape(-1)
        shape = tuple(int(n) for n in self.detector_shape)
        if len(shape) not in (1, 2) or any(n < 1 for n in shape):
            raise DataError(f"Detector shape must be (N_d,) or (N_x, N_y) with positive sizes, got {shape}")
        if angles.size == 0 or angles.shape != times.shape:
            raise DataError(f"Need one time per tilt angle: {angles.size} angles, {times.size} times")
        steps = np.diff(angles)
        if angles.size > 1 and not (np.all(steps > 0) or np.all(steps < 0)):
            raise DataError("Tilt angles must be strictly monotone")
        if np.any(np.diff(times) <= 0) or times.min() < 0.0 or times.max() > 1.0:
            raise DataError("Tilt times must be strictly increasing within [0, 1]")
        if not self.pixel_size > 0:
            raise DataError(f"Pixel size must be positive, got {self.pixel_size}")
        if not self.shape_sigma > 0:
            raise DataError(f"Shape function width must be positive, got {self.shape_sigma}")
        if self.tilt_axis not in ('x', 'y'):
            raise DataError(f"Tilt axis must be 'x' or 'y', got {self.tilt_axis!r}")
        dim = len(shape) + 1
        box = np.array(self.sample_box, dtype=float)
        if box.shape != (dim, 2) or np.any(box[:, 0] >= box[:, 1]):
            raise DataError(f"Sample box must be {dim} (low, high) pairs, got {box.tolist()}")
        if self.detector_origin is None:
            origin = tuple(-(n - 1) / 2.0 * float(self.pixel_size) for n in shape)
        else:
            origin = tuple(float(o) for o in self.detector_origin)
            if len(origin) != len(shape):
                raise DataError(f"Detector origin needs {len(shape)} values, got {len(origin)}")
        object.__setattr__(self, 'angles_deg', _frozen_array(angles))
        object.__setattr__(self, 'times', _frozen_array(times))
        object.__setattr__(self, 'detector_shape', shape)
        object.__setattr__(self, 'pixel_size', float(self.pixel_size))
        object.__setattr__(self, 'shape_sigma', float(self.shape_sigma))
        object.__setattr__(self, 'sample_box', _frozen_array(box))
        object.__setattr__(self, 'detector_origin', origin)

    @staticmethod
    def linear_schedule(n_tilts: int, start: float = -70.0, stop: float = 70.0,
                        endpoint: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """Equispaced angles with constant tilt speed, t_i = i / (N - 1)."""
        angles = np.linspace(start, stop, n_tilts, endpoint=endpoint)
        times = np.arange(n_tilts) / max(n_tilts - 1, 1)
        return angles, times

    @property
    def dim(self) -> int:
        return len(self.detector_shape) + 1

    @property
    def n_tilts(self) -> int:
        return self.angles_deg.size

    def pixel_centers(self, axis: int = 0) -> np.ndarray:
        """Coordinates of the pixel centres along one detector axis."""
        return self.detector_origin[axis] + np.arange(self.detector_shape[axis]) * self.pixel_size

    def coarsen(self, factor: int) -> 'TiltGeometry':
        """Geometry of the grid that keeps every `factor`-th pixel starting at index 0."""
        factor = int(factor)
        if factor < 1:
            raise DataError(f"Decimation factor must be a positive integer, got {factor}")
        shape = tuple(int(math.ceil(n / factor)) for n in self.detector_shape)
        return TiltGeometry(self.angles_deg, self.times, shape, self.pixel_size * factor,
                            self.shape_sigma, self.sample_box, self.tilt_axis, self.detector_origin)

    def projection_matrices(self) -> np.ndarray:
        """Parallel-beam projection matrices A_theta, shape (N_theta, d - 1, d)."""
        theta = np.deg2rad(self.angles_deg)
        cos, sin = np.cos(theta), np.sin(theta)
        if self.dim == 2:
            return np.stack([cos, sin], axis=-1)[:, None, :]
        matrices = np.zeros((self.n_tilts, 2, 3))
        if self.tilt_axis == 'y':
            matrices[:, 0, 0] = cos
            matrices[:, 0, 2] = sin
            matrices[:, 1, 1] = 1.0
        else:
            matrices[:, 0, 0] = 1.0
            matrices[:, 1, 1] = cos
            matrices[:, 1, 2] = sin
        return matrices

    def fov_half_width(self) -> np.ndarray:
        """Half extents of the sample box per axis."""
        return 0.5 * (self.sample_box[:, 1] - self.sample_box[:, 0])

    def to_dict(self) -> Dict:
        return {
            'dimension': self.dim,
            'angles_deg': self.angles_deg.tolist(),
            'times': self.times.tolist(),
            'detector_shape': list(self.detector_shape),
            'pixel_size': self.pixel_size,
            'shape_sigma': self.shape_sigma,
            'sample_box': self.sample_box.tolist(),
            'tilt_axis': self.tilt_axis,
            'detector_origin': list(self.detector_origin),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TiltGeometry':
        """Inverse of to_dict; tilt axis and detector origin are optional."""
        return cls(data['angles_deg'], data['times'], tuple(data['detector_shape']),
                   data['pixel_size'], data['shape_sigma'], data['sample_box'],
                   data.get('tilt_axis', 'y'), data.get('detector_origin'))


@dataclass(frozen=True)
class TiltStack:
    """Projection frames on a (possibly decimated) detector grid; eta = 1 / decimation."""

    frames: np.ndarray
    geometry: TiltGeometry
    decimation: int = 1

    def __post_init__(self):
        frames = np.array(self.frames, dtype=float)
        expected = (self.geometry.n_tilts,) + tuple(self.geometry.detector_shape)
        if frames.shape != expected:
            raise DataError(f"Frames have shape {frames.shape}, geometry expects {expected}")
        if int(self.decimation) < 1:
            raise DataError(f"Decimation must be a positive integer, got {self.decimation}")
        object.__setattr__(self, 'frames', _frozen_array(frames))
        object.__setattr__(self, 'decimation', int(self.decimation))

    @property
    def eta(self) -> Fraction:
        """Downsampling factor as a fraction, 1/decimation."""
        return Fraction(1, self.decimation)

    @property
    def n_tilts(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> 'TiltStack':
        """Stack on the same grid with other frames."""
        return TiltStack(frames, self.geometry, self.decimation)

    def zeros_like(self) -> 'TiltStack':
        return self.with_frames(np.zeros_like(self.frames))

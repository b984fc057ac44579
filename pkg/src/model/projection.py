"""
Forward operator: renders a marker configuration into projection frames.

Each marker projects to a Gaussian blob centred at
q_{t,j} = A_theta_t (r_j + D_t(P, r_j)) on the detector. Blobs are
peak-normalized, so a unit-weight marker attains a value of 1 at its centre
on a full-resolution grid.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Tuple

import numpy as np

from ..errors import DataError
from .deformation import monomial_values, spatial_jacobians, time_powers, displacements
from .types import DeformationModel, MarkerSet, TiltGeometry, TiltStack

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATE = 6.0


class SigmaMode(Enum):
    """How blob width and amplitude follow the anti-aliasing filter on coarse grids."""
    CONSISTENT = "consistent"
    FIXED = "fixed"


@dataclass
class ImageGradients:
    """Squared image loss and its gradients (None when not requested)."""
    loss: float
    locations: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    parameters: Optional[np.ndarray] = None


class ForwardModel:
    """
    Renderer bound to one detector grid.

    `geometry` describes the grid the frames live on; `decimation` is the
    integer factor between that grid and the full-resolution detector. On
    coarse grids the consistent mode widens the blob to
    sqrt(tau_f^2 + tau_a^2), tau_a = decimation/2 fine pixels, and scales its
    peak by (tau_f / sigma)^(d-1), which is what the Gaussian anti-aliasing
    filter does to full-resolution data.
    """

    def __init__(self, geometry: TiltGeometry, decimation: int = 1,
                 sigma_mode: SigmaMode = SigmaMode.CONSISTENT,
                 truncate: Optional[float] = DEFAULT_TRUNCATE, num_threads: int = 1,
                 chunk_size: int = 512):
        """
        Bind the renderer to a detector grid.

        Args:
            geometry: Geometry of the grid the frames live on
            decimation: Factor between this grid and the full-resolution detector
            sigma_mode: Whether coarse grids widen the blob (consistent) or keep it (fixed)
            truncate: Blob support in multiples of sigma; None renders the full Gaussian
            num_threads: Worker threads for the candidate scan
            chunk_size: Candidates per work unit in the candidate scan
        """
        if int(decimation) < 1:
            raise DataError(f"Decimation must be a positive integer, got {decimation}")
        self.geometry = geometry
        self.decimation = int(decimation)
        self.sigma_mode = SigmaMode(sigma_mode)
        self.truncate = truncate
        self.num_threads = max(1, int(num_threads))
        self.chunk_size = max(1, int(chunk_size))

        tau_f = geometry.shape_sigma
        fine_pixel = geometry.pixel_size / self.decimation
        self.tau_a = 0.5 * self.decimation * fine_pixel if self.decimation > 1 else 0.0
        if self.sigma_mode is SigmaMode.CONSISTENT:
            self.sigma = math.sqrt(tau_f ** 2 + self.tau_a ** 2)
            self.amplitude = (tau_f / self.sigma) ** (geometry.dim - 1)
        else:
            self.sigma = tau_f
            self.amplitude = 1.0

        self.matrices = geometry.projection_matrices()
        self.centers = [geometry.pixel_centers(axis) for axis in range(geometry.dim - 1)]

    @classmethod
    def for_stack(cls, stack: TiltStack, **kwargs) -> 'ForwardModel':
        """Renderer on the grid of an existing stack."""
        return cls(stack.geometry, stack.decimation, **kwargs)

    @property
    def frame_shape(self) -> Tuple[int, ...]:
        return (self.geometry.n_tilts,) + tuple(self.geometry.detector_shape)

    # ------------------------------------------------------------------
    # Geometry
    # ------------------------------------------------------------------

    def positions(self, locations: np.ndarray, model: Optional[DeformationModel]) -> np.ndarray:
        """Displaced marker positions r + D_t(P, r), shape (N_theta, M, d)."""
        locations = np.asarray(locations, dtype=float).reshape(-1, self.geometry.dim)
        if model is None:
            return np.broadcast_to(locations, (self.geometry.n_tilts,) + locations.shape).copy()
        return locations[None, :, :] + displacements(model, locations, self.geometry.times)

    def project(self, locations: np.ndarray, model: Optional[DeformationModel]) -> np.ndarray:
        """Projected locations q_{t,j}, shape (N_theta, M, d - 1)."""
        return np.einsum('tac,tmc->tma', self.matrices, self.positions(locations, model))

    def _profiles(self, q: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """
        Per detector axis: Gaussian factors and (pixel - q) offsets, each (N_theta, M, N_axis).

        With truncation, the exponential is only evaluated inside the
        +-truncate*sigma window around each projected centre; the factors
        are exactly zero elsewhere.
        """
        profiles = []
        for axis, centers in enumerate(self.centers):
            diff = centers[None, None, :] - q[:, :, axis, None]
            if self.truncate is None:
                gauss = np.exp(-0.5 * (diff / self.sigma) ** 2)
            else:
                gauss = np.zeros_like(diff)
                window = np.abs(diff) <= self.truncate * self.sigma
                gauss[window] = np.exp(-0.5 * (diff[window] / self.sigma) ** 2)
            profiles.append((gauss, diff))
        return profiles

    # ------------------------------------------------------------------
    # Rendering
    # ------------------------------------------------------------------

    def render_frames(self, locations: np.ndarray, weights: np.ndarray,
                      model: Optional[DeformationModel]) -> np.ndarray:
        """Frames of markers with the given locations and weights, shape (N_theta, *detector_shape)."""
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if weights.size == 0:
            return np.zeros(self.frame_shape)
        profiles = self._profiles(self.project(locations, model))
        if len(profiles) == 1:
            frames = np.einsum('m,tmx->tx', weights, profiles[0][0])
        else:
            frames = np.einsum('tmx,tmy->txy', profiles[0][0] * weights[None, :, None], profiles[1][0])
        return self.amplitude * frames

    def render(self, markers: MarkerSet, model: Optional[DeformationModel]) -> TiltStack:
        frames = self.render_frames(markers.locations, markers.weights, model)
        return TiltStack(frames, self.geometry, self.decimation)

    # ------------------------------------------------------------------
    # Inner products
    # ------------------------------------------------------------------

    def _residual_products(self, frames: np.ndarray, profiles) -> Tuple[np.ndarray, List[np.ndarray]]:
        """
        <frames_t, blob_{t,m}> per tilt and marker, plus the partial
        contractions needed for location gradients.
        """
        if len(profiles) == 1:
            gauss = profiles[0][0]
            return np.einsum('tx,tmx->tm', frames, gauss), [frames]
        gx, gy = profiles[0][0], profiles[1][0]
        along_x = np.einsum('txy,tmy->tmx', frames, gy)
        along_y = np.einsum('txy,tmx->tmy', frames, gx)
        return np.einsum('tmx,tmx->tm', along_x, gx), [along_x, along_y]

    def unit_inner_products(self, frames: np.ndarray, locations: np.ndarray,
                            model: Optional[DeformationModel]) -> np.ndarray:
        """
        <frames, psi(r_c)> for unit-weight markers at each candidate location.

        Candidates are processed in chunks, optionally on a thread pool; the
        results are assembled in candidate order.
        """
        locations = np.asarray(locations, dtype=float).reshape(-1, self.geometry.dim)
        frames = np.asarray(frames, dtype=float)
        chunks = [locations[i:i + self.chunk_size] for i in range(0, locations.shape[0], self.chunk_size)]

        def evaluate(chunk: np.ndarray) -> np.ndarray:
            products, _ = self._residual_products(frames, self._profiles(self.project(chunk, model)))
            return self.amplitude * products.sum(axis=0)

        if self.num_threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.num_threads) as pool:
                results = list(pool.map(evaluate, chunks))
        else:
            results = [evaluate(chunk) for chunk in chunks]
        return np.concatenate(results) if results else np.zeros(0)

    def normal_equations(self, locations: np.ndarray, model: Optional[DeformationModel],
                         data: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Gram matrix of unit responses and their inner products with the data."""
        profiles = self._profiles(self.project(locations, model))
        per_tilt = None
        for gauss, _ in profiles:
            overlap = np.einsum('tix,tjx->tij', gauss, gauss)
            per_tilt = overlap if per_tilt is None else per_tilt * overlap
        gram = self.amplitude ** 2 * per_tilt.sum(axis=0)
        products, _ = self._residual_products(np.asarray(data, dtype=float), profiles)
        return gram, self.amplitude * products.sum(axis=0)

    # ------------------------------------------------------------------
    # Loss and gradients
    # ------------------------------------------------------------------

    def loss_and_gradients(self, markers: MarkerSet, model: DeformationModel, data: np.ndarray,
                           wrt: Iterable[str] = ('locations', 'weights', 'parameters')) -> ImageGradients:
        """
        Squared L2 image loss sum_t ||render_t - data_t||^2 and its analytic
        gradients with respect to marker locations, weights and the active
        deformation parameters.
        """
        wrt = set(wrt)
        data = np.asarray(data, dtype=float)
        if data.shape != self.frame_shape:
            raise DataError(f"Data shape {data.shape} does not match the model grid {self.frame_shape}")
        if len(markers) == 0:
            result = ImageGradients(float(np.sum(data ** 2)))
            if 'locations' in wrt:
                result.locations = np.zeros((0, self.geometry.dim))
            if 'weights' in wrt:
                result.weights = np.zeros(0)
            if 'parameters' in wrt:
                result.parameters = np.zeros(model.n_parameters)
            return result

        weights = markers.weights
        profiles = self._profiles(self.project(markers.locations, model))
        if len(profiles) == 1:
            frames = np.einsum('m,tmx->tx', weights, profiles[0][0])
        else:
            frames = np.einsum('tmx,tmy->txy', profiles[0][0] * weights[None, :, None], profiles[1][0])
        residual = self.amplitude * frames - data
        result = ImageGradients(float(np.sum(residual ** 2)))
        if not wrt:
            return result

        products, partials = self._residual_products(residual, profiles)
        if 'weights' in wrt:
            result.weights = 2.0 * self.amplitude * products.sum(axis=0)
        if not wrt & {'locations', 'parameters'}:
            return result

        # dL/dq[t, m, axis]
        scale = 2.0 * self.amplitude * weights[None, :] / self.sigma ** 2
        grad_q = np.zeros(products.shape + (len(profiles),))
        if len(profiles) == 1:
            gauss, diff = profiles[0]
            grad_q[:, :, 0] = np.einsum('tx,tmx->tm', partials[0], gauss * diff)
        else:
            for axis, (gauss, diff) in enumerate(profiles):
                grad_q[:, :, axis] = np.einsum('tmx,tmx->tm', partials[axis], gauss * diff)
        grad_q *= scale[:, :, None]

        grad_p = np.einsum('tma,tac->tmc', grad_q, self.matrices)
        if 'locations' in wrt:
            jac = spatial_jacobians(model, markers.locations, self.geometry.times)
            result.locations = grad_p.sum(axis=0) + np.einsum('tmk,tmki->mi', grad_p, jac)
        if 'parameters' in wrt:
            mono = monomial_values(model, markers.locations)
            tpow = time_powers(model, self.geometry.times)
            full = np.einsum('tmk,tz,mn->znk', grad_p, tpow, mono)
            result.parameters = full[:, :, list(model.active_components)].ravel()
        return result


def projected_locations(markers: MarkerSet, model: DeformationModel, geometry: TiltGeometry,
                        frame_index: int) -> np.ndarray:
    """q_{t,j} for one frame, shape (M, d - 1)."""
    if not 0 <= frame_index < geometry.n_tilts:
        raise DataError(f"Frame index {frame_index} outside 0..{geometry.n_tilts - 1}")
    locations = markers.locations
    displaced = locations + displacements(model, locations, [geometry.times[frame_index]])[0]
    return displaced @ geometry.projection_matrices()[frame_index].T


def render_stack(markers: MarkerSet, model: DeformationModel, geometry: TiltGeometry,
                 decimation: int = 1, sigma_mode: SigmaMode = SigmaMode.CONSISTENT,
                 truncate: Optional[float] = DEFAULT_TRUNCATE,
                 zero_deformation: bool = False) -> TiltStack:
    """
    Render markers on the full-resolution grid of `geometry`, or on the grid
    decimated by `decimation`.
    """
    if int(decimation) < 1:
        raise DataError(f"Grid decimation must be a positive integer, got {decimation}")
    forward = ForwardModel(geometry.coarsen(decimation), decimation, sigma_mode, truncate)
    return forward.render(markers, None if zero_deformation else model)


def image_loss_and_gradients(markers: MarkerSet, model: DeformationModel, data: TiltStack,
                             wrt: Iterable[str] = ('locations', 'weights', 'parameters'),
                             sigma_mode: SigmaMode = SigmaMode.CONSISTENT,
                             truncate: Optional[float] = DEFAULT_TRUNCATE) -> ImageGradients:
    """Squared image loss against a stack, on the stack's own grid."""
    forward = ForwardModel.for_stack(data, sigma_mode=sigma_mode, truncate=truncate)
    return forward.loss_and_gradients(markers, model, data.frames, wrt)

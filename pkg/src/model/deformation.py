"""Evaluation of the polynomial deformation field and its derivatives."""

import logging
from typing import Tuple

import numpy as np

from .types import DeformationModel

logger = logging.getLogger(__name__)


def _as_points(model: DeformationModel, points) -> np.ndarray:
    return np.asarray(points, dtype=float).reshape(-1, model.dim)


def monomial_values(model: DeformationModel, points) -> np.ndarray:
    """Monomials of the scaled coordinates, shape (n_points, n_monomials)."""
    u = _as_points(model, points) / model.coordinate_scale
    exps = np.asarray(model.exponents)
    return np.prod(u[:, None, :] ** exps[None, :, :], axis=2)


def monomial_gradients(model: DeformationModel, points) -> np.ndarray:
    """Spatial derivatives of every monomial, shape (n_points, n_monomials, d)."""
    u = _as_points(model, points) / model.coordinate_scale
    exps = np.asarray(model.exponents)
    grads = np.zeros((u.shape[0], exps.shape[0], model.dim))
    for axis in range(model.dim):
        reduced = exps.copy()
        reduced[:, axis] = np.maximum(reduced[:, axis] - 1, 0)
        values = np.prod(u[:, None, :] ** reduced[None, :, :], axis=2)
        grads[:, :, axis] = exps[:, axis] * values / model.coordinate_scale[axis]
    return grads


def time_powers(model: DeformationModel, times) -> np.ndarray:
    """t**zeta for zeta = 1..d_t, shape (n_times, d_t)."""
    times = np.asarray(times, dtype=float).reshape(-1)
    return times[:, None] ** np.arange(1, model.temporal_degree + 1)[None, :]


def displacements(model: DeformationModel, points, times) -> np.ndarray:
    """D_t(P, r) for every time and point, shape (n_times, n_points, d)."""
    mono = monomial_values(model, points)
    tpow = time_powers(model, times)
    return np.einsum('tz,nm,zmk->tnk', tpow, mono, model.coeffs)


def spatial_jacobians(model: DeformationModel, points, times) -> np.ndarray:
    """dD/dr for every time and point, shape (n_times, n_points, d, d) indexed [.., k, i]."""
    grads = monomial_gradients(model, points)
    tpow = time_powers(model, times)
    return np.einsum('tz,zmk,nmi->tnki', tpow, model.coeffs, grads)


def deformation_eval(model: DeformationModel, r, t: float) -> np.ndarray:
    """Displacement vector of a single point at time t."""
    return displacements(model, r, [t])[0, 0]


def deformation_jacobians(model: DeformationModel, r, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Derivatives of the displacement at a single point.

    Returns:
        (dD/dP, dD/dr): dD/dP has shape (d, n_parameters) with columns ordered
        like `model.parameter_vector()`; dD/dr has shape (d, d).
    """
    mono = monomial_values(model, r)[0]
    tpow = time_powers(model, [t])[0]
    active = model.active_components
    d_dp = np.zeros((model.dim, model.temporal_degree, mono.size, len(active)))
    for slot, component in enumerate(active):
        d_dp[component, :, :, slot] = tpow[:, None] * mono[None, :]
    d_dr = spatial_jacobians(model, r, [t])[0, 0]
    return d_dp.reshape(model.dim, -1), d_dr

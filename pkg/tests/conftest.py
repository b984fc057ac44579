import numpy as np
import pytest

from src.model.types import DeformationModel, MarkerSet, TiltGeometry


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def geometry_2d():
    """10 tilts over [-70, 70) deg, 32 detector pixels across a unit FoV."""
    angles, times = TiltGeometry.linear_schedule(10)
    return TiltGeometry(angles, times, (32,), 1.0 / 32, 1.5 / 32, [[-0.5, 0.5], [-0.5, 0.5]])


@pytest.fixture
def geometry_3d():
    angles, times = TiltGeometry.linear_schedule(6, endpoint=True)
    return TiltGeometry(angles, times, (16, 12), 1.0, 1.5, [[-8.0, 8.0], [-6.0, 6.0], [-2.0, 2.0]])


@pytest.fixture
def markers_2d():
    locations = [[-0.25, 0.05], [-0.1, -0.06], [0.02, 0.08], [0.15, -0.02],
                 [0.28, 0.06], [-0.3, -0.08], [0.08, -0.09]]
    return MarkerSet(locations, [1.0, 0.8, 0.9, 1.0, 0.7, 0.85, 0.95])


@pytest.fixture
def doming_2d():
    """Quadratic z-doming with every spatial term at -0.3 except the constant."""
    model = DeformationModel.zeros(2, 2, 1, active_components=(1,))
    for exponents in ((1, 0), (0, 1), (2, 0), (1, 1), (0, 2)):
        model = model.with_coefficient(exponents, 1, 1, -0.3)
    return model


def random_model(rng, dim, spatial_degree=2, temporal_degree=1, magnitude=0.05, scale=None):
    """Model with every component active and random coefficients."""
    model = DeformationModel.zeros(dim, spatial_degree, temporal_degree, scale)
    return model.with_coeffs(rng.uniform(-magnitude, magnitude, model.coeffs.shape))


def random_markers(rng, box, n, weights=True):
    box = np.asarray(box, dtype=float)
    locations = rng.uniform(box[:, 0], box[:, 1], size=(n, box.shape[0]))
    values = rng.uniform(0.3, 1.0, n) if weights else np.ones(n)
    return MarkerSet(locations, values)

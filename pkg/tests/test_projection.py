import numpy as np
import pytest

from conftest import random_markers, random_model
from src.errors import DataError
from src.model.projection import (ForwardModel, SigmaMode, image_loss_and_gradients, projected_locations,
                                  render_stack)
from src.model.types import DeformationModel, MarkerSet, TiltGeometry, TiltStack
from src.multires import downsample_stack


def radon_of_gaussian(geometry, location, sigma, oversample=4):
    """Line integrals of an isotropic Gaussian through every pixel centre, by quadrature."""
    step = geometry.pixel_size / oversample
    half_length = 12 * sigma + np.max(np.abs(geometry.sample_box))
    u = np.arange(-half_length, half_length + step, step)
    theta = np.deg2rad(geometry.angles_deg)
    norm = np.sqrt(2 * np.pi) * sigma
    frames = np.zeros((geometry.n_tilts,) + geometry.detector_shape)
    for t, angle in enumerate(theta):
        if geometry.dim == 2:
            normal, ray = np.array([np.cos(angle), np.sin(angle)]), np.array([-np.sin(angle), np.cos(angle)])
            for i, s in enumerate(geometry.pixel_centers(0)):
                points = s * normal + u[:, None] * ray
                frames[t, i] = np.sum(np.exp(-np.sum((points - location) ** 2, axis=1) / (2 * sigma ** 2)))
        else:
            normal = np.array([np.cos(angle), 0.0, np.sin(angle)])
            ray = np.array([-np.sin(angle), 0.0, np.cos(angle)])
            for i, s in enumerate(geometry.pixel_centers(0)):
                for k, y in enumerate(geometry.pixel_centers(1)):
                    points = s * normal + y * np.array([0.0, 1.0, 0.0]) + u[:, None] * ray
                    frames[t, i, k] = np.sum(np.exp(-np.sum((points - location) ** 2, axis=1) / (2 * sigma ** 2)))
    return frames * step / norm


def relative_l2(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_empty_marker_set_renders_zeros(geometry_2d):
    stack = render_stack(MarkerSet.empty(2), DeformationModel.zeros(2), geometry_2d)
    assert stack.frames.shape == (10, 32)
    assert np.all(stack.frames == 0.0)


def test_marker_on_pixel_centre_peaks_at_one(geometry_2d):
    x = geometry_2d.pixel_centers(0)[10]
    stack = render_stack(MarkerSet([[x, 0.1]], [1.0]), DeformationModel.zeros(2), geometry_2d)
    assert geometry_2d.angles_deg[5] == pytest.approx(0.0)
    frame = stack.frames[5]
    assert frame[10] == pytest.approx(1.0, abs=1e-15)
    offset = geometry_2d.pixel_size
    assert frame[11] == pytest.approx(np.exp(-offset ** 2 / (2 * geometry_2d.shape_sigma ** 2)))
    assert frame.max() == frame[10]


def test_two_dimensional_render_matches_radon_oracle(geometry_2d, rng):
    for _ in range(3):
        location = rng.uniform(-0.3, 0.3, 2)
        stack = render_stack(MarkerSet([location], [1.0]), DeformationModel.zeros(2), geometry_2d, truncate=None)
        oracle = radon_of_gaussian(geometry_2d, location, geometry_2d.shape_sigma)
        assert relative_l2(stack.frames, oracle) < 1e-3


def test_three_dimensional_render_matches_radon_oracle(geometry_3d, rng):
    for _ in range(3):
        location = rng.uniform([-4, -3, -1], [4, 3, 1])
        stack = render_stack(MarkerSet([location], [1.0]), DeformationModel.zeros(3), geometry_3d)
        oracle = radon_of_gaussian(geometry_3d, location, geometry_3d.shape_sigma)
        assert relative_l2(stack.frames, oracle) < 1e-3


def test_render_is_linear_in_marker_subsets(geometry_2d, doming_2d, rng):
    markers = random_markers(rng, [[-0.4, 0.4], [-0.1, 0.1]], 6)
    first, second = markers.select(np.arange(3)), markers.select(np.arange(3, 6))
    whole = render_stack(markers, doming_2d, geometry_2d).frames
    parts = render_stack(first, doming_2d, geometry_2d).frames + render_stack(second, doming_2d, geometry_2d).frames
    np.testing.assert_allclose(whole, parts, rtol=1e-12, atol=1e-14)


def test_shift_along_tilt_axis_shifts_frames(geometry_3d, rng):
    markers = random_markers(rng, [[-5, 5], [-2, 2], [-1, 1]], 3)
    shifted = markers.with_locations(markers.locations + np.array([0.0, 2.0, 0.0]))
    model = DeformationModel.zeros(3)
    base = render_stack(markers, model, geometry_3d).frames
    moved = render_stack(shifted, model, geometry_3d).frames
    np.testing.assert_allclose(moved[:, :, 2:], base[:, :, :-2], atol=1e-12)


def test_zero_deformation_render_ignores_the_model(geometry_2d, markers_2d, doming_2d):
    flat = render_stack(markers_2d, doming_2d, geometry_2d, zero_deformation=True)
    reference = render_stack(markers_2d, DeformationModel.zeros(2), geometry_2d)
    np.testing.assert_array_equal(flat.frames, reference.frames)
    deformed = render_stack(markers_2d, doming_2d, geometry_2d)
    assert not np.allclose(deformed.frames, flat.frames)


def test_consistent_coarse_render_matches_filtered_data(geometry_2d, markers_2d, doming_2d):
    full = render_stack(markers_2d, doming_2d, geometry_2d)
    filtered = downsample_stack(full, '1/2')
    consistent = render_stack(markers_2d, doming_2d, geometry_2d, decimation=2)
    exact = render_stack(markers_2d, doming_2d, geometry_2d, decimation=2, sigma_mode=SigmaMode.FIXED)
    assert consistent.frames.shape == filtered.frames.shape == (10, 16)
    assert relative_l2(consistent.frames, filtered.frames) < 1e-2
    assert relative_l2(exact.frames, filtered.frames) > relative_l2(consistent.frames, filtered.frames)


def test_projected_locations_conventions(geometry_3d):
    zero2 = DeformationModel.zeros(2)
    geometry = TiltGeometry([0.0, 90.0], [0.0, 1.0], (8,), 0.125, 0.1, [[-0.5, 0.5], [-0.5, 0.5]])
    markers = MarkerSet([[0.2, 0.3]], [1.0])
    assert projected_locations(markers, zero2, geometry, 0)[0, 0] == pytest.approx(0.2)
    assert projected_locations(markers, zero2, geometry, 1)[0, 0] == pytest.approx(0.3)

    on_axis = MarkerSet([[0.0, 0.4, 0.0]], [1.0])
    for t in range(geometry_3d.n_tilts):
        np.testing.assert_allclose(projected_locations(on_axis, DeformationModel.zeros(3), geometry_3d, t),
                                   [[0.0, 0.4]], atol=1e-15)
    with pytest.raises(DataError, match='Frame index'):
        projected_locations(markers, zero2, geometry, 2)


def _numeric_gradient(function, x, step):
    gradient = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up.flat[i] += step
        down.flat[i] -= step
        gradient.flat[i] = (function(up) - function(down)) / (2 * step)
    return gradient


def _assert_gradients_match(forward, markers, model, data, location_step):
    analytic = forward.loss_and_gradients(markers, model, data)

    def by_locations(flat):
        return forward.loss_and_gradients(markers.with_locations(flat), model, data, wrt=()).loss

    def by_weights(weights):
        return forward.loss_and_gradients(markers.with_weights(np.clip(weights, 0, 1)), model, data, wrt=()).loss

    def by_parameters(vector):
        return forward.loss_and_gradients(markers, model.with_parameters(vector), data, wrt=()).loss

    numeric_r = _numeric_gradient(by_locations, markers.locations.ravel().copy(), location_step)
    numeric_w = _numeric_gradient(by_weights, markers.weights.copy(), 1e-6)
    numeric_p = _numeric_gradient(by_parameters, model.parameter_vector(), 1e-6)
    assert relative_l2(analytic.locations.ravel(), numeric_r) < 1e-5
    assert relative_l2(analytic.weights, numeric_w) < 1e-5
    assert relative_l2(analytic.parameters, numeric_p) < 1e-5


def test_image_loss_gradients_two_dimensional(geometry_2d, rng):
    forward = ForwardModel(geometry_2d, truncate=None)
    for _ in range(25):
        markers = random_markers(rng, [[-0.3, 0.3], [-0.3, 0.3]], 3)
        markers = markers.with_weights(rng.uniform(0.2, 0.8, 3))
        model = random_model(rng, 2, 2, 2, magnitude=0.05)
        data = rng.normal(0.0, 0.3, forward.frame_shape)
        _assert_gradients_match(forward, markers, model, data, 1e-6)


def test_image_loss_gradients_three_dimensional(geometry_3d, rng):
    forward = ForwardModel(geometry_3d, truncate=None)
    for _ in range(25):
        markers = random_markers(rng, [[-5, 5], [-4, 4], [-1.5, 1.5]], 3)
        markers = markers.with_weights(rng.uniform(0.2, 0.8, 3))
        model = random_model(rng, 3, 2, 1, magnitude=0.5, scale=(8.0, 8.0, 8.0))
        data = rng.normal(0.0, 0.3, forward.frame_shape)
        _assert_gradients_match(forward, markers, model, data, 1e-5)


def test_coarse_grid_gradients(geometry_2d, rng):
    forward = ForwardModel(geometry_2d.coarsen(2), 2, truncate=None)
    markers = random_markers(rng, [[-0.3, 0.3], [-0.3, 0.3]], 2).with_weights([0.4, 0.6])
    model = random_model(rng, 2, 2, 1, magnitude=0.05)
    _assert_gradients_match(forward, markers, model, rng.normal(0.0, 0.3, forward.frame_shape), 1e-6)


def test_image_loss_helper_uses_the_stack_grid(geometry_2d, markers_2d, doming_2d, rng):
    coarse = TiltStack(rng.normal(size=(10, 16)), geometry_2d.coarsen(2), 2)
    expected = ForwardModel(geometry_2d.coarsen(2), 2).loss_and_gradients(markers_2d, doming_2d, coarse.frames)
    result = image_loss_and_gradients(markers_2d, doming_2d, coarse)
    assert result.loss == expected.loss
    np.testing.assert_array_equal(result.parameters, expected.parameters)


def test_loss_rejects_mismatched_data(geometry_2d, markers_2d, doming_2d):
    forward = ForwardModel(geometry_2d)
    with pytest.raises(DataError, match='does not match'):
        forward.loss_and_gradients(markers_2d, doming_2d, np.zeros((10, 31)))


def test_coarse_blob_width_follows_sigma_mode(geometry_2d):
    consistent = ForwardModel(geometry_2d.coarsen(4), 4)
    exact = ForwardModel(geometry_2d.coarsen(4), 4, sigma_mode=SigmaMode.FIXED)
    tau_f, tau_a = geometry_2d.shape_sigma, 2 * geometry_2d.pixel_size
    assert consistent.sigma == pytest.approx(np.hypot(tau_f, tau_a))
    assert consistent.amplitude == pytest.approx(tau_f / np.hypot(tau_f, tau_a))
    assert exact.sigma == tau_f and exact.amplitude == 1.0


@pytest.mark.parametrize('fixture', ['geometry_2d', 'geometry_3d'])
def test_truncated_rendering_matches_the_full_gaussian(fixture, request, rng):
    geometry = request.getfixturevalue(fixture)
    box = np.asarray(geometry.sample_box) * 0.5
    markers = random_markers(rng, box.tolist(), 4).with_weights(rng.uniform(0.2, 1.0, 4))
    scale = tuple(np.max(np.abs(geometry.sample_box), axis=1))
    model = random_model(rng, geometry.dim, 2, 1, magnitude=0.02, scale=scale)
    truncated = ForwardModel(geometry).render_frames(markers.locations, markers.weights, model)
    full = ForwardModel(geometry, truncate=None).render_frames(markers.locations, markers.weights, model)
    assert relative_l2(truncated, full) < 1e-8
    np.testing.assert_allclose(truncated, full, rtol=0, atol=1e-7 * full.max())
    if geometry.dim == 2:
        centred = ForwardModel(geometry).render_frames([[0.0, 0.0]], [1.0], None)
        assert np.all(centred[:, [0, -1]] == 0.0)

import numpy as np
import pytest

from src.errors import ConfigError, DataError
from src.model.projection import render_stack
from src.model.types import MarkerSet, TiltStack
from src.simulate import (GAUSSIAN_NOISE_VARIANCES, POISSON_INCIDENT_COUNTS, CountModel, NoiseSpec, PhantomSpec,
                          add_noise, anscombe, geometry_preset, ground_truth_model, make_phantom, marker_mask,
                          otsu_threshold, phantom_preset, preprocess_counts, scale_to_counts,
                          simulate_measurement)


def brute_force_otsu(values, bins=256):
    """Scan every split of a 256-bin histogram for the largest between-class variance."""
    values = np.asarray(values, dtype=float).ravel()
    counts, edges = np.histogram(values, bins=bins, range=(values.min(), values.max()))
    centers = (edges[:-1] + edges[1:]) / 2
    best, best_index = -1.0, 0
    for k in range(bins - 1):
        low, high = counts[:k + 1], counts[k + 1:]
        w0, w1 = low.sum(), high.sum()
        if w0 == 0 or w1 == 0:
            continue
        mu0 = (low * centers[:k + 1]).sum() / w0
        mu1 = (high * centers[k + 1:]).sum() / w1
        variance = w0 * w1 * (mu0 - mu1) ** 2
        if variance > best:
            best, best_index = variance, k
    return centers[best_index]


@pytest.fixture
def stack_2d(geometry_2d, markers_2d, doming_2d):
    return render_stack(markers_2d, doming_2d, geometry_2d)


def test_two_dimensional_phantom_defaults():
    spec = phantom_preset('2d')
    markers, model = make_phantom(spec)
    assert len(markers) == 10
    assert np.all(np.abs(markers.locations[:, 0]) <= 0.4)
    assert np.all(np.abs(markers.locations[:, 1]) <= 0.1)
    assert model is spec.ground_truth


def test_three_dimensional_phantom_defaults():
    markers, model = make_phantom(phantom_preset('3d', seed=4))
    assert len(markers) == 20
    assert markers.outside([[-409.6, 409.6], [-409.6, 409.6], [-50.0, 50.0]]) == []
    assert model.coefficient((0, 0, 0), 1, 2) == 200.0
    cubic = ground_truth_model('3d_cubic')
    assert cubic.spatial_degree == 3
    assert cubic.coefficient((1, 2, 0), 1, 2) == 25.0


def test_placement_is_seeded_and_separated():
    first, _ = make_phantom(phantom_preset('2d', seed=11))
    second, _ = make_phantom(phantom_preset('2d', seed=11))
    third, _ = make_phantom(phantom_preset('2d', seed=12))
    np.testing.assert_array_equal(first.locations, second.locations)
    assert not np.array_equal(first.locations, third.locations)
    distances = np.linalg.norm(first.locations[:, None] - first.locations[None], axis=2)
    np.fill_diagonal(distances, np.inf)
    assert distances.min() >= 3 * 1.5 / 64


def test_overcrowded_region_is_rejected():
    spec = phantom_preset('2d')
    crowded = PhantomSpec(2, spec.fov_box, 50, [[0.0, 0.05], [0.0, 0.05]], spec.shape_sigma, spec.ground_truth)
    with pytest.raises(ConfigError, match='Could only place'):
        make_phantom(crowded)
    with pytest.raises(ConfigError, match='not inside'):
        PhantomSpec(2, [[0, 1], [0, 1]], 3, [[0, 2], [0, 1]], 0.01, spec.ground_truth)


def test_count_scaling(stack_2d):
    model = CountModel(incident_counts=64)
    one = scale_to_counts(stack_2d.with_frames(np.ones_like(stack_2d.frames)), model)
    assert one.frames[0, 0] == pytest.approx(37.75, abs=0.01)
    zero = scale_to_counts(stack_2d.zeros_like(), model)
    assert np.all(zero.frames == 64)
    counts = scale_to_counts(stack_2d, model).frames
    order = np.argsort(stack_2d.frames.ravel())
    assert np.all(np.diff(counts.ravel()[order]) <= 0)


def test_heavier_markers_are_darker(geometry_2d, doming_2d):
    markers = MarkerSet([[-0.2, 0.0], [0.2, 0.0]], [1.0, 0.5])
    model = doming_2d.zeroed()
    heavy = scale_to_counts(render_stack(markers.select([0]), model, geometry_2d), CountModel())
    light = scale_to_counts(render_stack(markers.select([1]), model, geometry_2d), CountModel())
    assert heavy.frames.min() < light.frames.min()


def test_noise_suites_are_generatable(stack_2d):
    assert GAUSSIAN_NOISE_VARIANCES == (128.0, 256.0, 1024.0, 4096.0, 16384.0)
    assert POISSON_INCIDENT_COUNTS == (64, 256, 1024, 4096, 8192, 16384)
    counts = scale_to_counts(stack_2d, CountModel())
    for variance in GAUSSIAN_NOISE_VARIANCES:
        add_noise(counts, NoiseSpec('gaussian', variance), seed=0)
    for incident in POISSON_INCIDENT_COUNTS:
        add_noise(scale_to_counts(stack_2d, CountModel(incident_counts=incident)), NoiseSpec('poisson'), seed=0)


def test_zero_variance_and_zero_rate(stack_2d):
    assert add_noise(stack_2d, NoiseSpec('gaussian', 0.0), seed=1).frames is stack_2d.frames
    zeros = add_noise(stack_2d.zeros_like(), NoiseSpec('poisson'), seed=1)
    assert np.all(zeros.frames == 0)


def test_gaussian_noise_variance():
    geometry = geometry_preset('2d', n_tilts=1600)
    stack = TiltStack(np.zeros((1600, 64)), geometry)
    noisy = add_noise(stack, NoiseSpec('gaussian', 1024.0), seed=7)
    assert noisy.frames.size > 1e5
    assert noisy.frames.var() == pytest.approx(1024.0, rel=0.05)


def test_noise_is_reproducible(stack_2d):
    counts = scale_to_counts(stack_2d, CountModel())
    first = add_noise(counts, NoiseSpec('poisson'), seed=5)
    second = add_noise(counts, NoiseSpec('poisson'), seed=5)
    np.testing.assert_array_equal(first.frames, second.frames)


def test_poisson_rejects_negative_rates(stack_2d):
    with pytest.raises(DataError, match='non-negative'):
        add_noise(stack_2d.with_frames(-stack_2d.frames - 1.0), NoiseSpec('poisson'), seed=0)


def test_anscombe_values_and_variance_stabilization():
    assert anscombe(0.0) == pytest.approx(1.22474, abs=1e-5)
    assert anscombe(1.0) == pytest.approx(2.34521, abs=1e-5)
    samples = np.random.default_rng(9).poisson(50.0, 100_000)
    assert 0.9 <= anscombe(samples).std() <= 1.1


def test_otsu_on_a_bimodal_image():
    values = np.concatenate([np.zeros(1000), np.full(1000, 10.0)])
    assert 0.0 < otsu_threshold(values) < 10.0


def test_otsu_matches_the_brute_force_scan(rng):
    for _ in range(10):
        image = np.concatenate([rng.normal(0.0, 1.0, 3000), rng.normal(rng.uniform(3, 8), 1.5, 1500)])
        assert otsu_threshold(image.reshape(50, 90)) == brute_force_otsu(image)


def test_otsu_follows_affine_maps(rng):
    image = np.concatenate([rng.normal(0.0, 1.0, 2000), rng.normal(5.0, 1.0, 2000)])
    scale, shift = 3.5, -2.0
    mapped = otsu_threshold(scale * image + shift)
    bin_width = scale * (image.max() - image.min()) / 256
    assert abs(mapped - (scale * otsu_threshold(image) + shift)) <= bin_width


def test_otsu_rejects_a_constant_image():
    with pytest.raises(DataError, match='constant'):
        otsu_threshold(np.full((8, 8), 3.0))


def test_simulated_preprocessing_normalizes_the_reference(stack_2d):
    reference = scale_to_counts(stack_2d, CountModel())
    processed = preprocess_counts(reference, 'simulated', reference=reference)
    mask = marker_mask(reference)
    assert processed.frames[~mask].mean() == pytest.approx(0.0, abs=1e-12)
    assert processed.frames[mask].mean() == pytest.approx(1.0, abs=1e-12)


def test_experimental_preprocessing(stack_2d):
    counts = scale_to_counts(stack_2d, CountModel())
    processed = preprocess_counts(counts, 'experimental', bead_intensity=-2.0)
    assert processed.frames.mean() == pytest.approx(0.0, abs=1e-12)
    expected = (anscombe(counts.frames) - anscombe(counts.frames).mean()) / -2.0
    np.testing.assert_allclose(processed.frames, expected)
    with pytest.raises(ConfigError):
        preprocess_counts(counts, 'experimental')
    with pytest.raises(ConfigError):
        preprocess_counts(counts, 'simulated')
    with pytest.raises(ConfigError):
        preprocess_counts(counts, 'raw')


def test_noiseless_measurement_is_the_render(geometry_2d):
    spec = phantom_preset('2d', seed=2, n_markers=4)
    measurement = simulate_measurement(spec, geometry_2d)
    np.testing.assert_array_equal(measurement.data.frames, measurement.clean.frames)
    expected = render_stack(measurement.markers, measurement.model, geometry_2d)
    np.testing.assert_array_equal(measurement.clean.frames, expected.frames)
    assert measurement.counts is None


def test_noisy_measurement_is_preprocessed(geometry_2d):
    spec = phantom_preset('2d', seed=2, n_markers=4)
    measurement = simulate_measurement(spec, geometry_2d, CountModel(), NoiseSpec('poisson'), seed=3)
    again = simulate_measurement(spec, geometry_2d, CountModel(), NoiseSpec('poisson'), seed=3)
    np.testing.assert_array_equal(measurement.data.frames, again.data.frames)
    assert measurement.counts.frames.max() <= 2 ** 14 * 1.1
    assert measurement.info['noise'] == 'poisson'
    # normalized intensities: background near 0, markers near 1
    mask = marker_mask(scale_to_counts(measurement.clean, CountModel()))
    assert abs(measurement.data.frames[~mask].mean()) < 0.1
    assert measurement.data.frames[mask].mean() > 0.5


def test_dimension_mismatch_is_rejected(geometry_3d):
    with pytest.raises(ConfigError, match='2D phantom'):
        simulate_measurement(phantom_preset('2d'), geometry_3d)

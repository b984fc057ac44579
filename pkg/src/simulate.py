"""
Synthetic tilt series: phantom markers with a ground-truth deformation,
electron-count scaling, noise and the preprocessing that maps counts back to
marker intensities.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from skimage.filters import threshold_otsu

from .errors import ConfigError, DataError
from .model.projection import SigmaMode, render_stack
from .model.types import DeformationModel, MarkerSet, TiltGeometry, TiltStack

logger = logging.getLogger(__name__)

GAUSSIAN_NOISE_VARIANCES = tuple(2.0 ** n for n in (7, 8, 10, 12, 14))
POISSON_INCIDENT_COUNTS = tuple(2 ** n for n in (6, 8, 10, 12, 13, 14))

OTSU_BINS = 256
MIN_SEPARATION_SIGMAS = 3.0
PLACEMENT_ATTEMPTS_PER_MARKER = 2000

PRESETS = ('2d', '3d', '3d_cubic')

# Slab of 819.2 x 819.2 x 100 nm imaged on 64 x 64 pixels of 12.8 nm
SLAB_HALF_WIDTH = 409.6
SLAB_HALF_THICKNESS = 50.0


@dataclass(frozen=True)
class PhantomSpec:
    """Where and how many markers to place, and the deformation they undergo."""

    dimension: int
    fov_box: np.ndarray
    n_markers: int
    region_box: np.ndarray
    shape_sigma: float
    ground_truth: DeformationModel
    seed: int = 0
    weight: float = 1.0

    def __post_init__(self):
        fov = np.array(self.fov_box, dtype=float)
        region = np.array(self.region_box, dtype=float)
        if self.dimension not in (2, 3):
            raise ConfigError(f"Phantom dimension must be 2 or 3, got {self.dimension}")
        if fov.shape != (self.dimension, 2) or region.shape != (self.dimension, 2):
            raise ConfigError(f"FoV and marker region must be {self.dimension} (low, high) pairs")
        if np.any(region[:, 0] < fov[:, 0]) or np.any(region[:, 1] > fov[:, 1]):
            raise ConfigError(f"Marker region {region.tolist()} is not inside the FoV {fov.tolist()}")
        if self.n_markers < 1:
            raise ConfigError(f"A phantom needs at least one marker, got {self.n_markers}")
        if not self.shape_sigma > 0:
            raise ConfigError(f"Marker width must be positive, got {self.shape_sigma}")
        if not 0.0 < self.weight <= 1.0:
            raise ConfigError(f"Marker weight must lie in (0, 1], got {self.weight}")
        if self.ground_truth.dim != self.dimension:
            raise ConfigError("Ground-truth deformation dimension does not match the phantom")
        object.__setattr__(self, 'fov_box', fov)
        object.__setattr__(self, 'region_box', region)


@dataclass(frozen=True)
class CountModel:
    """Exponential attenuation of the incident beam by gold markers."""

    incident_counts: float = 2.0 ** 14
    absorption_potential: float = 5.39          # V
    interaction_constant: float = 0.00653       # 1 / (V nm)
    bead_diameter: float = 15.0                 # nm

    def __post_init__(self):
        for name in ('incident_counts', 'absorption_potential', 'interaction_constant', 'bead_diameter'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"Count model {name} must be positive, got {getattr(self, name)}")

    @property
    def attenuation(self) -> float:
        """Attenuation per unit of rendered intensity, V_abs times C times the bead diameter."""
        return self.absorption_potential * self.interaction_constant * self.bead_diameter


@dataclass(frozen=True)
class NoiseSpec:
    """`none`, `gaussian` with a variance in counts squared, or `poisson`."""

    mode: str = 'none'
    variance: float = 0.0

    def __post_init__(self):
        if self.mode not in ('none', 'gaussian', 'poisson'):
            raise ConfigError(f"Unknown noise mode {self.mode!r}")
        if self.variance < 0:
            raise ConfigError(f"Noise variance must be non-negative, got {self.variance}")


# ----------------------------------------------------------------------
# Presets
# ----------------------------------------------------------------------

def ground_truth_model(preset: str) -> DeformationModel:
    """Doming fields used for the synthetic experiments; only the z component is non-zero."""
    if preset == '2d':
        model = DeformationModel.zeros(2, 2, 1, (1.0, 1.0), (1,))
        for exponents in ((1, 0), (0, 1), (2, 0), (0, 2), (1, 1)):
            model = model.with_coefficient(exponents, 1, 1, -1.0)
        return model
    scale = (SLAB_HALF_WIDTH,) * 3
    if preset == '3d':
        model = DeformationModel.zeros(3, 2, 1, scale, (2,))
        terms = {(0, 0, 0): 200.0, (2, 0, 0): -100.0, (0, 2, 0): -100.0}
    elif preset == '3d_cubic':
        model = DeformationModel.zeros(3, 3, 1, scale, (2,))
        terms = {(0, 0, 0): 200.0, (2, 0, 0): -50.0, (0, 2, 0): -50.0, (1, 2, 0): 25.0, (2, 1, 0): 25.0}
    else:
        raise ConfigError(f"Unknown phantom preset {preset!r}; expected one of {PRESETS}")
    for exponents, value in terms.items():
        model = model.with_coefficient(exponents, 1, 2, value)
    return model


def phantom_preset(preset: str, seed: int = 0, n_markers: Optional[int] = None) -> PhantomSpec:
    """
    Phantom settings of a preset.

    Args:
        preset: '2d', '3d' or '3d_cubic'
        seed: Seed of the marker placement
        n_markers: Marker count, 10 in 2D and 20 in 3D by default

    Returns:
        The PhantomSpec with the preset's ground-truth deformation
    """
    model = ground_truth_model(preset)
    if preset == '2d':
        return PhantomSpec(2, [[-0.5, 0.5], [-0.5, 0.5]], n_markers or 10, [[-0.4, 0.4], [-0.1, 0.1]],
                           1.5 / 64, model, seed)
    box = [[-SLAB_HALF_WIDTH, SLAB_HALF_WIDTH], [-SLAB_HALF_WIDTH, SLAB_HALF_WIDTH],
           [-SLAB_HALF_THICKNESS, SLAB_HALF_THICKNESS]]
    return PhantomSpec(3, box, n_markers or 20, box, 15.0, model, seed)


def geometry_preset(preset: str, n_tilts: Optional[int] = None, detector_pixels: Optional[int] = None,
                    shape_sigma: Optional[float] = None) -> TiltGeometry:
    """Acquisition geometry for a preset: [-70, 70) deg in 2D, [-70, 70] deg in 3D."""
    if preset == '2d':
        n = detector_pixels or 64
        angles, times = TiltGeometry.linear_schedule(n_tilts or 20, endpoint=False)
        return TiltGeometry(angles, times, (n,), 1.0 / n, shape_sigma or 1.5 / 64,
                            [[-0.5, 0.5], [-0.5, 0.5]])
    if preset not in PRESETS:
        raise ConfigError(f"Unknown geometry preset {preset!r}; expected one of {PRESETS}")
    n = detector_pixels or 64
    angles, times = TiltGeometry.linear_schedule(n_tilts or 40, endpoint=True)
    box = [[-SLAB_HALF_WIDTH, SLAB_HALF_WIDTH], [-SLAB_HALF_WIDTH, SLAB_HALF_WIDTH],
           [-SLAB_HALF_THICKNESS, SLAB_HALF_THICKNESS]]
    return TiltGeometry(angles, times, (n, n), 2.0 * SLAB_HALF_WIDTH / n, shape_sigma or 15.0, box)


# ----------------------------------------------------------------------
# Phantom and counts
# ----------------------------------------------------------------------

def make_phantom(spec: PhantomSpec) -> Tuple[MarkerSet, DeformationModel]:
    """
    Place markers uniformly at random in the marker region, keeping every
    pair at least 3 sigma apart.
    """
    rng = np.random.default_rng(spec.seed)
    low, high = spec.region_box[:, 0], spec.region_box[:, 1]
    min_distance = MIN_SEPARATION_SIGMAS * spec.shape_sigma
    placed = []
    attempts = 0
    budget = PLACEMENT_ATTEMPTS_PER_MARKER * spec.n_markers
    while len(placed) < spec.n_markers:
        if attempts >= budget:
            raise ConfigError(
                f"Could only place {len(placed)} of {spec.n_markers} markers at least "
                f"{min_distance:g} apart in region {spec.region_box.tolist()}"
            )
        attempts += 1
        candidate = rng.uniform(low, high)
        if all(np.linalg.norm(candidate - other) >= min_distance for other in placed):
            placed.append(candidate)
    markers = MarkerSet(np.array(placed), np.full(spec.n_markers, spec.weight))
    logger.debug(f"Placed {spec.n_markers} markers after {attempts} draws")
    return markers, spec.ground_truth


def scale_to_counts(stack: TiltStack, count_model: CountModel) -> TiltStack:
    """Expected electron counts I = I_0 exp(-V_abs C diameter intensity)."""
    counts = count_model.incident_counts * np.exp(-count_model.attenuation * stack.frames)
    return stack.with_frames(counts)


def add_noise(stack: TiltStack, noise: NoiseSpec, seed: int) -> TiltStack:
    """
    Add measurement noise to a stack.

    Args:
        stack: Noise-free frames (counts for Poisson noise)
        noise: Mode and, for Gaussian noise, its variance
        seed: Seed of the noise generator

    Returns:
        The noisy stack; the input itself when there is nothing to add

    Poisson noise needs non-negative rates and draws integer counts.
    """
    rng = np.random.default_rng(seed)
    if noise.mode == 'none' or (noise.mode == 'gaussian' and noise.variance == 0):
        return stack
    if noise.mode == 'gaussian':
        return stack.with_frames(stack.frames + rng.normal(0.0, np.sqrt(noise.variance), stack.frames.shape))
    if np.any(stack.frames < 0):
        raise DataError(f"Poisson noise needs non-negative rates, found minimum {stack.frames.min()}")
    return stack.with_frames(rng.poisson(stack.frames).astype(float))


# ----------------------------------------------------------------------
# Preprocessing
# ----------------------------------------------------------------------

def anscombe(values: np.ndarray) -> np.ndarray:
    """Anscombe transform 2 sqrt(x + 3/8); Poisson counts come out with roughly unit variance."""
    return 2.0 * np.sqrt(np.asarray(values, dtype=float) + 3.0 / 8.0)


def otsu_threshold(image: np.ndarray) -> float:
    """Between-class-variance threshold over a 256-bin histogram; ties resolve to the lower bin."""
    image = np.asarray(image, dtype=float)
    if image.size == 0 or np.all(image == image.flat[0]):
        raise DataError("Otsu threshold is undefined for a constant image")
    return float(threshold_otsu(image.ravel(), nbins=OTSU_BINS))


def marker_mask(reference: TiltStack) -> np.ndarray:
    """Pixels darker than the Otsu threshold of a count stack, where markers absorb."""
    return reference.frames <= otsu_threshold(reference.frames)


def preprocess_counts(stack: TiltStack, mode: str = 'simulated', reference: Optional[TiltStack] = None,
                      bead_intensity: Optional[float] = None) -> TiltStack:
    """
    Map counts to marker intensities with background near 0 and markers near 1.

    `simulated` shifts by the minimum, applies the Anscombe transform, then
    subtracts the background mean and divides by the marker mean, both taken
    from an Otsu mask of the noiseless `reference` counts. `experimental`
    applies the Anscombe transform, subtracts the stack mean and divides by
    the supplied `bead_intensity`.
    """
    frames = np.asarray(stack.frames, dtype=float)
    if mode == 'simulated':
        if reference is None:
            raise ConfigError("Simulated preprocessing needs a noiseless reference stack")
        if reference.frames.shape != frames.shape:
            raise DataError(f"Reference shape {reference.frames.shape} differs from data {frames.shape}")
        mask = marker_mask(reference)
        if not np.any(mask) or np.all(mask):
            raise DataError("Otsu mask does not separate markers from background")
        stabilized = anscombe(frames - frames.min())
        background = float(stabilized[~mask].mean())
        bead = float(stabilized[mask].mean())
        logger.debug(f"Background {background:.4f}, marker {bead:.4f} over {int(mask.sum())} marker pixels")
        return stack.with_frames((stabilized - background) / (bead - background))
    if mode == 'experimental':
        if bead_intensity is None or bead_intensity == 0:
            raise ConfigError("Experimental preprocessing needs a non-zero average bead intensity")
        if np.any(frames < -3.0 / 8.0):
            raise DataError(f"Counts below -3/8 cannot be Anscombe transformed (minimum {frames.min()})")
        stabilized = anscombe(frames)
        return stack.with_frames((stabilized - stabilized.mean()) / bead_intensity)
    raise ConfigError(f"Unknown preprocessing mode {mode!r}")


# ----------------------------------------------------------------------
# End to end
# ----------------------------------------------------------------------

@dataclass
class Measurement:
    """A simulated acquisition with its ground truth."""
    markers: MarkerSet
    model: DeformationModel
    clean: TiltStack
    data: TiltStack
    counts: Optional[TiltStack] = None
    info: Dict = field(default_factory=dict)


def simulate_measurement(spec: PhantomSpec, geometry: TiltGeometry, count_model: Optional[CountModel] = None,
                         noise: Optional[NoiseSpec] = None, seed: Optional[int] = None,
                         sigma_mode: SigmaMode = SigmaMode.CONSISTENT) -> Measurement:
    """
    Render the phantom and, for noisy settings, pass it through counts,
    noise and simulated-mode preprocessing. Noiseless measurements are the
    rendered intensities themselves.
    """
    if geometry.dim != spec.dimension:
        raise ConfigError(f"{geometry.dim}D geometry for a {spec.dimension}D phantom")
    noise = noise or NoiseSpec()
    markers, model = make_phantom(spec)
    outside = markers.outside(geometry.sample_box)
    if outside:
        raise ConfigError(f"Phantom markers {outside} fall outside the sample box")
    clean = render_stack(markers, model, geometry, sigma_mode=sigma_mode)
    info = {'noise': noise.mode, 'variance': noise.variance, 'seed': spec.seed if seed is None else seed}
    if noise.mode == 'none':
        return Measurement(markers, model, clean, clean, info=info)

    count_model = count_model or CountModel()
    reference = scale_to_counts(clean, count_model)
    noisy = add_noise(reference, noise, spec.seed if seed is None else seed)
    data = preprocess_counts(noisy, 'simulated', reference=reference)
    info['incident_counts'] = count_model.incident_counts
    logger.info(f"Simulated {noise.mode} noise (variance {noise.variance:g}) at I0={count_model.incident_counts:g}")
    return Measurement(markers, model, clean, data, noisy, info)

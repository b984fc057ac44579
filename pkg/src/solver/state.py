"""Configuration, iteration state and result containers for the alignment solver."""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import ConfigError
from ..model.projection import DEFAULT_TRUNCATE, SigmaMode
from ..model.types import DeformationModel, MarkerSet, TiltGeometry, component_index

logger = logging.getLogger(__name__)

DEFAULT_GRID_SHAPES = {2: (64, 64), 3: (16, 16, 4)}


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the marker-insertion / block-coordinate-descent loop."""

    n_max: int = 30
    candidate_grid_shape: Optional[Tuple[int, ...]] = None
    prune_threshold: float = 0.1
    loss_tolerance: float = 1e-6
    bcd_rounds: int = 1
    refinement_margin: float = 2.0          # in units of the shape width
    merge_radius: float = 1.0               # in units of the shape width; 0 disables merging
    lbfgs_max_evals: int = 100
    lbfgs_memory: int = 10
    lbfgs_ftol: float = 1e-12
    lbfgs_gtol: float = 1e-10
    weight_tolerance: float = 1e-10
    deformation_bound_factor: float = 10.0
    fit_deformation_from_iteration: int = 2
    spatial_degree: int = 2
    temporal_degree: int = 1
    deformation_components: Tuple[str, ...] = ('z',)
    coordinate_normalization: str = 'auto'  # auto | half_width | raw
    sigma_mode: SigmaMode = SigmaMode.CONSISTENT
    truncate: Optional[float] = DEFAULT_TRUNCATE
    num_threads: int = 1
    chunk_size: int = 512

    def __post_init__(self):
        if self.n_max < 1:
            raise ConfigError(f"n_max must be >= 1, got {self.n_max}")
        if not 0.0 <= self.prune_threshold < 1.0:
            raise ConfigError(f"prune_threshold must lie in [0, 1), got {self.prune_threshold}")
        if not self.loss_tolerance > 0:
            raise ConfigError(f"loss_tolerance must be positive, got {self.loss_tolerance}")
        if self.merge_radius < 0:
            raise ConfigError(f"merge_radius must be >= 0, got {self.merge_radius}")
        if self.bcd_rounds < 1:
            raise ConfigError(f"bcd_rounds must be >= 1, got {self.bcd_rounds}")
        if self.lbfgs_max_evals < 1 or self.lbfgs_memory < 1:
            raise ConfigError("Quasi-Newton budget must be positive")
        if self.spatial_degree < 0 or self.temporal_degree < 1:
            raise ConfigError("Deformation degrees must satisfy d_p >= 0 and d_t >= 1")
        if self.coordinate_normalization not in ('auto', 'half_width', 'raw'):
            raise ConfigError(f"Unknown coordinate normalization {self.coordinate_normalization!r}")
        if self.candidate_grid_shape is not None and any(n < 1 for n in self.candidate_grid_shape):
            raise ConfigError(f"Candidate grid shape must be positive, got {self.candidate_grid_shape}")
        object.__setattr__(self, 'sigma_mode', SigmaMode(self.sigma_mode))
        object.__setattr__(self, 'deformation_components', tuple(self.deformation_components))

    def grid_shape(self, dim: int) -> Tuple[int, ...]:
        """Candidate grid shape for a `dim`-dimensional sample: the configured one or the default 64^2 / 16x16x4 grid."""
        shape = tuple(self.candidate_grid_shape or DEFAULT_GRID_SHAPES[dim])
        if len(shape) != dim:
            raise ConfigError(f"Candidate grid shape {shape} does not match a {dim}D sample")
        return shape

    def coordinate_scale(self, geometry: TiltGeometry) -> np.ndarray:
        """
        Per-axis normalization of polynomial inputs. `half_width` divides
        every axis by the in-plane half width of the sample box (x for all
        axes), `raw` leaves coordinates untouched; `auto` is raw in 2D.
        """
        mode = self.coordinate_normalization
        if mode == 'auto':
            mode = 'raw' if geometry.dim == 2 else 'half_width'
        if mode == 'raw':
            return np.ones(geometry.dim)
        return np.full(geometry.dim, geometry.fov_half_width()[0])

    def initial_model(self, geometry: TiltGeometry) -> DeformationModel:
        """Zero deformation with the configured degrees and active components, scaled for `geometry`."""
        components = tuple(component_index(geometry.dim, c) for c in self.deformation_components)
        return DeformationModel.zeros(geometry.dim, self.spatial_degree, self.temporal_degree,
                                      self.coordinate_scale(geometry), components)

    def deformation_bound(self, geometry: TiltGeometry) -> float:
        """Largest admissible absolute coefficient value in the deformation fit."""
        return self.deformation_bound_factor * float(np.max(geometry.fov_half_width()))

    def refinement_box(self, geometry: TiltGeometry) -> np.ndarray:
        """Sample box widened by the refinement margin on every side; locations are clamped to it."""
        margin = self.refinement_margin * geometry.shape_sigma
        box = np.array(geometry.sample_box, dtype=float)
        box[:, 0] -= margin
        box[:, 1] += margin
        return box

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['sigma_mode'] = self.sigma_mode.value
        data['deformation_components'] = list(self.deformation_components)
        if self.candidate_grid_shape is not None:
            data['candidate_grid_shape'] = list(self.candidate_grid_shape)
        return data


@dataclass(frozen=True)
class LossRecord:
    """Loss after one solver step."""
    level: int
    decimation: int
    iteration: int
    step: str
    loss: float
    n_markers: int

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class SolverState:
    """Current measure estimate, deformation estimate and loss trace."""
    markers: MarkerSet
    model: DeformationModel
    loss_history: List[LossRecord] = field(default_factory=list)
    level: int = 0
    iteration: int = 0
    converged: bool = False

    def record(self, decimation: int, step: str, loss: float) -> None:
        """
        Append the loss after a solver step to the history.

        Args:
            decimation: Decimation factor of the current grid
            step: 'initial', 'weights', 'prune', 'deformation', 'support' or 'final_prune'
            loss: Loss value after the step
        """
        self.loss_history.append(
            LossRecord(self.level, decimation, self.iteration, step, float(loss), len(self.markers))
        )
        logger.debug(f"level={self.level} iter={self.iteration} {step}: loss={loss:.6e} markers={len(self.markers)}")

    @property
    def last_loss(self) -> Optional[float]:
        """Most recently recorded loss, None before the first record."""
        return self.loss_history[-1].loss if self.loss_history else None


@dataclass
class LevelSummary:
    """Per-resolution outcome of the coarse-to-fine run."""
    level: int
    decimation: int
    iterations: int
    initial_loss: float
    final_loss: float
    converged: bool
    n_markers: int

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['eta'] = f"1/{self.decimation}" if self.decimation > 1 else "1"
        return data


@dataclass
class AlignmentResult:
    """Converged markers and deformation with the full loss trace."""
    markers: MarkerSet
    model: DeformationModel
    loss_history: List[LossRecord] = field(default_factory=list)
    levels: List[LevelSummary] = field(default_factory=list)
    error_trace: List[Dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.loss_history[0].loss if self.loss_history else float('nan')

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1].loss if self.loss_history else float('nan')

    def to_dict(self) -> Dict:
        return {
            'markers': self.markers.to_dict(),
            'model': self.model.to_dict(),
            'initial_loss': self.initial_loss,
            'final_loss': self.final_loss,
            'levels': [level.to_dict() for level in self.levels],
            'loss_history': [record.to_dict() for record in self.loss_history],
            'error_trace': list(self.error_trace),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'AlignmentResult':
        """Inverse of to_dict, for results written by the align command."""
        history = [LossRecord(**record) for record in data.get('loss_history', [])]
        levels = []
        for level in data.get('levels', []):
            level = dict(level)
            level.pop('eta', None)
            levels.append(LevelSummary(**level))
        return cls(MarkerSet.from_dict(data['markers']), DeformationModel.from_dict(data['model']),
                   history, levels, list(data.get('error_trace', [])))

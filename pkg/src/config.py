"""Environment settings and the schema-validated run configuration."""

import os
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

from dotenv import load_dotenv, find_dotenv
from jsonschema import Draft7Validator

from .errors import ConfigError
from .evaluate import EvaluationGrid
from .model.projection import SigmaMode
from .model.types import TiltGeometry
from .multires import ResolutionSchedule, make_resolution_schedule
from .simulate import PRESETS, CountModel, NoiseSpec, PhantomSpec, geometry_preset, phantom_preset
from .solver.state import SolverConfig

logger = logging.getLogger(__name__)


class Config:
    """Process-level settings read from the environment and an optional .env file."""

    DEFAULTS = {
        'SPARSEALIGN_LOG_LEVEL': 'INFO',
        'SPARSEALIGN_LOG_FORMAT': 'text',   # text | json
        'SPARSEALIGN_LOG_FILE': None,
        'SPARSEALIGN_NUM_THREADS': 1,
        'SPARSEALIGN_CHUNK_SIZE': 512,
    }

    def __init__(self, env_file: Optional[str] = None, reload: bool = False):
        """
        Initialize configuration.

        Args:
            env_file: Path to .env file (optional)
            reload: Override variables already present in the environment
        """
        self.env_file = env_file or find_dotenv(usecwd=True)
        self._cache: Dict[str, Any] = {}
        self.load_env(reload)

    def load_env(self, reload: bool = False) -> None:
        """Load the .env file; with reload, its values override the environment and the cache is dropped."""
        if reload:
            self._cache.clear()
        if self.env_file:
            load_dotenv(self.env_file, override=reload)
            logger.debug(f"Loaded environment from: {self.env_file}")

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get a setting from the environment, the DEFAULTS table or `default`, in that order.

        Args:
            key: Environment variable name
            default: Value used when the key is neither set nor in DEFAULTS

        Returns:
            The raw (string) value, cached per instance
        """
        if key in self._cache:
            return self._cache[key]
        value = os.getenv(key, self.DEFAULTS.get(key, default))
        self._cache[key] = value
        return value

    def get_int(self, key: str, default: Optional[int] = None) -> int:
        """
        Get an integer value, falling back to the default with a warning.

        Args:
            key: Environment variable name
            default: Value used when the variable is unset or not an integer

        Returns:
            The parsed integer
        """
        if default is None:
            default = self.DEFAULTS.get(key, 0)
        value = self.get(key, default)
        try:
            return int(value)
        except (ValueError, TypeError):
            logger.warning(f"Invalid integer value for {key}: {value}, using default: {default}")
            return default

    @property
    def log_level(self) -> int:
        """Logging level constant for SPARSEALIGN_LOG_LEVEL; unknown names fall back to INFO."""
        name = str(self.get('SPARSEALIGN_LOG_LEVEL')).upper()
        level = logging.getLevelName(name)
        if not isinstance(level, int):
            logger.warning(f"Unknown log level {name}, using INFO")
            return logging.INFO
        return level

    @property
    def log_format(self) -> str:
        """`json` for structured records, anything else means plain text."""
        return 'json' if str(self.get('SPARSEALIGN_LOG_FORMAT')).lower() == 'json' else 'text'

    @property
    def log_file(self) -> Optional[str]:
        return self.get('SPARSEALIGN_LOG_FILE') or None

    @property
    def num_threads(self) -> int:
        """Worker threads for the candidate scan, at least 1."""
        return max(1, self.get_int('SPARSEALIGN_NUM_THREADS'))

    @property
    def chunk_size(self) -> int:
        """Candidates per work unit in the candidate scan, at least 1."""
        return max(1, self.get_int('SPARSEALIGN_CHUNK_SIZE'))


# ----------------------------------------------------------------------
# Run configuration
# ----------------------------------------------------------------------

_NUMBER = {'type': 'number'}
_POSITIVE = {'type': 'number', 'exclusiveMinimum': 0}
_POSITIVE_INT = {'type': 'integer', 'minimum': 1}
_BOX = {
    'type': 'array', 'minItems': 2, 'maxItems': 3,
    'items': {'type': 'array', 'minItems': 2, 'maxItems': 2, 'items': _NUMBER},
}
_ETA = {'oneOf': [{'type': 'string', 'pattern': r'^\s*1\s*(/\s*[0-9]+\s*)?$'}, _POSITIVE]}


def _section(properties: Dict[str, Any]) -> Dict[str, Any]:
    return {'type': 'object', 'additionalProperties': False, 'properties': properties}


RUN_CONFIG_SCHEMA = {
    '$schema': 'http://json-schema.org/draft-07/schema#',
    'type': 'object',
    'additionalProperties': False,
    'properties': {
        'seed': {'type': 'integer', 'minimum': 0},
        'phantom': _section({
            'preset': {'enum': list(PRESETS)},
            'n_markers': _POSITIVE_INT,
            'weight': {'type': 'number', 'exclusiveMinimum': 0, 'maximum': 1},
        }),
        'geometry': _section({
            'n_tilts': {'type': 'integer', 'minimum': 2},
            'angle_range': {'type': 'array', 'minItems': 2, 'maxItems': 2, 'items': _NUMBER},
            'endpoint': {'type': 'boolean'},
            'angles_deg': {'type': 'array', 'minItems': 1, 'items': _NUMBER},
            'times': {'type': 'array', 'minItems': 1, 'items': _NUMBER},
            'detector_pixels': {'type': 'integer', 'minimum': 8},
            'pixel_size': _POSITIVE,
            'shape_sigma': _POSITIVE,
            'sample_box': _BOX,
            'tilt_axis': {'enum': ['x', 'y']},
        }),
        'count_model': _section({
            'incident_counts': _POSITIVE,
            'absorption_potential': _POSITIVE,
            'interaction_constant': _POSITIVE,
            'bead_diameter': _POSITIVE,
        }),
        'noise': _section({
            'mode': {'enum': ['none', 'gaussian', 'poisson']},
            'variance': {'type': 'number', 'minimum': 0},
        }),
        'preprocess': _section({
            'mode': {'enum': ['none', 'simulated', 'experimental']},
            'bead_intensity': _NUMBER,
        }),
        'solver': _section({
            'n_max': _POSITIVE_INT,
            'candidate_grid_shape': {'type': 'array', 'minItems': 2, 'maxItems': 3, 'items': _POSITIVE_INT},
            'prune_threshold': {'type': 'number', 'minimum': 0, 'exclusiveMaximum': 1},
            'loss_tolerance': _POSITIVE,
            'bcd_rounds': _POSITIVE_INT,
            'refinement_margin': {'type': 'number', 'minimum': 0},
            'merge_radius': {'type': 'number', 'minimum': 0},
            'lbfgs_max_evals': _POSITIVE_INT,
            'lbfgs_memory': _POSITIVE_INT,
            'deformation_bound_factor': _POSITIVE,
            'fit_deformation_from_iteration': _POSITIVE_INT,
            'spatial_degree': {'type': 'integer', 'minimum': 0},
            'temporal_degree': _POSITIVE_INT,
            'deformation_components': {'type': 'array', 'minItems': 1, 'uniqueItems': True,
                                       'items': {'enum': ['x', 'y', 'z']}},
            'coordinate_normalization': {'enum': ['auto', 'half_width', 'raw']},
            'sigma_mode': {'enum': [mode.value for mode in SigmaMode]},
            'truncate': {'oneOf': [_POSITIVE, {'type': 'null'}]},
        }),
        'schedule': _section({
            'etas': {'type': 'array', 'minItems': 1, 'items': _ETA},
            'tolerance': {'oneOf': [_POSITIVE, {'type': 'array', 'minItems': 1, 'items': _POSITIVE}]},
        }),
        'evaluation': _section({
            'grid_shape': {'type': 'array', 'minItems': 2, 'maxItems': 3, 'items': {'type': 'integer', 'minimum': 2}},
            'match_radius_pixels': _POSITIVE,
        }),
        'output': _section({
            'directory': {'type': 'string', 'minLength': 1},
            'prefix': {'type': 'string'},
        }),
    },
}

DEFAULT_SCHEDULES = {2: ('1',), 3: ('1/16', '1/8', '1/4', '1/2')}


class RunConfig:
    """A validated run configuration; absent sections fall back to the phantom preset."""

    def __init__(self, data: Optional[Dict[str, Any]] = None):
        """
        Validate a configuration document.

        Args:
            data: Parsed JSON; None is the empty configuration

        Raises ConfigError listing every schema violation with its path.
        """
        self.data = dict(data or {})
        errors = sorted(Draft7Validator(RUN_CONFIG_SCHEMA).iter_errors(self.data), key=lambda e: list(e.path))
        if errors:
            details = '; '.join(f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors)
            raise ConfigError(f"Invalid run configuration: {details}")

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'RunConfig':
        """Load and validate a JSON file; a missing or unparsable file is a ConfigError."""
        try:
            with open(path) as handle:
                data = json.load(handle)
        except FileNotFoundError:
            raise ConfigError(f"Run configuration not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Run configuration {path} is not valid JSON: {e}")
        logger.debug(f"Loaded run configuration from {path}")
        return cls(data)

    def section(self, name: str) -> Dict[str, Any]:
        """Copy of a top-level section, empty when absent."""
        return dict(self.data.get(name, {}))

    @property
    def preset(self) -> str:
        """Phantom preset name: '2d', '3d' or '3d_cubic'."""
        return self.section('phantom').get('preset', '2d')

    @property
    def dimension(self) -> int:
        return 2 if self.preset == '2d' else 3

    @property
    def seed(self) -> int:
        return int(self.data.get('seed', 0))

    def with_seed(self, seed: int) -> 'RunConfig':
        """Copy of this configuration with another seed."""
        data = dict(self.data)
        data['seed'] = int(seed)
        return RunConfig(data)

    def phantom_spec(self) -> PhantomSpec:
        """Phantom of the preset, with the marker count, width and weight overrides of the configuration."""
        phantom = self.section('phantom')
        spec = phantom_preset(self.preset, self.seed, phantom.get('n_markers'))
        geometry = self.section('geometry')
        sigma = geometry.get('shape_sigma', spec.shape_sigma)
        return PhantomSpec(spec.dimension, spec.fov_box, spec.n_markers, spec.region_box, sigma,
                           spec.ground_truth, self.seed, phantom.get('weight', 1.0))

    def geometry(self) -> TiltGeometry:
        """
        Acquisition geometry: the preset's, with any of the geometry section's
        entries substituted.

        Explicit `angles_deg` win over `angle_range`/`endpoint`; times default to
        the linear schedule of the angles. Inconsistent combinations are
        reported as ConfigError.
        """
        section = self.section('geometry')
        base = geometry_preset(self.preset, section.get('n_tilts'), section.get('detector_pixels'),
                               section.get('shape_sigma'))
        if 'angles_deg' in section:
            angles = section['angles_deg']
            times = section.get('times', TiltGeometry.linear_schedule(len(angles))[1])
        elif 'angle_range' in section or 'endpoint' in section:
            start, stop = section.get('angle_range', (-70.0, 70.0))
            endpoint = section.get('endpoint', self.dimension == 3)
            angles, times = TiltGeometry.linear_schedule(base.n_tilts, start, stop, endpoint)
            times = section.get('times', times)
        else:
            angles, times = base.angles_deg, section.get('times', base.times)
        detector = base.detector_shape
        pixel_size = section.get('pixel_size', base.pixel_size)
        try:
            return TiltGeometry(angles, times, detector, pixel_size, base.shape_sigma,
                                section.get('sample_box', base.sample_box), section.get('tilt_axis', 'y'))
        except ValueError as e:
            raise ConfigError(f"Invalid geometry section: {e}")

    def count_model(self) -> CountModel:
        return CountModel(**self.section('count_model'))

    def noise(self) -> NoiseSpec:
        return NoiseSpec(**self.section('noise'))

    def preprocess_mode(self) -> str:
        """'simulated' (Anscombe-stabilized counts) or 'experimental' (bead normalization)."""
        return self.section('preprocess').get('mode', 'simulated')

    def bead_intensity(self) -> Optional[float]:
        return self.section('preprocess').get('bead_intensity')

    def solver_config(self, env: Optional[Config] = None) -> SolverConfig:
        """
        Solver settings from the solver section.

        Args:
            env: When given, its thread count and chunk size are applied

        Returns:
            A validated SolverConfig
        """
        section = self.section('solver')
        if 'candidate_grid_shape' in section:
            section['candidate_grid_shape'] = tuple(section['candidate_grid_shape'])
        if 'deformation_components' in section:
            section['deformation_components'] = tuple(section['deformation_components'])
        if env is not None:
            section['num_threads'] = env.num_threads
            section['chunk_size'] = env.chunk_size
        return SolverConfig(**section)

    def schedule(self, data_shape: Sequence[int]) -> ResolutionSchedule:
        """Resolution schedule for a detector shape; `schedule.tolerance` falls back to the solver's loss tolerance."""
        section = self.section('schedule')
        etas = section.get('etas', DEFAULT_SCHEDULES[len(data_shape) + 1])
        tolerance = section.get('tolerance', self.section('solver').get('loss_tolerance', 1e-6))
        return make_resolution_schedule(data_shape, etas, tolerance)

    def evaluation_grid(self, box) -> EvaluationGrid:
        """Evaluation grid over `box`, the configured shape or the default one."""
        shape = self.section('evaluation').get('grid_shape')
        if shape is None:
            return EvaluationGrid.default(box)
        return EvaluationGrid(box, tuple(shape))

    def match_radius(self, geometry: TiltGeometry) -> float:
        """Marker matching radius in length units (pixels times pixel size)."""
        return self.section('evaluation').get('match_radius_pixels', 1.0) * geometry.pixel_size

    def output_path(self, name: str, directory: Optional[Union[str, Path]] = None) -> Path:
        """Path of an output file under --out, output.directory or the working directory; the directory is created."""
        output = self.section('output')
        root = Path(directory or output.get('directory', '.'))
        root.mkdir(parents=True, exist_ok=True)
        return root / f"{output.get('prefix', '')}{name}"

    def to_dict(self) -> Dict[str, Any]:
        """Deep copy of the configuration document."""
        return json.loads(json.dumps(self.data))

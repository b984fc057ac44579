"""Front end tying simulation, alignment, the trace baseline and evaluation to one run configuration."""

import logging
import time
from typing import Dict, Optional

from .baseline_dm import DmResult, MarkerTraces, dm_fit
from .config import Config, RunConfig
from .errors import DataError
from .evaluate import ErrorReport, build_error_report
from .model.types import DeformationModel, MarkerSet, TiltGeometry, TiltStack
from .simulate import Measurement, preprocess_counts, simulate_measurement
from .solver.sparsealign import IterationCallback, Truth, run_coarse_to_fine
from .solver.state import AlignmentResult

logger = logging.getLogger(__name__)


class SparseAligner:
    """Runs every stage of an experiment with the settings of one RunConfig."""

    def __init__(self, run_config: Optional[RunConfig] = None, env: Optional[Config] = None):
        """
        Initialize the aligner.

        Args:
            run_config: Experiment settings (the 2D preset when omitted)
            env: Process settings; thread count and chunk size feed the solver
        """
        self.env = env or Config()
        self.run_config = run_config or RunConfig()
        self.solver_config = self.run_config.solver_config(self.env)
        self.stats: Dict[str, float] = {'alignments': 0, 'iterations': 0, 'seconds': 0.0}

        logger.info(f"SparseAligner ready ({self.run_config.preset} preset, seed {self.run_config.seed}):")
        logger.info(f"   - Max iterations per level: {self.solver_config.n_max}")
        logger.info(f"   - Prune threshold: {self.solver_config.prune_threshold}")
        logger.info(f"   - Deformation: degree {self.solver_config.spatial_degree} in space, "
                    f"{self.solver_config.temporal_degree} in time, components "
                    f"{','.join(self.solver_config.deformation_components)}")
        logger.info(f"   - Coarse render: {self.solver_config.sigma_mode.value}")
        logger.info(f"   - Threads: {self.solver_config.num_threads}")

    def simulate(self) -> Measurement:
        """Simulate the configured phantom: ground truth plus the noisy, preprocessed stack."""
        return simulate_measurement(self.run_config.phantom_spec(), self.run_config.geometry(),
                                    self.run_config.count_model(), self.run_config.noise(), self.run_config.seed,
                                    self.solver_config.sigma_mode)

    def prepare(self, stack: TiltStack) -> TiltStack:
        """Apply experimental-mode preprocessing when the run configuration asks for it."""
        if self.run_config.preprocess_mode() != 'experimental':
            return stack
        return preprocess_counts(stack, 'experimental', bead_intensity=self.run_config.bead_intensity())

    def align(self, stack: TiltStack, truth: Optional[Truth] = None,
              on_iteration: Optional[IterationCallback] = None) -> AlignmentResult:
        """
        Run the coarse-to-fine solver over the configured resolution schedule.

        Args:
            stack: Full-resolution measured stack
            truth: Ground-truth markers and deformation, for per-iteration error tracking
            on_iteration: Called after every outer iteration of every level

        Returns:
            The alignment result; run counters in `stats` are updated
        """
        started = time.time()
        if stack.decimation != 1:
            raise DataError(f"Alignment needs a full-resolution stack, got eta={stack.eta}")
        geometry = stack.geometry
        schedule = self.run_config.schedule(geometry.detector_shape)
        logger.info(f"Aligning {stack.n_tilts} frames of {geometry.detector_shape} over etas "
                    f"{[str(eta) for eta in schedule.etas]}")
        grid = self.run_config.evaluation_grid(geometry.sample_box) if truth is not None else None
        result = run_coarse_to_fine(stack, geometry, schedule, self.solver_config, truth, grid, on_iteration)

        elapsed = time.time() - started
        self.stats['alignments'] += 1
        self.stats['iterations'] += sum(level.iterations for level in result.levels)
        self.stats['seconds'] += elapsed
        logger.info(f"Alignment finished in {elapsed:.2f}s: {len(result.markers)} markers, "
                    f"loss {result.initial_loss:.6e} -> {result.final_loss:.6e}")
        return result

    def baseline(self, traces: MarkerTraces, geometry: TiltGeometry) -> DmResult:
        """Fit the doming baseline with the same deformation degrees, components and bound as the solver."""
        model = self.solver_config.initial_model(geometry)
        return dm_fit(traces, geometry, model.spatial_degree, model.temporal_degree,
                      self.solver_config.deformation_components, model.coordinate_scale,
                      self.solver_config.deformation_bound_factor)

    def evaluate(self, gt_model: DeformationModel, est_model: DeformationModel, gt_markers: MarkerSet,
                 est_markers: Optional[MarkerSet], geometry: TiltGeometry) -> ErrorReport:
        """Error report of an estimate against ground truth on the configured evaluation grid."""
        grid = self.run_config.evaluation_grid(geometry.sample_box)
        return build_error_report(gt_model, est_model, gt_markers, est_markers, grid,
                                  self.run_config.match_radius(geometry))

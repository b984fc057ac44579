#!/usr/bin/env python3
"""
Command-line entry point: simulate tilt series, align them, run the trace
baseline, evaluate estimates and render stacks from results.

Machine-readable outputs go to files; logs go to standard error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional, Tuple, TypeVar

from pythonjsonlogger import jsonlogger

from src.aligner import SparseAligner
from src.baseline_dm import generate_traces
from src.config import Config, RunConfig
from src.errors import ConfigError, DataError, SparseAlignError
from src.evaluate import field_image
from src.fileio import (read_json, read_mrc, read_tiltstack, read_traces, require_keys, write_field_csv,
                        write_json, write_loss_csv, write_pgm, write_tiltstack, write_traces)
from src.model.projection import SigmaMode, render_stack
from src.model.types import DeformationModel, MarkerSet, TiltGeometry

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - [%(funcName)s:%(lineno)d] - %(message)s'

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

T = TypeVar('T')

logger = logging.getLogger(__name__)


def configure_logging(env: Config) -> None:
    """Root logger on stderr, plus a log file when SPARSEALIGN_LOG_FILE is set."""
    if env.log_format == 'json':
        formatter = jsonlogger.JsonFormatter('%(asctime)s %(name)s %(levelname)s %(funcName)s %(lineno)d %(message)s')
    else:
        formatter = logging.Formatter(LOG_FORMAT)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if env.log_file:
        handlers.append(logging.FileHandler(env.log_file))
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    root.setLevel(env.log_level)


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser that reports bad command lines as ConfigError instead of exiting."""

    def error(self, message: str):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    """Parser for every subcommand; subparsers inherit the raising error handler."""
    parser = ArgumentParser(prog='sparsealign', description=__doc__.strip().splitlines()[0])
    commands = parser.add_subparsers(dest='command', required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument('--config', type=Path, help='JSON run configuration')
        sub.add_argument('--out', type=Path, help='output directory (default: output.directory or .)')

    simulate = commands.add_parser('simulate', help='generate a phantom tilt series with ground truth')
    common(simulate)
    simulate.add_argument('--seed', type=int, help='override the configured seed')

    align = commands.add_parser('align', help='localize markers and estimate the deformation')
    common(align)
    source = align.add_mutually_exclusive_group(required=True)
    source.add_argument('--stack', type=Path, help='TSTK1 tilt stack')
    source.add_argument('--mrc', type=Path, help='MRC2014 tilt series (angles from the configuration)')
    align.add_argument('--truth', type=Path, help='ground-truth JSON for per-iteration error tracking')
    align.add_argument('--fixed-sigma', action='store_true', help='coarse levels use the unwidened marker width')

    baseline = commands.add_parser('baseline', help='fit the doming model to labelled marker traces')
    common(baseline)
    baseline.add_argument('--traces', type=Path, required=True, help='trace CSV')

    evaluate = commands.add_parser('eval', help='compare an estimate against ground truth')
    common(evaluate)
    evaluate.add_argument('--truth', type=Path, required=True, help='ground-truth JSON')
    evaluate.add_argument('--result', type=Path, required=True, help='alignment or baseline result JSON')

    render = commands.add_parser('render', help='render a tilt stack from a result')
    common(render)
    render.add_argument('--result', type=Path, required=True, help='alignment result or ground-truth JSON')
    render.add_argument('--zero-deformation', action='store_true', help='ignore the deformation field')
    render.add_argument('--decimation', type=int, default=1, help='render on the grid decimated by this factor')
    render.add_argument('--fixed-sigma', action='store_true', help='coarse grids use the unwidened marker width')
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Run configuration from --config (or the presets), with the --seed and --fixed-sigma overrides applied."""
    run_config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, 'seed', None) is not None:
        run_config = run_config.with_seed(args.seed)
    if getattr(args, 'fixed_sigma', False):
        data = run_config.to_dict()
        data.setdefault('solver', {})['sigma_mode'] = SigmaMode.FIXED.value
        run_config = RunConfig(data)
    return run_config


def _decoded(source: Path, build: Callable[[], T]) -> T:
    """Run a from_dict decoder, reporting missing or malformed entries as DataError."""
    try:
        return build()
    except SparseAlignError:
        raise
    except KeyError as e:
        raise DataError(f"{source}: missing required key {e}")
    except (TypeError, ValueError) as e:
        raise DataError(f"{source}: malformed entry: {e}")


def _geometry_from(document: dict, run_config: RunConfig, source: Path) -> TiltGeometry:
    """Geometry stored in a document, falling back to the run configuration when it has none."""
    if 'geometry' not in document:
        return run_config.geometry()
    return _decoded(source, lambda: TiltGeometry.from_dict(document['geometry']))


def _load_estimate(path: Path, need_markers: bool = True) -> Tuple[dict, Optional[MarkerSet], DeformationModel]:
    """
    Read a result or ground-truth document.

    Args:
        path: JSON file written by simulate, align or baseline.
        need_markers: Whether a missing 'markers' entry is an error.

    Returns:
        The document, its markers (None when absent and not needed) and its deformation model.
    """
    document = read_json(path)
    require_keys(document, ('markers', 'model') if need_markers else ('model',), str(path))
    markers = None
    if 'markers' in document:
        markers = _decoded(path, lambda: MarkerSet.from_dict(document['markers']))
    model = _decoded(path, lambda: DeformationModel.from_dict(document['model']))
    return document, markers, model


def cmd_simulate(args: argparse.Namespace, aligner: SparseAligner) -> None:
    """Write stack.tstk, traces.csv and ground_truth.json for a simulated phantom."""
    run_config = aligner.run_config
    measurement = aligner.simulate()
    geometry = measurement.data.geometry
    write_tiltstack(run_config.output_path('stack.tstk', args.out), measurement.data)
    write_traces(run_config.output_path('traces.csv', args.out),
                 generate_traces(measurement.markers, measurement.model, geometry))
    write_json(run_config.output_path('ground_truth.json', args.out), {
        'markers': measurement.markers.to_dict(),
        'model': measurement.model.to_dict(),
        'geometry': geometry.to_dict(),
        'simulation': measurement.info,
    })
    logger.info(f"Simulated {len(measurement.markers)} markers over {geometry.n_tilts} tilts")


def cmd_align(args: argparse.Namespace, aligner: SparseAligner) -> None:
    """
    Align a TSTK1 stack or an MRC series and write result.json and loss.csv.

    With --truth, the marker and global deformation errors are tracked
    after every outer iteration and stored in the result.
    """
    run_config = aligner.run_config
    if args.stack:
        stack = read_tiltstack(args.stack)
    else:
        geometry = run_config.geometry()
        geometry_section = run_config.section('geometry')
        stack = read_mrc(args.mrc, geometry.angles_deg, geometry.shape_sigma, geometry.times,
                         geometry_section.get('sample_box'), geometry_section.get('pixel_size'),
                         geometry.tilt_axis)
    stack = aligner.prepare(stack)
    truth = None
    if args.truth:
        _, gt_markers, gt_model = _load_estimate(args.truth)
        truth = (gt_markers, gt_model)
    result = aligner.align(stack, truth)
    payload = result.to_dict()
    payload['geometry'] = stack.geometry.to_dict()
    payload['solver'] = aligner.solver_config.to_dict()
    write_json(run_config.output_path('result.json', args.out), payload)
    write_loss_csv(run_config.output_path('loss.csv', args.out), result.loss_history)


def cmd_baseline(args: argparse.Namespace, aligner: SparseAligner) -> None:
    """Fit the doming baseline to a trace CSV and write dm_result.json."""
    run_config = aligner.run_config
    traces = read_traces(args.traces)
    geometry = run_config.geometry()
    result = aligner.baseline(traces, geometry)
    payload = result.to_dict()
    payload['geometry'] = geometry.to_dict()
    write_json(run_config.output_path('dm_result.json', args.out), payload)


def cmd_eval(args: argparse.Namespace, aligner: SparseAligner) -> None:
    """Score a result against ground truth: report.json plus the error field as PGM and CSV."""
    run_config = aligner.run_config
    truth, gt_markers, gt_model = _load_estimate(args.truth)
    _, est_markers, est_model = _load_estimate(args.result, need_markers=False)
    geometry = _geometry_from(truth, run_config, args.truth)
    report = aligner.evaluate(gt_model, est_model, gt_markers, est_markers, geometry)
    write_json(run_config.output_path('report.json', args.out), report.to_dict())
    write_pgm(run_config.output_path('error_field.pgm', args.out), field_image(report.error_field))
    write_field_csv(run_config.output_path('error_field.csv', args.out), report.error_field,
                    run_config.evaluation_grid(geometry.sample_box))


def cmd_render(args: argparse.Namespace, aligner: SparseAligner) -> None:
    """Render the stack a result predicts, optionally without deformation or on a coarser grid."""
    run_config = aligner.run_config
    document, markers, model = _load_estimate(args.result)
    geometry = _geometry_from(document, run_config, args.result)
    if args.decimation < 1:
        raise ConfigError(f"--decimation must be a positive integer, got {args.decimation}")
    stack = render_stack(markers, model, geometry, args.decimation, aligner.solver_config.sigma_mode,
                         aligner.solver_config.truncate, zero_deformation=args.zero_deformation)
    name = 'rendered_zero_deformation.tstk' if args.zero_deformation else 'rendered.tstk'
    write_tiltstack(run_config.output_path(name, args.out), stack)


COMMANDS = {
    'simulate': cmd_simulate,
    'align': cmd_align,
    'baseline': cmd_baseline,
    'eval': cmd_eval,
    'render': cmd_render,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    env = Config()
    configure_logging(env)
    try:
        args = build_parser().parse_args(argv)
        aligner = SparseAligner(_run_config(args), env)
        COMMANDS[args.command](args, aligner)
    except ConfigError as e:
        print(f"E: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"E: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        print(f"E: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

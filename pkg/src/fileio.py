"""
File formats: the TSTK1 tilt-stack container, MRC2014 ingest, trace and
loss CSVs, JSON documents and PGM image dumps.
"""

import csv
import json
import logging
import struct
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Union

import mrcfile
import numpy as np

from .baseline_dm import MarkerTraces
from .errors import ConfigError, DataError
from .evaluate import EvaluationGrid, field_image
from .model.types import TiltGeometry, TiltStack
from .solver.state import LossRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAGIC = b"TSTK1"
HEADER_LENGTH = struct.Struct('<I')
SUPPORTED_MRC_MODES = (1, 2)
ANGSTROM_PER_NM = 10.0
PGM_MAXVAL = 255

TSTK_HEADER_KEYS = ('n_tilts', 'detector_shape', 'angles_deg', 'times', 'pixel_size', 'shape_sigma',
                    'sample_box')


# ----------------------------------------------------------------------
# TSTK1 tilt stacks
# ----------------------------------------------------------------------

def require_keys(document: Dict, keys: Iterable[str], source: str) -> None:
    """
    Raise DataError naming the first key that `document` lacks.

    Args:
        document: Parsed JSON object.
        keys: Keys that must be present.
        source: Where the document came from, for the message.
    """
    if not isinstance(document, dict):
        raise DataError(f"{source}: expected a JSON object, got {type(document).__name__}")
    for key in keys:
        if key not in document:
            raise DataError(f"{source}: missing required key '{key}'")


def write_tiltstack(path: PathLike, stack: TiltStack) -> None:
    """
    Write b"TSTK1", a little-endian uint32 header length, the JSON header,
    then the frames as little-endian float32, frame-major and row-major.
    """
    frames = np.asarray(stack.frames)
    if np.any(np.isnan(frames)):
        raise DataError("Refusing to write a tilt stack containing NaN values")
    geometry = stack.geometry
    header = {
        'magic': MAGIC.decode('ascii'),
        'dimension': geometry.dim,
        'n_tilts': geometry.n_tilts,
        'detector_shape': list(geometry.detector_shape),
        'angles_deg': geometry.angles_deg.tolist(),
        'times': geometry.times.tolist(),
        'pixel_size': geometry.pixel_size,
        'eta': str(stack.eta),
        'dtype': 'f32le',
        'shape_sigma': geometry.shape_sigma,
        'tilt_axis': geometry.tilt_axis,
        'detector_origin': list(geometry.detector_origin),
        'sample_box': geometry.sample_box.tolist(),
    }
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as handle:
        handle.write(MAGIC)
        handle.write(HEADER_LENGTH.pack(len(encoded)))
        handle.write(encoded)
        handle.write(frames.astype('<f4').tobytes(order='C'))
    logger.debug(f"Wrote {frames.shape} tilt stack to {path}")


def read_tiltstack(path: PathLike) -> TiltStack:
    """
    Read a TSTK1 stack written by write_tiltstack.

    Args:
        path: File to read

    Returns:
        The stack with its geometry and downsampling factor from the header

    A bad magic, a truncated or incomplete header, a payload of the wrong
    size or an inconsistent geometry is a DataError naming the file.
    """
    raw = Path(path).read_bytes()
    prefix = len(MAGIC) + HEADER_LENGTH.size
    if len(raw) < prefix or raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a TSTK1 file (bad magic)")
    (header_length,) = HEADER_LENGTH.unpack_from(raw, len(MAGIC))
    if len(raw) < prefix + header_length:
        raise DataError(f"{path}: truncated header, expected {header_length} bytes, "
                        f"got {len(raw) - prefix}")
    try:
        header = json.loads(raw[prefix:prefix + header_length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable header: {e}")
    require_keys(header, TSTK_HEADER_KEYS, f"{path} header")
    if header.get('magic') != MAGIC.decode('ascii') or header.get('dtype') != 'f32le':
        raise DataError(f"{path}: unsupported header magic/dtype {header.get('magic')}/{header.get('dtype')}")

    try:
        shape = (int(header['n_tilts']),) + tuple(int(n) for n in header['detector_shape'])
    except (TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed stack shape in header: {e}")
    expected = int(np.prod(shape)) * 4
    payload = raw[prefix + header_length:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    frames = np.frombuffer(payload, dtype='<f4').reshape(shape).astype(float)

    try:
        geometry = TiltGeometry(header['angles_deg'], header['times'], tuple(header['detector_shape']),
                                header['pixel_size'], header['shape_sigma'], header['sample_box'],
                                header.get('tilt_axis', 'y'), header.get('detector_origin'))
    except (TypeError, ValueError) as e:
        raise DataError(f"{path}: inconsistent geometry in header: {e}")
    eta = Fraction(header.get('eta', '1'))
    if eta.numerator != 1:
        raise DataError(f"{path}: downsampling factor {eta} is not 1/n")
    return TiltStack(frames, geometry, eta.denominator)


# ----------------------------------------------------------------------
# MRC ingest
# ----------------------------------------------------------------------

def read_mrc(path: PathLike, angles_deg: Sequence[float], shape_sigma: float,
             times: Optional[Sequence[float]] = None, sample_box: Optional[Sequence[Sequence[float]]] = None,
             pixel_size: Optional[float] = None, tilt_axis: str = 'y') -> TiltStack:
    """
    Read an MRC2014 tilt series (mode 1 or 2) as a TiltStack.

    Sections become frames with axes (x, y). The pixel size is taken from the
    header voxel size (Angstrom, converted to nm) unless given. Without a
    sample box the x/y extent of the detector is used with a z range of one
    eighth of the half width.
    """
    try:
        with mrcfile.open(str(path), mode='r', permissive=False) as mrc:
            mode = int(mrc.header.mode)
            if mode not in SUPPORTED_MRC_MODES:
                raise DataError(f"{path}: unsupported MRC mode {mode}; supported modes are {SUPPORTED_MRC_MODES}")
            data = np.asarray(mrc.data, dtype=float)
            voxel = float(mrc.voxel_size.x)
    except ValueError as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{path}: invalid MRC file: {e}")

    if data.ndim == 2:
        data = data[None]
    frames = np.transpose(data, (0, 2, 1))
    if pixel_size is None:
        if not voxel > 0:
            raise ConfigError(f"{path}: header has no voxel size; set geometry.pixel_size")
        pixel_size = voxel / ANGSTROM_PER_NM
    if len(angles_deg) != frames.shape[0]:
        raise ConfigError(f"{len(angles_deg)} tilt angles given for {frames.shape[0]} MRC sections")
    if times is None:
        times = TiltGeometry.linear_schedule(frames.shape[0])[1]
    if sample_box is None:
        half = 0.5 * np.array(frames.shape[1:]) * pixel_size
        sample_box = [[-half[0], half[0]], [-half[1], half[1]], [-half[0] / 8, half[0] / 8]]
    geometry = TiltGeometry(angles_deg, times, frames.shape[1:], pixel_size, shape_sigma, sample_box, tilt_axis)
    logger.info(f"Read {frames.shape[0]} MRC sections of {frames.shape[1:]} pixels ({pixel_size:g} nm) from {path}")
    return TiltStack(frames, geometry)


# ----------------------------------------------------------------------
# CSV and JSON
# ----------------------------------------------------------------------

def write_traces(path: PathLike, traces: MarkerTraces) -> None:
    """One CSV row per (tilt, marker) pair with the detector coordinates at full float precision."""
    n_coords = traces.positions.shape[2]
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['tilt_index', 'marker_id'] + [f'coord{k}' for k in range(n_coords)] + ['valid'])
        for t in range(traces.n_tilts):
            for j in range(traces.n_markers):
                coords = [repr(float(v)) for v in traces.positions[t, j]]
                writer.writerow([t, j] + coords + [int(traces.valid[t, j])])


def read_traces(path: PathLike) -> MarkerTraces:
    """Parse a trace CSV; missing pairs become invalid entries."""
    with open(path, newline='') as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise DataError(f"{path}: no trace rows")
    coord_columns = sorted((c for c in rows[0] if c.startswith('coord')), key=lambda c: int(c[5:]))
    missing = {'tilt_index', 'marker_id', 'valid'} - set(rows[0])
    if missing or not coord_columns:
        raise DataError(f"{path}: missing trace columns {sorted(missing) or ['coord0']}")
    try:
        n_tilts = max(int(row['tilt_index']) for row in rows) + 1
        n_markers = max(int(row['marker_id']) for row in rows) + 1
        positions = np.full((n_tilts, n_markers, len(coord_columns)), np.nan)
        valid = np.zeros((n_tilts, n_markers), dtype=bool)
        for row in rows:
            t, j = int(row['tilt_index']), int(row['marker_id'])
            positions[t, j] = [float(row[c]) for c in coord_columns]
            valid[t, j] = bool(int(row['valid']))
    except ValueError as e:
        raise DataError(f"{path}: malformed trace row: {e}")
    return MarkerTraces(positions, valid)


def _json_default(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Fraction):
        return str(value)
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def write_json(path: PathLike, data: Dict) -> None:
    """Sorted keys and no timestamps, so identical inputs give identical bytes."""
    with open(path, 'w') as handle:
        json.dump(data, handle, sort_keys=True, indent=2, default=_json_default)
        handle.write('\n')


def read_json(path: PathLike) -> Dict:
    """Parse a JSON document; a missing or invalid file is a DataError."""
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise DataError(f"{path}: file not found")
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}")


def write_loss_csv(path: PathLike, history: Iterable[LossRecord]) -> None:
    """Loss history as CSV, one row per recorded step."""
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['level', 'decimation', 'iteration', 'step', 'loss', 'n_markers'])
        for record in history:
            writer.writerow([record.level, record.decimation, record.iteration, record.step,
                             repr(record.loss), record.n_markers])


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """ASCII (P2) greyscale image, linearly scaled from the image minimum to maximum."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise DataError(f"PGM export needs a 2D image, got shape {image.shape}")
    low, high = float(image.min()), float(image.max())
    if high > low:
        scaled = np.rint((image - low) / (high - low) * PGM_MAXVAL).astype(int)
    else:
        scaled = np.zeros(image.shape, dtype=int)
    # rows of the PGM run along the second array axis
    rows = scaled.T
    with open(path, 'w') as handle:
        handle.write(f"P2\n{rows.shape[1]} {rows.shape[0]}\n{PGM_MAXVAL}\n")
        for row in rows:
            handle.write(' '.join(str(v) for v in row) + '\n')


def write_field_csv(path: PathLike, error_field: np.ndarray, grid: EvaluationGrid) -> None:
    """The exported image of an error field with its node coordinates."""
    image = field_image(error_field)
    axes = grid.axes()
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        if grid.dim == 2:
            writer.writerow(['x', 'z', 'error'])
            for i, x in enumerate(axes[0]):
                for k, z in enumerate(axes[1]):
                    writer.writerow([repr(float(x)), repr(float(z)), repr(float(image[i, k]))])
        else:
            z = float(axes[2][error_field.shape[2] // 2])
            writer.writerow(['x', 'y', 'z', 'error'])
            for i, x in enumerate(axes[0]):
                for k, y in enumerate(axes[1]):
                    writer.writerow([repr(float(x)), repr(float(y)), repr(z), repr(float(image[i, k]))])

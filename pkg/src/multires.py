"""Anti-aliased downsampling of tilt stacks and the coarse-to-fine resolution schedule."""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .model.types import TiltStack

logger = logging.getLogger(__name__)

MIN_LEVEL_PIXELS = 8

EtaLike = Union[str, float, int, Fraction]


def parse_eta(value: EtaLike) -> Fraction:
    """Parse a downsampling factor such as '1/8', 0.125 or 1 and check 1/eta is an integer."""
    try:
        eta = Fraction(str(value)).limit_denominator(1 << 20)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"Invalid downsampling factor: {value!r}")
    if eta <= 0 or eta > 1 or eta.numerator != 1:
        raise ConfigError(f"Downsampling factor must be 1/n for a positive integer n, got {value!r}")
    return eta


@dataclass(frozen=True)
class ResolutionSchedule:
    """Decimation levels from coarse to fine with their loss tolerances."""

    decimations: Tuple[int, ...]
    tolerances: Tuple[float, ...]
    dropped: Tuple[int, ...] = ()

    def __post_init__(self):
        if not self.decimations:
            raise ConfigError("Resolution schedule is empty")
        if len(self.decimations) != len(self.tolerances):
            raise ConfigError("Resolution schedule needs one tolerance per level")
        if any(d < 1 for d in self.decimations):
            raise ConfigError(f"Decimation factors must be positive integers, got {self.decimations}")
        if any(a <= b for a, b in zip(self.decimations, self.decimations[1:])):
            raise ConfigError(f"Downsampling factors must be strictly increasing, got {self.etas}")
        if any(t <= 0 for t in self.tolerances):
            raise ConfigError("Level tolerances must be positive")

    @property
    def etas(self) -> Tuple[Fraction, ...]:
        """Downsampling factors 1/decimation, coarse to fine."""
        return tuple(Fraction(1, d) for d in self.decimations)

    def __len__(self) -> int:
        return len(self.decimations)

    def to_dict(self):
        return {
            'etas': [str(eta) for eta in self.etas],
            'tolerances': list(self.tolerances),
            'dropped': [str(Fraction(1, d)) for d in self.dropped],
        }


def make_resolution_schedule(data_shape: Sequence[int], base_etas: Sequence[EtaLike],
                             tolerance: Union[float, Sequence[float]] = 1e-6,
                             min_pixels: int = MIN_LEVEL_PIXELS) -> ResolutionSchedule:
    """
    Validate downsampling factors against the detector shape.

    Levels whose decimated detector would have fewer than `min_pixels`
    pixels along any axis are dropped with a warning.

    Args:
        data_shape: Full-resolution detector shape
        base_etas: Requested factors such as "1/8" or 0.25, in any order
        tolerance: One loss tolerance for every level, or one per requested factor
        min_pixels: Smallest admissible decimated detector extent

    Returns:
        The feasible levels ordered coarse to fine, plus the dropped ones
    """
    etas = [parse_eta(eta) for eta in base_etas]
    if not etas:
        raise ConfigError("No downsampling factors given")
    if isinstance(tolerance, (int, float)):
        tolerances = [float(tolerance)] * len(etas)
    else:
        tolerances = [float(t) for t in tolerance]
        if len(tolerances) != len(etas):
            raise ConfigError(f"Got {len(tolerances)} tolerances for {len(etas)} levels")

    order = sorted(range(len(etas)), key=lambda i: etas[i])
    kept, kept_tol, dropped = [], [], []
    for i in order:
        decimation = etas[i].denominator
        coarse = [int(math.ceil(n / decimation)) for n in data_shape]
        if min(coarse) < min_pixels:
            logger.warning(f"Dropping level eta={etas[i]}: {coarse} pixels is below the {min_pixels}-pixel floor")
            dropped.append(decimation)
            continue
        if kept and kept[-1] == decimation:
            raise ConfigError(f"Duplicate downsampling factor {etas[i]}")
        kept.append(decimation)
        kept_tol.append(tolerances[i])

    if not kept:
        raise ConfigError(f"No feasible resolution level for detector shape {tuple(data_shape)}")
    return ResolutionSchedule(tuple(kept), tuple(kept_tol), tuple(dropped))


def downsample_stack(stack: TiltStack, eta: EtaLike) -> TiltStack:
    """
    Gaussian anti-aliasing (std f/2 pixels, reflect boundary) followed by
    keeping every f-th pixel from index 0, where f is the decimation from
    the stack's resolution to `eta`.
    """
    target = parse_eta(eta).denominator
    if target % stack.decimation != 0:
        raise DataError(
            f"Cannot go from eta=1/{stack.decimation} to eta=1/{target}: "
            f"decimation factor {target}/{stack.decimation} is not an integer"
        )
    factor = target // stack.decimation
    if factor == 1:
        return stack

    sigma = (0.0,) + (factor / 2.0,) * (stack.frames.ndim - 1)
    filtered = ndimage.gaussian_filter(np.asarray(stack.frames, dtype=float), sigma=sigma, mode='reflect')
    keep = (slice(None),) + (slice(None, None, factor),) * (stack.frames.ndim - 1)
    logger.debug(f"Downsampled stack by {factor}: {stack.frames.shape} -> {filtered[keep].shape}")
    return TiltStack(filtered[keep], stack.geometry.coarsen(factor), target)

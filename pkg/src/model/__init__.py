"""Marker/deformation model and the forward projection operator."""

from .deformation import deformation_eval, deformation_jacobians, displacements
from .projection import (ForwardModel, ImageGradients, SigmaMode, image_loss_and_gradients,
                         projected_locations, render_stack)
from .types import DeformationModel, MarkerSet, TiltGeometry, TiltStack, component_index, monomial_exponents

__all__ = [
    'DeformationModel', 'MarkerSet', 'TiltGeometry', 'TiltStack',
    'ForwardModel', 'ImageGradients', 'SigmaMode',
    'deformation_eval', 'deformation_jacobians', 'displacements',
    'image_loss_and_gradients', 'projected_locations', 'render_stack',
    'component_index', 'monomial_exponents',
]

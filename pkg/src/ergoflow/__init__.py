"""One-dimensional stochastic flows: invariant measures, pullback sampling and focusing rates."""

__version__ = "0.1.0"

from .coeffs import DiffusionModel, make_model, validate_recurrence
from .measures import build_measures, spectral_gap_bound
from .noise import NoisePath, reversed_view, rotated_view, shifted_view

__all__ = [
    "DiffusionModel",
    "NoisePath",
    "build_measures",
    "make_model",
    "reversed_view",
    "rotated_view",
    "shifted_view",
    "spectral_gap_bound",
    "validate_recurrence",
]

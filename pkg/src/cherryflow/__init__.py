"""Flat-spot circle maps, their rotation numbers and invariant measures, and
the Cherry flows obtained by suspending them."""

from .numerics import LogMag, NumericContext, make_context
from .flatmap import FlatCircleMap, MapFamily, RigidRotation, SaddleSpec, make_standard_map

__version__ = "0.1.0"

__all__ = [
    "LogMag", "NumericContext", "make_context",
    "FlatCircleMap", "MapFamily", "RigidRotation", "SaddleSpec", "make_standard_map",
]

"""Numerical laboratory for admissible harmonic elastic waves on a periodic box."""

from .grid_spectral import Field, Grid3, LPBand
from .material import MaterialSpec

__all__ = ["Field", "Grid3", "LPBand", "MaterialSpec"]
__version__ = "0.1.0"

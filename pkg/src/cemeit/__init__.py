"""Complete-electrode-model EIT: FEM forward solver, model-based
reconstructions, phantom simulation and evaluation scores."""

from .errors import (
    CemError,
    ConfigError,
    DimensionError,
    GeometryError,
    NumericalError,
    UndefinedMetricError,
    ValidationError,
)
from .fem import Conductivity, CurrentPatterns, ElectrodeModel, MeasurementFrame
from .mesh import Mesh, build_disk_mesh

__version__ = "0.1.0"

__all__ = [
    "CemError",
    "ConfigError",
    "Conductivity",
    "CurrentPatterns",
    "DimensionError",
    "ElectrodeModel",
    "GeometryError",
    "MeasurementFrame",
    "Mesh",
    "NumericalError",
    "UndefinedMetricError",
    "ValidationError",
    "build_disk_mesh",
]

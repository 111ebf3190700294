"""Octree-based sparse CNN engine for 3D shape and scene completion."""

from .errors import DomainError, NumericalError
from .network import CompletionNet, NetworkSpec
from .octree import Octree, PointSet, build_octree

__all__ = [
    "CompletionNet",
    "DomainError",
    "NetworkSpec",
    "NumericalError",
    "Octree",
    "PointSet",
    "build_octree",
]

__version__ = "0.1.0"

"""Retrieve and align CAD models to RGB-D scans by rendering and comparing."""

from .geometry import Obb, Pose9, TriMesh

__all__ = ["Obb", "Pose9", "TriMesh"]
__version__ = "0.1.0"

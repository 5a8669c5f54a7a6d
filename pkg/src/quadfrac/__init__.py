"""Adaptive phase-field brittle fracture on quadtree/polygon meshes."""

from .quadtree import (
    MeshError,
    PolygonElement,
    QuadCell,
    QuadtreeMesh,
    RefinementDepthError,
    SlitAlignmentError,
    build_initial_mesh,
    extract_elements,
    leaf_adjacency,
    refine_cells,
)

__all__ = [
    "MeshError",
    "PolygonElement",
    "QuadCell",
    "QuadtreeMesh",
    "RefinementDepthError",
    "SlitAlignmentError",
    "build_initial_mesh",
    "extract_elements",
    "leaf_adjacency",
    "refine_cells",
]

__version__ = "0.1.0"

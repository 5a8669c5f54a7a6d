"""Quadtree meshes: 2:1-balanced refinement, slit embedding, polygon extraction.

Cells live on a global integer lattice anchored at the lower-left corner of
the domain bounding box, so multi-root domains (e.g. an L-shaped union of
squares) share one coordinate system and node merging is exact. Leaves whose
neighbors are finer gain mid-edge (hanging) nodes and are extracted as 4-8
sided polygons.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Node keys are integers on the lattice of depth _NODE_BITS; every mesh node
# of depth <= _MAX_DEPTH_LIMIT has an exact key, so coincident nodes merge
# exactly (far inside the 1e-9 * rootSize tolerance contract).
_NODE_BITS = 26
_MAX_DEPTH_LIMIT = 20

# child order is fixed: SW, SE, NW, NE
_CHILD_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))
_EDGE_STEPS = {"S": (0, -1), "E": (1, 0), "N": (0, 1), "W": (-1, 0)}
# children of an edge-neighbor that touch the querying cell, per direction
_FACING_CHILDREN = {"E": (0, 2), "W": (1, 3), "N": (0, 1), "S": (2, 3)}


class MeshError(ValueError):
    """Topological or geometric mesh violation."""


class SlitAlignmentError(MeshError):
    pass


class RefinementDepthError(MeshError):
    def __init__(self, cell_ids):
        self.cell_ids = sorted(cell_ids)
        super().__init__(
            f"refinement beyond max depth requested for cells {self.cell_ids}"
        )


@dataclass
class QuadCell:
    id: int
    level: int
    ix: int  # lattice coords at this cell's level
    iy: int
    origin: tuple[float, float]
    size: float
    parent: int | None
    children: tuple[int, int, int, int] | None = None  # SW, SE, NW, NE

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def center(self) -> tuple[float, float]:
        return (self.origin[0] + 0.5 * self.size, self.origin[1] + 0.5 * self.size)


@dataclass(frozen=True)
class PolygonElement:
    id: int
    cell_id: int
    nodes: tuple[int, ...]  # CCW loop, 4-8 entries under 2:1 balance


class _SlitLattice:
    """Straight axis-aligned slit in lattice keys.

    Nodes on the half-open span [mouth, tip) are duplicated into a minus and
    a plus face copy; the tip node stays single so the faces join there.
    """

    def __init__(self, points, anchor, root_size, depth):
        pts = [tuple(map(float, p)) for p in points]
        if len(pts) < 2:
            raise SlitAlignmentError("slit polyline needs at least two points")
        unit = 2.0**_NODE_BITS / root_size

        def key1(v, a):
            k = (v - a) * unit
            ki = int(round(k))
            if abs(k - ki) > 1e-6:
                raise SlitAlignmentError(f"slit point coordinate {v} is off-lattice")
            step = 1 << (_NODE_BITS - depth)
            if ki % step:
                raise SlitAlignmentError(
                    f"slit point coordinate {v} not on the depth-{depth} cell lattice"
                )
            return ki

        keys = [(key1(x, anchor[0]), key1(y, anchor[1])) for x, y in pts]
        xs = {k[0] for k in keys}
        ys = {k[1] for k in keys}
        if len(ys) == 1:
            self.axis = "h"  # line of constant y
            self.line_key = keys[0][1]
            along = [k[0] for k in keys]
            self.line_coord = pts[0][1]
        elif len(xs) == 1:
            self.axis = "v"
            self.line_key = keys[0][0]
            along = [k[1] for k in keys]
            self.line_coord = pts[0][0]
        else:
            raise SlitAlignmentError(
                "slit polyline must lie on a single axis-aligned line"
            )
        self.mouth_k = along[0]
        self.tip_k = along[-1]
        if self.mouth_k == self.tip_k:
            raise SlitAlignmentError("slit has zero length")
        self.points = tuple(pts)

    def duplicated(self, key) -> bool:
        """True if the node at ``key`` carries two face copies."""
        if self.axis == "h":
            on, along = key[1], key[0]
        else:
            on, along = key[0], key[1]
        if on != self.line_key:
            return False
        lo, hi = sorted((self.mouth_k, self.tip_k))
        if not (lo <= along <= hi):
            return False
        return along != self.tip_k

    def side(self, point) -> int:
        """-1/+1 for a point strictly below/above (left/right of) the slit line."""
        c = point[1] if self.axis == "h" else point[0]
        return -1 if c < self.line_coord else 1


class QuadtreeMesh:
    """Hierarchical cell tree plus the derived node table.

    Mutation (refinement) is single-writer; all queries are read-only.
    Construct via :func:`build_initial_mesh`.
    """

    def __init__(self, anchor, root_size, max_depth, slit_points=None):
        if not (0 <= max_depth <= _MAX_DEPTH_LIMIT):
            raise MeshError(f"max_depth must be in [0, {_MAX_DEPTH_LIMIT}]")
        self.anchor = (float(anchor[0]), float(anchor[1]))
        self.root_size = float(root_size)
        self.max_depth = int(max_depth)
        self.cells: list[QuadCell] = []
        self._cell_index: dict[tuple[int, int, int], int] = {}
        self._node_xy: list[tuple[float, float]] = []
        self._node_keys: list[tuple[int, int]] = []
        self._plain_nodes: dict[tuple[int, int], int] = {}
        self._slit_nodes: dict[tuple[int, int], list] = {}
        self._slit = None
        if slit_points is not None:
            # depth for alignment checks is set by build_initial_mesh
            self._slit_points = tuple(tuple(map(float, p)) for p in slit_points)
        else:
            self._slit_points = None
        self._coords_cache = None

    # ------------------------------------------------------------------ nodes

    def _coord_of_key(self, key):
        kx, ky = key
        return (
            self.anchor[0] + (kx * self.root_size) / 2.0**_NODE_BITS,
            self.anchor[1] + (ky * self.root_size) / 2.0**_NODE_BITS,
        )

    def _new_node(self, key) -> int:
        nid = len(self._node_xy)
        self._node_xy.append(self._coord_of_key(key))
        self._node_keys.append(key)
        self._coords_cache = None
        return nid

    def _node_id(self, key, side, create=True) -> int:
        if self._slit is not None and self._slit.duplicated(key):
            if side == 0:
                raise MeshError(f"slit node {key} requested without a face side")
            slot = 0 if side < 0 else 1
            rec = self._slit_nodes.setdefault(key, [None, None])
            if rec[slot] is None:
                if not create:
                    raise MeshError(f"missing slit node {key} side {side}")
                rec[slot] = self._new_node(key)
            return rec[slot]
        nid = self._plain_nodes.get(key)
        if nid is None:
            if not create:
                raise MeshError(f"missing node {key}")
            nid = self._new_node(key)
            self._plain_nodes[key] = nid
        return nid

    @property
    def num_nodes(self) -> int:
        return len(self._node_xy)

    def node_coords(self) -> np.ndarray:
        if self._coords_cache is None:
            self._coords_cache = np.asarray(self._node_xy, dtype=float).reshape(-1, 2)
        return self._coords_cache

    def slit_face_nodes(self):
        """(minus_ids, plus_ids) of the duplicated slit-face node pairs."""
        minus, plus = [], []
        for key in sorted(self._slit_nodes):
            rec = self._slit_nodes[key]
            if rec[0] is not None:
                minus.append(rec[0])
            if rec[1] is not None:
                plus.append(rec[1])
        return minus, plus

    # ------------------------------------------------------------------ cells

    def _corner_keys(self, level, ix, iy):
        shift = _NODE_BITS - level
        return [((ix + dx) << shift, (iy + dy) << shift) for dx, dy in _CHILD_OFFSETS]

    def _add_cell(self, level, ix, iy, parent) -> int:
        cid = len(self.cells)
        size = self.root_size / (1 << level)
        origin = self._coord_of_key((ix << (_NODE_BITS - level), iy << (_NODE_BITS - level)))
        cell = QuadCell(cid, level, ix, iy, origin, size, parent)
        self.cells.append(cell)
        self._cell_index[(level, ix, iy)] = cid
        side = self._slit.side(cell.center) if self._slit is not None else 0
        for key in self._corner_keys(level, ix, iy):
            dup = self._slit is not None and self._slit.duplicated(key)
            self._node_id(key, side if dup else 0)
        return cid

    def _find_at_or_above(self, level, ix, iy) -> QuadCell | None:
        """Cell at (level, ix, iy) or its deepest existing ancestor, else None."""
        while level >= 0:
            cid = self._cell_index.get((level, ix, iy))
            if cid is not None:
                return self.cells[cid]
            level -= 1
            ix >>= 1
            iy >>= 1
        return None

    def leaves(self):
        return [c for c in self.cells if c.is_leaf]

    @property
    def num_leaves(self) -> int:
        return sum(1 for c in self.cells if c.is_leaf)

    def domain_area(self) -> float:
        return sum(1 for c in self.cells if c.level == 0) * self.root_size**2

    # ------------------------------------------------------------- refinement

    def _split(self, cid):
        c = self.cells[cid]
        assert c.is_leaf and c.level < self.max_depth
        kids = tuple(
            self._add_cell(c.level + 1, 2 * c.ix + dx, 2 * c.iy + dy, cid)
            for dx, dy in _CHILD_OFFSETS
        )
        c.children = kids

    def _needs_split_for_balance(self, c: QuadCell) -> bool:
        for direction, (dx, dy) in _EDGE_STEPS.items():
            cid = self._cell_index.get((c.level, c.ix + dx, c.iy + dy))
            if cid is None:
                continue
            nb = self.cells[cid]
            if nb.children is None:
                continue
            for slot in _FACING_CHILDREN[direction]:
                if self.cells[nb.children[slot]].children is not None:
                    return True
        return False

    def _rebalance(self):
        while True:
            to_split = [
                c.id for c in self.cells if c.is_leaf and self._needs_split_for_balance(c)
            ]
            if not to_split:
                return
            for cid in to_split:
                c = self.cells[cid]
                if c.is_leaf:
                    assert c.level < self.max_depth, "balance cannot exceed max depth"
                    self._split(cid)

    def _refine(self, leaf_ids):
        ids = sorted(set(int(i) for i in leaf_ids))
        for cid in ids:
            if cid < 0 or cid >= len(self.cells) or not self.cells[cid].is_leaf:
                raise MeshError(f"cell {cid} is not a current leaf")
        too_deep = [cid for cid in ids if self.cells[cid].level >= self.max_depth]
        if too_deep:
            raise RefinementDepthError(too_deep)
        for cid in ids:
            self._split(cid)
        self._rebalance()

    def copy(self) -> "QuadtreeMesh":
        other = QuadtreeMesh.__new__(QuadtreeMesh)
        other.anchor = self.anchor
        other.root_size = self.root_size
        other.max_depth = self.max_depth
        other.cells = [
            QuadCell(c.id, c.level, c.ix, c.iy, c.origin, c.size, c.parent, c.children)
            for c in self.cells
        ]
        other._cell_index = dict(self._cell_index)
        other._node_xy = list(self._node_xy)
        other._node_keys = list(self._node_keys)
        other._plain_nodes = dict(self._plain_nodes)
        other._slit_nodes = {k: list(v) for k, v in self._slit_nodes.items()}
        other._slit = self._slit
        other._slit_points = self._slit_points
        other._coords_cache = None
        return other

    # ------------------------------------------------------------ geometry Qs

    def _root_candidates(self, frac, slit_on_axis, side):
        i0 = int(np.floor(frac))
        if frac != i0:
            return [i0]
        if slit_on_axis and side < 0:
            return [i0 - 1, i0]
        return [i0, i0 - 1]

    def locate_leaf(self, point, side=0) -> QuadCell:
        """Leaf whose closed cell contains ``point``.

        Points on internal boundaries resolve to the upper/right cell; for
        points with exact node coordinates prefer :meth:`locate_leaf_key`,
        which decides ties (in particular across the slit) exactly.
        """
        x, y = float(point[0]), float(point[1])
        ax_v = self._slit is not None and self._slit.axis == "v"
        ax_h = self._slit is not None and self._slit.axis == "h"
        fx = (x - self.anchor[0]) / self.root_size
        fy = (y - self.anchor[1]) / self.root_size
        root = None
        for iy in self._root_candidates(fy, ax_h, side):
            for ix in self._root_candidates(fx, ax_v, side):
                cid = self._cell_index.get((0, ix, iy))
                if cid is not None:
                    root = self.cells[cid]
                    break
            if root is not None:
                break
        if root is None:
            raise MeshError(f"point {point} outside the mesh domain")
        c = root
        while c.children is not None:
            cx, cy = c.center
            right = (side > 0) if (x == cx and ax_v and side != 0) else x >= cx
            upper = (side > 0) if (y == cy and ax_h and side != 0) else y >= cy
            c = self.cells[c.children[(2 if upper else 0) + (1 if right else 0)]]
        return c

    def locate_leaf_key(self, key, side=0) -> QuadCell:
        """Exact integer-lattice point location; ties steered by slit ``side``."""
        kx, ky = key
        ax_v = self._slit is not None and self._slit.axis == "v"
        ax_h = self._slit is not None and self._slit.axis == "h"

        def cands(k, slit_on_axis):
            i0, rem = divmod(k, 1 << _NODE_BITS)
            if rem:
                return [i0]
            if slit_on_axis and side < 0:
                return [i0 - 1, i0]
            return [i0, i0 - 1]

        root = None
        for iy in cands(ky, ax_h):
            for ix in cands(kx, ax_v):
                cid = self._cell_index.get((0, ix, iy))
                if cid is not None:
                    root = self.cells[cid]
                    break
            if root is not None:
                break
        if root is None:
            raise MeshError(f"node key {key} outside the mesh domain")
        c = root
        while c.children is not None:
            half = 1 << (_NODE_BITS - c.level - 1)
            ckx = (2 * c.ix + 1) * half
            cky = (2 * c.iy + 1) * half
            right = (side > 0) if (kx == ckx and ax_v and side != 0) else kx >= ckx
            upper = (side > 0) if (ky == cky and ax_h and side != 0) else ky >= cky
            c = self.cells[c.children[(2 if upper else 0) + (1 if right else 0)]]
        return c

    def node_key(self, node_id: int) -> tuple[int, int]:
        return self._node_keys[node_id]

    def node_slit_side(self, node_id: int) -> int:
        """-1/+1 for a duplicated slit-face node, 0 otherwise."""
        if self._slit is None:
            return 0
        key = self._node_keys[node_id]
        rec = self._slit_nodes.get(key)
        if rec is None:
            return 0
        if rec[0] == node_id:
            return -1
        if rec[1] == node_id:
            return 1
        return 0

    def _hanging_midpoint(self, c: QuadCell, direction):
        """Node id of the hanging node on edge ``direction`` of leaf ``c``, or None."""
        dx, dy = _EDGE_STEPS[direction]
        cid = self._cell_index.get((c.level, c.ix + dx, c.iy + dy))
        if cid is None or self.cells[cid].children is None:
            return None
        shift = _NODE_BITS - c.level - 1
        mid = {
            "S": ((2 * c.ix + 1) << shift, (2 * c.iy) << shift),
            "E": ((2 * c.ix + 2) << shift, (2 * c.iy + 1) << shift),
            "N": ((2 * c.ix + 1) << shift, (2 * c.iy + 2) << shift),
            "W": ((2 * c.ix) << shift, (2 * c.iy + 1) << shift),
        }[direction]
        if self._slit is not None and self._slit.duplicated(mid):
            return None  # edge lies on the slit; the finer side keeps its own copies
        side = self._slit.side(c.center) if self._slit is not None else 0
        return self._node_id(mid, side, create=False)

    def element_loop(self, c: QuadCell) -> tuple[int, ...]:
        side = self._slit.side(c.center) if self._slit is not None else 0
        sw, se, nw, ne = [
            self._node_id(k, side, create=False)
            for k in self._corner_keys(c.level, c.ix, c.iy)
        ]
        loop = [sw]
        for corner, direction in ((se, "S"), (ne, "E"), (nw, "N"), (sw, "W")):
            mid = self._hanging_midpoint(c, direction)
            if mid is not None:
                loop.append(mid)
            if corner != sw:
                loop.append(corner)
        return tuple(loop)


def build_initial_mesh(rects, root_size, uniform_depth, slit=None, max_depth=8):
    """Uniform quadtree over a union of axis-aligned rectangles.

    rects: iterable of (x0, y0, width, height); every rectangle must tile
    exactly into squares of edge ``root_size`` on a common lattice.
    slit: optional crack polyline [(x, y), ...] lying on cell-edge lines at
    ``uniform_depth``; the first point is the crack mouth (face nodes
    duplicated from there on), the last point is the tip (kept single).
    """
    rects = [tuple(map(float, r)) for r in rects]
    if not rects:
        raise MeshError("domain needs at least one rectangle")
    if uniform_depth > max_depth:
        raise MeshError("uniform_depth exceeds max_depth")
    ax = min(r[0] for r in rects)
    ay = min(r[1] for r in rects)
    mesh = QuadtreeMesh((ax, ay), root_size, max_depth)
    if slit is not None:
        mesh._slit = _SlitLattice(slit, (ax, ay), root_size, uniform_depth)
        mesh._slit_points = mesh._slit.points

    root_coords = set()
    for x0, y0, w, h in rects:
        nx = w / root_size
        ny = h / root_size
        ox = (x0 - ax) / root_size
        oy = (y0 - ay) / root_size
        for v, what in ((nx, "width"), (ny, "height"), (ox, "x offset"), (oy, "y offset")):
            if abs(v - round(v)) > 1e-9:
                raise MeshError(f"rectangle {what} is not a multiple of root_size")
        for i in range(int(round(nx))):
            for j in range(int(round(ny))):
                root_coords.add((int(round(ox)) + i, int(round(oy)) + j))
    for ix, iy in sorted(root_coords):
        mesh._add_cell(0, ix, iy, None)

    for _ in range(uniform_depth):
        for cid in [c.id for c in mesh.cells if c.is_leaf]:
            mesh._split(cid)
    return mesh


def refine_cells(mesh: QuadtreeMesh, cells) -> QuadtreeMesh:
    """New mesh with the listed leaves split and 2:1 balance restored."""
    out = mesh.copy()
    out._refine(cells)
    return out


def extract_elements(mesh: QuadtreeMesh) -> list[PolygonElement]:
    """One CCW polygon per leaf, with hanging nodes inserted mid-edge."""
    elems = []
    for c in sorted(mesh.leaves(), key=lambda c: c.id):
        elems.append(PolygonElement(len(elems), c.id, mesh.element_loop(c)))
    return elems


def leaf_adjacency(mesh: QuadtreeMesh, leaf_id: int) -> dict[str, list[int]]:
    """Edge neighbors of a leaf: one same-or-coarser leaf or two finer halves."""
    c = mesh.cells[leaf_id]
    if not c.is_leaf:
        raise MeshError(f"cell {leaf_id} is not a leaf")
    out = {}
    for direction, (dx, dy) in _EDGE_STEPS.items():
        nb = mesh._find_at_or_above(c.level, c.ix + dx, c.iy + dy)
        if nb is None:
            out[direction] = []
        elif nb.children is None:
            out[direction] = [nb.id]
        else:
            kids = [nb.children[s] for s in _FACING_CHILDREN[direction]]
            for k in kids:
                if mesh.cells[k].children is not None:
                    raise MeshError("2:1 balance violated at leaf adjacency query")
            out[direction] = kids
    return out


def dump_tree_text(mesh: QuadtreeMesh) -> str:
    """Plain-text tree dump (cell id, level, origin, size) for fixtures."""
    lines = ["# cell_id level origin_x origin_y size leaf"]
    for c in mesh.cells:
        lines.append(
            f"{c.id} {c.level} {c.origin[0]:.17g} {c.origin[1]:.17g} "
            f"{c.size:.17g} {int(c.is_leaf)}"
        )
    return "\n".join(lines) + "\n"


def write_mesh_vtk(mesh: QuadtreeMesh, path) -> None:
    """Debug dump as a legacy-VTK unstructured grid of polygon cells."""
    elems = extract_elements(mesh)
    xy = mesh.node_coords()
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nquadtree mesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(xy)} double\n")
        for x, y in xy:
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        total = sum(len(e.nodes) + 1 for e in elems)
        fh.write(f"CELLS {len(elems)} {total}\n")
        for e in elems:
            fh.write(" ".join([str(len(e.nodes))] + [str(n) for n in e.nodes]) + "\n")
        fh.write(f"CELL_TYPES {len(elems)}\n")
        fh.writelines("7\n" for _ in elems)
        fh.write(f"CELL_DATA {len(elems)}\nSCALARS level int 1\nLOOKUP_TABLE default\n")
        for e in elems:
            fh.write(f"{mesh.cells[e.cell_id].level}\n")

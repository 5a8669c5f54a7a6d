"""Benchmark scenario definitions: geometry, boundary schedules, materials.

Units: mm, kN, kN/mm^2 (= GPa). All three built-in problems are displacement
controlled; loading enters through Dirichlet values proportional to the
current load factor.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .material import MaterialParams
from .quadtree import QuadtreeMesh, build_initial_mesh


@dataclass(frozen=True)
class BoundaryRegion:
    """Nodes on the line {axis-coordinate == value} within [lo, hi] span."""

    axis: int  # 0: region on a vertical line x = value; 1: horizontal y = value
    value: float
    lo: float = -np.inf
    hi: float = np.inf

    def select(self, xy: np.ndarray, tol: float) -> np.ndarray:
        on_line = np.abs(xy[:, self.axis] - self.value) <= tol
        other = xy[:, 1 - self.axis]
        return np.nonzero(on_line & (other >= self.lo - tol) & (other <= self.hi + tol))[0]


@dataclass(frozen=True)
class DirichletSpec:
    region: BoundaryRegion
    component: int  # 0: u_x, 1: u_y
    scale: float = 0.0  # prescribed value = scale * load + offset
    offset: float = 0.0
    measure_reaction: bool = False


@dataclass(frozen=True)
class LoadPhase:
    du: float
    steps: int


@dataclass(frozen=True)
class Scenario:
    name: str
    rects: tuple
    root_size: float
    initial_depth: int
    max_depth: int
    slit: tuple | None
    material: MaterialParams  # lo is a placeholder when lo_rule == "2h"
    lo_rule: object  # float (mm) or the string "2h" (twice the minimum leaf size)
    thickness: float
    dirichlet: tuple[DirichletSpec, ...]
    schedule: tuple[LoadPhase, ...]
    stop_reaction_frac: float | None = None
    snapshot_every: int = 0  # 0: final snapshot only

    # ------------------------------------------------------------ derived

    @property
    def min_h(self) -> float:
        return self.root_size / 2**self.max_depth

    def resolved_lo(self) -> float:
        if self.lo_rule == "2h":
            return 2.0 * self.min_h
        return float(self.lo_rule)

    def resolved_material(self) -> MaterialParams:
        return self.material.with_lo(self.resolved_lo())

    def build_mesh(self) -> QuadtreeMesh:
        return build_initial_mesh(
            self.rects,
            self.root_size,
            self.initial_depth,
            slit=self.slit,
            max_depth=self.max_depth,
        )

    def node_tol(self) -> float:
        return 1e-9 * self.root_size

    def dirichlet_constraints(self, xy: np.ndarray, load: float) -> dict:
        out = {}
        tol = self.node_tol()
        for spec in self.dirichlet:
            value = spec.scale * load + spec.offset
            for nid in spec.region.select(xy, tol):
                out[2 * int(nid) + spec.component] = value
        return out

    def reaction_dofs(self, xy: np.ndarray) -> np.ndarray:
        dofs = set()
        tol = self.node_tol()
        for spec in self.dirichlet:
            if not spec.measure_reaction:
                continue
            for nid in spec.region.select(xy, tol):
                dofs.add(2 * int(nid) + spec.component)
        return np.array(sorted(dofs), dtype=np.int64)

    def total_steps(self) -> int:
        return sum(p.steps for p in self.schedule)

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)


def builtin_scenarios(lshape_patch_halfwidth: float = 15.0) -> dict:
    """The three benchmark problems with their published parameters."""
    steel = MaterialParams(lam=121.15, mu=80.77, gc=2.7e-3, lo=1.0, kp=1e-6)
    plate = [(0.0, 0.0, 1.0, 1.0)]
    edge_crack = ((0.0, 0.5), (0.5, 0.5))

    bottom = BoundaryRegion(axis=1, value=0.0)
    top = BoundaryRegion(axis=1, value=1.0)

    tension = Scenario(
        name="tension",
        rects=tuple(plate),
        root_size=1.0,
        initial_depth=4,
        max_depth=8,
        slit=edge_crack,
        material=steel,
        lo_rule="2h",
        thickness=1.0,
        dirichlet=(
            DirichletSpec(bottom, component=0),
            DirichletSpec(bottom, component=1),
            DirichletSpec(top, component=1, scale=1.0, measure_reaction=True),
        ),
        schedule=(LoadPhase(1e-5, 500), LoadPhase(1e-6, 2000)),
        stop_reaction_frac=0.01,
    )

    shear = Scenario(
        name="shear",
        rects=tuple(plate),
        root_size=1.0,
        initial_depth=4,
        max_depth=8,
        slit=edge_crack,
        material=steel,
        lo_rule=0.01,
        thickness=1.0,
        dirichlet=(
            DirichletSpec(bottom, component=0),
            DirichletSpec(bottom, component=1),
            DirichletSpec(top, component=0, scale=1.0, measure_reaction=True),
            DirichletSpec(top, component=1),
        ),
        schedule=(LoadPhase(1e-5, 3000),),
        stop_reaction_frac=0.10,
    )

    concrete = MaterialParams.from_engineering(E=25.85, nu=0.18, gc=9.5e-5, lo=0.2, kp=1e-6)
    half = lshape_patch_halfwidth
    lshape = Scenario(
        name="lshape",
        rects=((0.0, 0.0, 250.0, 500.0), (250.0, 250.0, 250.0, 250.0)),
        root_size=250.0,
        initial_depth=3,
        max_depth=8,
        slit=None,
        material=concrete,
        lo_rule=0.2,
        thickness=100.0,
        dirichlet=(
            DirichletSpec(BoundaryRegion(axis=1, value=0.0, lo=0.0, hi=250.0), component=0),
            DirichletSpec(BoundaryRegion(axis=1, value=0.0, lo=0.0, hi=250.0), component=1),
            DirichletSpec(
                BoundaryRegion(axis=1, value=250.0, lo=470.0 - half, hi=470.0 + half),
                component=1,
                scale=1.0,
                measure_reaction=True,
            ),
        ),
        schedule=(LoadPhase(2e-3, 500),),
        stop_reaction_frac=0.05,
    )
    return {"tension": tension, "shear": shear, "lshape": lshape}

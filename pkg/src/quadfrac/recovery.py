"""Recovery-based error indication and adaptive refinement with field transfer.

The enhanced strain is a moving-least-squares fit of the nodal displacements
(linear reproducing basis, quartic spline weights on circular supports); the
energy-norm gap between the enhanced and the compatible strain is the element
error. Marking uses a bulk (fixed-fraction) criterion; refined meshes receive
their fields by interpolation through the old mesh and a max-based, hence
irreversibility-preserving, history transfer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import mvc
from .assembly import (
    ElementCaches,
    apply_dirichlet,
    assemble_elasticity,
    solve_spd,
)
from .quadtree import refine_cells

logger = logging.getLogger(__name__)

_SUPPORT_FACTOR = 2.5  # support radius in local leaf sizes
_GROWTH = 1.5  # radius growth when the moment matrix degenerates
_MAX_GROWTH_STEPS = 8


class RecoveryError(RuntimeError):
    pass


def quartic_spline(s):
    """Weight w(s) = 1 - 6 s^2 + 8 s^3 - 3 s^4 on s <= 1, else 0."""
    s = np.asarray(s, dtype=float)
    w = 1.0 - 6.0 * s**2 + 8.0 * s**3 - 3.0 * s**4
    return np.where(np.abs(s) <= 1.0, w, 0.0)


def quartic_spline_deriv(s):
    s = np.asarray(s, dtype=float)
    d = -12.0 * s + 24.0 * s**2 - 12.0 * s**3
    return np.where(np.abs(s) <= 1.0, d, 0.0)


@dataclass
class MlsModel:
    """Node cloud with per-node circular supports for derivative recovery."""

    nodes: np.ndarray  # (N, 2)
    radii: np.ndarray  # (N,)

    @classmethod
    def from_caches(cls, caches: ElementCaches, factor: float = _SUPPORT_FACTOR):
        mesh = caches.mesh
        xy = mesh.node_coords()
        local = np.full(mesh.num_nodes, np.inf)
        for e in caches.elements:
            size = mesh.cells[e.cell_id].size
            ids = np.fromiter(e.nodes, dtype=np.int64)
            np.minimum.at(local, ids, size)
        local[~np.isfinite(local)] = mesh.root_size
        return cls(nodes=xy.copy(), radii=factor * local)

    def tree(self) -> cKDTree:
        if not hasattr(self, "_tree"):
            self._tree = cKDTree(self.nodes)
        return self._tree


def _supports(model: MlsModel, point, grow=1.0):
    r = np.linalg.norm(model.nodes - np.asarray(point, dtype=float), axis=1)
    return np.nonzero(r <= grow * model.radii)[0]


def mls_shape(model: MlsModel, point):
    """MLS values and first derivatives at one point.

    Returns (support_ids, values, derivs) with derivs of shape (k, 2).
    The reproducing basis is [1, x, y], shifted to the evaluation point and
    scaled by the median support radius for conditioning; derivatives include
    the weight, basis-shift, and moment-matrix terms.
    """
    x = np.asarray(point, dtype=float)
    grow = 1.0
    for attempt in range(_MAX_GROWTH_STEPS + 1):
        idx = _supports(model, x, grow)
        if idx.size >= 3:
            nodes = model.nodes[idx]
            d = grow * model.radii[idx]
            h = float(np.median(d))
            diff = (nodes - x) / h
            p = np.column_stack([np.ones(idx.size), diff])  # (k, 3)
            rdist = np.linalg.norm(nodes - x, axis=1)
            s = rdist / d
            w = quartic_spline(s)
            A = (w[:, None] * p).T @ p
            if np.linalg.cond(A) < 1e12:
                break
        grow *= _GROWTH
        if attempt == _MAX_GROWTH_STEPS:
            raise RecoveryError(
                f"singular MLS moment matrix at point {tuple(x)}; support radii too small"
            )
    if grow > 1.0:
        logger.debug("MLS support grown x%.3f at %s", grow, tuple(x))

    P = (w[:, None] * p).T  # (3, k): columns w_k p_k
    y = np.linalg.solve(A, np.eye(3)[:, 0])
    W = np.linalg.solve(A, P)  # (3, k)
    values = W[0]

    # dw_gamma = -12 (1 - s)^2 (x - x_k)_gamma / d^2  (smooth at r -> 0)
    dw = (-12.0 * np.where(s <= 1.0, (1.0 - s) ** 2, 0.0) / d**2)[:, None] * (x - nodes)
    b = P.sum(axis=1)  # sum w_k p_k
    derivs = np.empty((idx.size, 2))
    for gamma in range(2):
        e_g = np.zeros(3)
        e_g[gamma + 1] = 1.0
        dA = (dw[:, gamma][:, None] * p).T @ p - (np.outer(e_g, b) + np.outer(b, e_g)) / h
        dP = (dw[:, gamma][:, None] * p).T - np.outer(e_g, w) / h
        derivs[:, gamma] = y @ (dP - dA @ W)
    return idx, values, derivs


def recovered_strain(model: MlsModel, u, point) -> np.ndarray:
    """Enhanced strain (Voigt) at one point from nodal displacements (N, 2)."""
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    idx, _, derivs = mls_shape(model, point)
    grad = derivs.T @ u[idx]  # grad[gamma, comp] = d u_comp / d x_gamma
    return np.array([grad[0, 0], grad[1, 1], grad[0, 1] + grad[1, 0]])


def recovered_strain_batch(model: MlsModel, u, points) -> np.ndarray:
    """Vectorized enhanced strain at many points (pair-list accumulation)."""
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    pts = np.asarray(points, dtype=float)
    P = len(pts)
    ptree = cKDTree(pts)
    balls = ptree.query_ball_point(model.nodes, model.radii)
    node_idx = np.concatenate(
        [np.full(len(b), k, dtype=np.int64) for k, b in enumerate(balls)]
    ) if P else np.empty(0, dtype=np.int64)
    pt_idx = np.concatenate([np.asarray(b, dtype=np.int64) for b in balls])

    d = model.radii[node_idx]
    dx = pts[pt_idx] - model.nodes[node_idx]  # x_p - x_k
    r = np.linalg.norm(dx, axis=1)
    s = r / d
    w = quartic_spline(s)
    count = np.bincount(pt_idx, minlength=P)
    if np.any(count < 3):
        return _batch_with_fallback(model, u, pts, np.nonzero(count < 3)[0], None)

    # per-point basis scale: mean support radius
    h = np.bincount(pt_idx, weights=d, minlength=P) / count
    hp = h[pt_idx]
    p1 = -dx[:, 0] / hp  # (x_k - x_p)/h
    p2 = -dx[:, 1] / hp
    basis = np.stack([np.ones_like(p1), p1, p2], axis=1)  # (pairs, 3)
    dw = (-12.0 * np.where(s <= 1.0, (1.0 - s) ** 2, 0.0) / d**2)[:, None] * dx

    def acc(weights):
        return np.bincount(pt_idx, weights=weights, minlength=P)

    A = np.empty((P, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            A[:, i, j] = A[:, j, i] = acc(w * basis[:, i] * basis[:, j])
    R = np.empty((P, 3, 2))
    uk = u[node_idx]
    for i in range(3):
        for j in range(2):
            R[:, i, j] = acc(w * basis[:, i] * uk[:, j])
    b = A[:, :, 0]  # sum w p (the constant-column moments)
    su = R[:, 0, :]  # sum w u

    dA = np.zeros((P, 2, 3, 3))
    dR = np.zeros((P, 2, 3, 2))
    for g in range(2):
        for i in range(3):
            for j in range(i, 3):
                dA[:, g, i, j] = dA[:, g, j, i] = acc(dw[:, g] * basis[:, i] * basis[:, j])
            for j in range(2):
                dR[:, g, i, j] = acc(dw[:, g] * basis[:, i] * uk[:, j])
        # basis-shift terms: d p_k / d x_g = -e_{g+1} / h
        eg = g + 1
        dA[:, g, eg, :] -= b / h[:, None]
        dA[:, g, :, eg] -= b / h[:, None]
        dR[:, g, eg, :] -= su / h[:, None]

    det = np.linalg.det(A)
    scale = (np.trace(A, axis1=1, axis2=2) / 3.0) ** 3
    bad = np.nonzero(np.abs(det) < 1e-10 * np.maximum(scale, 1e-300))[0]

    rhs = np.concatenate([np.tile(np.eye(3)[:, :1], (P, 1, 1)), R], axis=2)  # (P,3,3)
    good = np.setdiff1d(np.arange(P), bad)
    sol = np.empty_like(rhs)
    sol[good] = np.linalg.solve(A[good], rhs[good])
    y = sol[:, :, 0]  # (P, 3)
    W = sol[:, :, 1:]  # (P, 3, 2)

    grad = np.einsum("pi,pgij->pgj", y, dR - np.einsum("pgik,pkj->pgij", dA, W))
    eps = np.stack(
        [grad[:, 0, 0], grad[:, 1, 1], grad[:, 0, 1] + grad[:, 1, 0]], axis=1
    )
    if bad.size:
        eps = _batch_with_fallback(model, u, pts, bad, eps)
    return eps


def _batch_with_fallback(model, u, pts, bad, eps):
    if eps is None:
        eps = np.zeros((len(pts), 3))
        bad = np.arange(len(pts))
        # recompute good ones too via the scalar path (tiny point sets only)
    for p in bad:
        eps[p] = recovered_strain(model, u, pts[p])
    return eps


def element_errors(caches: ElementCaches, u, model: MlsModel, D) -> np.ndarray:
    """Energy-norm indicator per element from the strain-recovery gap."""
    pts = caches.qp_coords()
    eps_s = recovered_strain_batch(model, u, pts)
    eps_h = caches.element_strains(u)
    diff = eps_s - eps_h
    dens = np.einsum("qa,ab,qb->q", diff, np.asarray(D, dtype=float), diff)
    weighted = dens * caches.qp_weights()
    sums = np.add.reduceat(weighted, caches.qp_offsets[:-1])
    return np.sqrt(np.maximum(sums, 0.0))


def element_error(caches: ElementCaches, elem_id: int, u, model: MlsModel, D) -> float:
    return float(element_errors(caches, u, model, D)[elem_id])


def mark_bulk(eta, theta) -> np.ndarray:
    """Smallest set of largest-error elements holding a theta fraction of
    the squared total; ties broken by ascending element id."""
    eta = np.asarray(eta, dtype=float)
    if theta <= 0.0 or eta.size == 0:
        return np.empty(0, dtype=np.int64)
    total = float((eta**2).sum())
    if total <= 0.0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(eta.size), -eta))
    csum = np.cumsum(eta[order] ** 2)
    k = int(np.searchsorted(csum, theta * total * (1.0 - 1e-12))) + 1
    marked = order[: min(k, eta.size)]
    marked = marked[eta[marked] > 0.0]
    return np.sort(marked)


# --------------------------------------------------------------- interpolation


class MeshInterpolator:
    """Nodal-field evaluation through a mesh's polygonal elements."""

    def __init__(self, caches: ElementCaches):
        self.mesh = caches.mesh
        self.xy = caches.mesh.node_coords()
        self.by_cell = {e.cell_id: e for e in caches.elements}

    def _element_for_key(self, key, side=0):
        leaf = self.mesh.locate_leaf_key(key, side)
        return self.by_cell[leaf.id]

    def _element_for_point(self, point, side=0):
        leaf = self.mesh.locate_leaf(point, side)
        return self.by_cell[leaf.id]

    def eval_in_element(self, elem, point, values):
        verts = self.xy[list(elem.nodes)]
        vals = np.asarray(values)[list(elem.nodes)]
        p = np.asarray(point, dtype=float)
        a = verts
        b = np.roll(verts, -1, axis=0)
        ab = b - a
        lens2 = (ab * ab).sum(axis=1)
        t = np.clip(((p - a) * ab).sum(axis=1) / lens2, 0.0, 1.0)
        proj = a + t[:, None] * ab
        dist = np.linalg.norm(proj - p, axis=1)
        tol = 1e-9 * mvc.polygon_diameter(verts)
        i = int(np.argmin(dist))
        if dist[i] <= tol:
            # on an edge: the trace is linear between the loop endpoints
            j = (i + 1) % len(verts)
            return (1.0 - t[i]) * vals[i] + t[i] * vals[j]
        N, _ = mvc.mvc_batch(verts, p)
        return N @ vals

    def eval_at_key(self, key, values, side=0):
        elem = self._element_for_key(key, side)
        point = self.mesh._coord_of_key(key)
        return self.eval_in_element(elem, point, values)

    def eval_at_point(self, point, values, side=0):
        elem = self._element_for_point(point, side)
        return self.eval_in_element(elem, point, values)


def refine_and_transfer(caches: ElementCaches, u, phi, history, marked_cells):
    """Refine the marked leaves and carry (u, phi, H) onto the new mesh.

    Nodal fields are interpolated through the old mesh's basis (exact for
    anything the old mesh represents); history moves by a neighborhood max
    inside the old host element, which can only raise, never lower, the
    per-parent maximum.
    """
    old_mesh = caches.mesh
    new_mesh = refine_cells(old_mesh, marked_cells)
    new_caches = ElementCaches(
        new_mesh, material=caches.material, quad_order=caches.quad_order
    )
    interp = MeshInterpolator(caches)

    n_old = old_mesh.num_nodes
    n_new = new_mesh.num_nodes
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    u2 = np.zeros((n_new, 2))
    u2[:n_old] = u
    phi2 = np.zeros(n_new)
    phi2[:n_old] = phi
    for nid in range(n_old, n_new):
        key = new_mesh.node_key(nid)
        side = new_mesh.node_slit_side(nid)
        u2[nid] = interp.eval_at_key(key, u, side)
        phi2[nid] = interp.eval_at_key(key, phi, side)
    np.clip(phi2, 0.0, 1.0, out=phi2)

    old_by_cell = {e.cell_id: e for e in caches.elements}
    old_qp = caches.qp_coords()
    new_qp = new_caches.qp_coords()
    H2 = np.empty(new_caches.total_qp)
    n_old_cells = len(old_mesh.cells)
    for e in new_caches.elements:
        cid = e.cell_id
        while cid >= n_old_cells or not old_mesh.cells[cid].is_leaf:
            cid = new_mesh.cells[cid].parent
        src = old_by_cell[cid]
        s0, s1 = caches.qp_offsets[src.id], caches.qp_offsets[src.id + 1]
        t0, t1 = new_caches.qp_offsets[e.id], new_caches.qp_offsets[e.id + 1]
        if cid == e.cell_id and src.nodes == e.nodes:
            H2[t0:t1] = history[s0:s1]
            continue
        src_pts = old_qp[s0:s1]
        src_h = history[s0:s1]
        radius = 0.5 * old_mesh.cells[cid].size
        for q in range(t0, t1):
            near = np.linalg.norm(src_pts - new_qp[q], axis=1) <= radius
            H2[q] = src_h[near].max() if np.any(near) else src_h.max()
    return new_caches, u2.reshape(-1), phi2, H2


# ------------------------------------------------------------ marking drivers


def adaptive_marking(caches, eta, theta_bulk, elem_tol_rel, phi=None, lo=None,
                     safeguard_phi=0.4):
    """Marked cell ids: bulk prefix filtered by a relative per-element floor,
    plus the crack-band safeguard, minus leaves already at max depth."""
    eta = np.asarray(eta, dtype=float)
    marked = set(int(i) for i in mark_bulk(eta, theta_bulk))
    total = float(np.sqrt((eta**2).sum()))
    if total > 0.0 and elem_tol_rel > 0.0:
        floor = elem_tol_rel * total
        marked = {i for i in marked if eta[i] > floor}
    if phi is not None and lo is not None:
        for e in caches.elements:
            if caches.elem_sizes[e.id] > 0.5 * lo and np.max(phi[list(e.nodes)]) >= safeguard_phi:
                marked.add(e.id)
    mesh = caches.mesh
    cells = []
    clamped = 0
    for i in sorted(marked):
        cell = mesh.cells[caches.elements[i].cell_id]
        if cell.level >= mesh.max_depth:
            clamped += 1
        else:
            cells.append(cell.id)
    if clamped:
        logger.warning("refinement clamped at max depth for %d cells", clamped)
    return cells


def initial_mesh_convergence(scenario, controls):
    """Pre-loop mesh adaptation on the first elastic increment (phi = 0).

    Repeats solve -> indicate -> mark -> refine until the filtered marked set
    is empty or every marked cell sits at max depth.
    """
    mesh = scenario.build_mesh()
    material = scenario.resolved_material()
    load = scenario.schedule[0].du
    for it in range(controls.max_adapt_passes):
        caches = ElementCaches(mesh, material=material, quad_order=controls.quad_order)
        xy = mesh.node_coords()
        system = assemble_elasticity(
            caches, np.zeros(mesh.num_nodes), material, scenario.thickness
        )
        constraints = scenario.dirichlet_constraints(xy, load)
        u = solve_spd(apply_dirichlet(system, constraints))
        model = MlsModel.from_caches(caches)
        eta = element_errors(caches, u, model, caches.D)
        cells = adaptive_marking(
            caches, eta, controls.theta_bulk, controls.elem_tol_rel
        )
        if not cells:
            logger.info(
                "initial mesh converged after %d passes: %d elements, %d nodes",
                it,
                len(caches.elements),
                mesh.num_nodes,
            )
            return mesh
        mesh = refine_cells(mesh, cells)
    logger.warning("initial mesh convergence stopped at the pass limit")
    return mesh

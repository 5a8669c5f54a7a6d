"""Mean value coordinates on simple polygons, quadrature, and B-matrices.

Shape functions follow the tangent half-angle construction

    N_i = w_i / sum_j w_j,   w_i = (tan(a_{i-1}/2) + tan(a_i/2)) / |x - x_i|,

with a_i the angle at the evaluation point between the rays to consecutive
vertices. Gradients are analytic (chain rule through the half-angle tangents
and the radii); finite differences are test-only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BasisError(ValueError):
    """Degenerate polygon or invalid evaluation point."""


@dataclass(frozen=True)
class BasisEval:
    N: np.ndarray  # (n,) shape-function values
    dN: np.ndarray  # (n, 2) Cartesian gradients


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (m, 2)
    weights: np.ndarray  # (m,) areas, all positive

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise BasisError("quadrature weights must be positive")


# symmetric Gauss rules on the reference triangle (barycentric coords, weights
# sum to 1); only all-positive rules are offered
_TRI_RULES = {
    1: [((1 / 3, 1 / 3, 1 / 3), 1.0)],
    2: [
        ((2 / 3, 1 / 6, 1 / 6), 1 / 3),
        ((1 / 6, 2 / 3, 1 / 6), 1 / 3),
        ((1 / 6, 1 / 6, 2 / 3), 1 / 3),
    ],
    4: [
        ((0.108103018168070, 0.445948490915965, 0.445948490915965), 0.223381589678011),
        ((0.445948490915965, 0.108103018168070, 0.445948490915965), 0.223381589678011),
        ((0.445948490915965, 0.445948490915965, 0.108103018168070), 0.223381589678011),
        ((0.816847572980459, 0.091576213509771, 0.091576213509771), 0.109951743655322),
        ((0.091576213509771, 0.816847572980459, 0.091576213509771), 0.109951743655322),
        ((0.091576213509771, 0.091576213509771, 0.816847572980459), 0.109951743655322),
    ],
    5: [
        ((1 / 3, 1 / 3, 1 / 3), 0.225),
        ((0.059715871789770, 0.470142064105115, 0.470142064105115), 0.132394152788506),
        ((0.470142064105115, 0.059715871789770, 0.470142064105115), 0.132394152788506),
        ((0.470142064105115, 0.470142064105115, 0.059715871789770), 0.132394152788506),
        ((0.797426985353087, 0.101286507323456, 0.101286507323456), 0.125939180544827),
        ((0.101286507323456, 0.797426985353087, 0.101286507323456), 0.125939180544827),
        ((0.101286507323456, 0.101286507323456, 0.797426985353087), 0.125939180544827),
    ],
}


def _tri_rule(order: int):
    for key in sorted(_TRI_RULES):
        if key >= order:
            return _TRI_RULES[key]
    return _TRI_RULES[max(_TRI_RULES)]


def polygon_area(verts) -> float:
    v = np.asarray(verts, dtype=float)
    nxt = np.roll(v, -1, axis=0)
    return 0.5 * float(np.sum(v[:, 0] * nxt[:, 1] - v[:, 1] * nxt[:, 0]))


def polygon_centroid(verts) -> np.ndarray:
    v = np.asarray(verts, dtype=float)
    nxt = np.roll(v, -1, axis=0)
    cross = v[:, 0] * nxt[:, 1] - v[:, 1] * nxt[:, 0]
    area = 0.5 * cross.sum()
    if abs(area) < 1e-14:
        raise BasisError("degenerate polygon (area ~ 0)")
    cx = np.sum((v[:, 0] + nxt[:, 0]) * cross) / (6.0 * area)
    cy = np.sum((v[:, 1] + nxt[:, 1]) * cross) / (6.0 * area)
    return np.array([cx, cy])


def polygon_diameter(verts) -> float:
    v = np.asarray(verts, dtype=float)
    return float(np.max(v.max(axis=0) - v.min(axis=0)))


def _boundary_distance(verts, point) -> float:
    v = np.asarray(verts, dtype=float)
    p = np.asarray(point, dtype=float)
    a = v
    b = np.roll(v, -1, axis=0)
    ab = b - a
    t = np.clip(((p - a) * ab).sum(axis=1) / (ab * ab).sum(axis=1), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return float(np.min(np.linalg.norm(proj - p, axis=1)))


def mvc_batch(verts: np.ndarray, pts: np.ndarray):
    """Vectorized MVC values and gradients.

    verts: (..., n, 2) CCW loops; pts: (..., 2) strictly interior points.
    Returns (N, dN) with shapes (..., n) and (..., n, 2). No validation.
    """
    v = np.asarray(verts, dtype=float)
    x = np.asarray(pts, dtype=float)
    e = v - x[..., None, :]  # (..., n, 2)
    r = np.linalg.norm(e, axis=-1)  # (..., n)
    en = np.roll(e, -1, axis=-2)
    rn = np.roll(r, -1, axis=-1)

    cross = e[..., 0] * en[..., 1] - e[..., 1] * en[..., 0]
    dot = (e * en).sum(axis=-1)
    S = r * rn + dot
    t = cross / S  # tan(alpha_i / 2)

    # gradients w.r.t. the evaluation point
    grad_r = -e / r[..., None]
    grad_rn = -en / rn[..., None]
    diff = e - en
    grad_cross = np.stack([diff[..., 1], -diff[..., 0]], axis=-1)
    grad_dot = -(e + en)
    grad_S = rn[..., None] * grad_r + r[..., None] * grad_rn + grad_dot
    grad_t = (grad_cross - t[..., None] * grad_S) / S[..., None]

    t_prev = np.roll(t, 1, axis=-1)
    grad_t_prev = np.roll(grad_t, 1, axis=-2)
    w = (t_prev + t) / r
    grad_w = (grad_t_prev + grad_t) / r[..., None] + (w / r**2)[..., None] * e

    wsum = w.sum(axis=-1)
    N = w / wsum[..., None]
    grad_wsum = grad_w.sum(axis=-2)
    dN = (grad_w - N[..., None] * grad_wsum[..., None, :]) / wsum[..., None, None]
    return N, dN


def _validate_polygon(v):
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        raise BasisError("polygon must be an (n, 2) vertex array with n >= 3")
    area = polygon_area(v)
    if area < 1e-14:
        raise BasisError(f"polygon degenerate or not CCW (signed area {area:g})")


def mvc_eval(verts, point) -> BasisEval:
    """Shape functions and gradients at a strictly interior point."""
    v = np.asarray(verts, dtype=float)
    _validate_polygon(v)
    p = np.asarray(point, dtype=float)
    if _boundary_distance(v, p) <= 1e-12 * polygon_diameter(v):
        raise BasisError(f"evaluation point {point} is on the polygon boundary")
    N, dN = mvc_batch(v, p)
    return BasisEval(N=N, dN=dN)


def polygon_quadrature(verts, order: int = 2) -> QuadratureRule:
    """Centroid-fan triangulation with a symmetric Gauss rule per triangle."""
    v = np.asarray(verts, dtype=float)
    _validate_polygon(v)
    c = polygon_centroid(v)
    a = v
    b = np.roll(v, -1, axis=0)
    # fan triangle areas; all must be positive (star-shaped about the centroid)
    tri_area = 0.5 * (
        (a[:, 0] - c[0]) * (b[:, 1] - c[1]) - (a[:, 1] - c[1]) * (b[:, 0] - c[0])
    )
    if np.any(tri_area <= 0):
        raise BasisError("polygon is not simple (centroid fan degenerates)")
    rule = _tri_rule(order)
    pts, wts = [], []
    for bary, wt in rule:
        p = bary[0] * c + bary[1] * a + bary[2] * b  # (n, 2)
        pts.append(p)
        wts.append(wt * tri_area)
    points = np.concatenate([p[None] for p in pts], axis=0).transpose(1, 0, 2)
    weights = np.stack(wts, axis=1)
    return QuadratureRule(points=points.reshape(-1, 2), weights=weights.reshape(-1))


def element_bmatrices(verts, point):
    """Strain-displacement matrix B (3 x 2n, Voigt exx/eyy/gxy), scalar
    gradient matrix Bphi (2 x n), and the shape row N at a quadrature point."""
    basis = mvc_eval(verts, point)
    return bmatrices_from_basis(basis.N, basis.dN)


def bmatrices_from_basis(N, dN):
    n = len(N)
    B = np.zeros((3, 2 * n))
    B[0, 0::2] = dN[:, 0]
    B[1, 1::2] = dN[:, 1]
    B[2, 0::2] = dN[:, 1]
    B[2, 1::2] = dN[:, 0]
    Bphi = dN.T.copy()
    return B, Bphi, np.asarray(N, dtype=float).copy()


def edge_shape_integrals(verts) -> np.ndarray:
    """Exact boundary integrals g_i = loop-integral of N_i * n over the edges.

    The trace of the basis is linear between consecutive loop vertices, so
    each edge contributes half its length times its outward normal to both
    endpoint shape functions.
    """
    v = np.asarray(verts, dtype=float)
    nxt = np.roll(v, -1, axis=0)
    edge = nxt - v
    normal = np.stack([edge[:, 1], -edge[:, 0]], axis=-1)  # outward for CCW, length-weighted
    g = 0.5 * (normal + np.roll(normal, 1, axis=0))
    return g

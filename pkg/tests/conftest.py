"""Shared generators and independent oracles for the test suite."""

import numpy as np
import pytest


def random_convex_polygon(rng, n, scale=1.0):
    """Convex CCW polygon: sorted angles on an ellipse, random orientation."""
    while True:
        ang = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2.0 * np.pi]]))
        if gaps.min() > 0.15:
            break
    a, b = rng.uniform(0.6, 1.4, 2)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    pts = np.stack([a * np.cos(ang), b * np.sin(ang)], axis=1) @ rot.T
    return scale * pts + rng.uniform(-2.0, 2.0, 2)


def square_with_midpoints(rng, n_extra):
    """Unit square with hanging-node-style midpoints on n_extra random edges."""
    corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    edges = sorted(rng.choice(4, size=n_extra, replace=False).tolist())
    loop = []
    for i, c in enumerate(corners):
        loop.append(c)
        if i in edges:
            nxt = corners[(i + 1) % 4]
            loop.append(((c[0] + nxt[0]) / 2.0, (c[1] + nxt[1]) / 2.0))
    return np.asarray(loop, dtype=float)


def interior_point(rng, verts, margin=0.15):
    """Random strictly interior point (convex combination biased to centroid)."""
    v = np.asarray(verts, dtype=float)
    w = rng.dirichlet(np.ones(len(v)))
    centroid = v.mean(axis=0)
    pt = (1.0 - margin) * (w @ v) + margin * centroid
    return 0.7 * pt + 0.3 * centroid


def mvc_scalar_oracle(verts, x):
    """Independent scalar transcription of the mean-value weight formula
    (interior angles via arccos, tangent of the half angle taken literally)."""
    v = [np.asarray(p, dtype=float) for p in verts]
    x = np.asarray(x, dtype=float)
    n = len(v)

    def angle(a, b):
        va, vb = a - x, b - x
        c = np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb))
        return np.arccos(np.clip(c, -1.0, 1.0))

    w = []
    for i in range(n):
        a_prev = angle(v[i - 1], v[i])
        a_cur = angle(v[i], v[(i + 1) % n])
        w.append((np.tan(a_prev / 2.0) + np.tan(a_cur / 2.0)) / np.linalg.norm(v[i] - x))
    w = np.asarray(w)
    return w / w.sum()


def fd_gradient(fun, point, step):
    """Central finite differences of a vector function of a 2D point."""
    p = np.asarray(point, dtype=float)
    cols = []
    for k in range(2):
        dp = np.zeros(2)
        dp[k] = step
        cols.append((fun(p + dp) - fun(p - dp)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def subdivision_integrate(verts, fun, levels=5):
    """Brute-force polygon integration: centroid fan, uniform 4-way triangle
    subdivision, degree-2 rule on the finest triangles."""
    v = np.asarray(verts, dtype=float)
    c = v.mean(axis=0)
    tris = [np.array([c, v[i], v[(i + 1) % len(v)]]) for i in range(len(v))]
    for _ in range(levels):
        nxt = []
        for t in tris:
            m01, m12, m20 = (t[0] + t[1]) / 2, (t[1] + t[2]) / 2, (t[2] + t[0]) / 2
            nxt += [
                np.array([t[0], m01, m20]),
                np.array([m01, t[1], m12]),
                np.array([m20, m12, t[2]]),
                np.array([m01, m12, m20]),
            ]
        tris = nxt
    total = 0.0
    bary = [(2 / 3, 1 / 6, 1 / 6), (1 / 6, 2 / 3, 1 / 6), (1 / 6, 1 / 6, 2 / 3)]
    for t in tris:
        area = 0.5 * abs(
            (t[1][0] - t[0][0]) * (t[2][1] - t[0][1])
            - (t[1][1] - t[0][1]) * (t[2][0] - t[0][0])
        )
        for b in bary:
            p = b[0] * t[0] + b[1] * t[1] + b[2] * t[2]
            total += area / 3.0 * fun(p[0], p[1])
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)

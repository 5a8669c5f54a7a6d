"""Recovery/adaptivity tests: MLS shapes, enhanced strain, marking, transfer."""

from types import SimpleNamespace

import numpy as np
import pytest

from quadfrac.assembly import ElementCaches
from quadfrac.material import MaterialParams
from quadfrac.quadtree import build_initial_mesh, refine_cells
from quadfrac.recovery import (
    MeshInterpolator,
    MlsModel,
    adaptive_marking,
    element_error,
    element_errors,
    initial_mesh_convergence,
    mark_bulk,
    mls_shape,
    quartic_spline,
    quartic_spline_deriv,
    recovered_strain,
    recovered_strain_batch,
    refine_and_transfer,
)
from quadfrac.scenarios import builtin_scenarios

MAT = MaterialParams(lam=121.15, mu=80.77, gc=2.7e-3, lo=0.02, kp=1e-6)


def unit_mesh(depth, **kw):
    return build_initial_mesh([(0.0, 0.0, 1.0, 1.0)], 1.0, depth, **kw)


def grid_model(n=9, spacing=1.0 / 8.0):
    xs = np.linspace(0.0, spacing * (n - 1), n)
    nodes = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    return MlsModel(nodes=nodes, radii=np.full(len(nodes), 2.5 * spacing))


class TestSpline:
    def test_endpoint_values(self):
        assert quartic_spline(0.0) == 1.0
        assert quartic_spline(1.0) == pytest.approx(0.0, abs=1e-15)
        assert quartic_spline_deriv(1.0) == pytest.approx(0.0, abs=1e-15)
        assert quartic_spline(1.2) == 0.0

    def test_half_value(self):
        assert quartic_spline(0.5) == pytest.approx(0.3125)


class TestMlsShape:
    def test_partition_of_unity_and_linear_reproduction(self, rng):
        model = grid_model()
        for _ in range(15):
            pt = rng.uniform(0.05, 0.95, 2)
            idx, vals, derivs = mls_shape(model, pt)
            assert vals.sum() == pytest.approx(1.0, abs=1e-10)
            got = vals @ model.nodes[idx]
            assert np.allclose(got, pt, atol=1e-10)
            # derivative consistency for the coordinate functions
            assert np.allclose(derivs.T @ model.nodes[idx], np.eye(2), atol=1e-9)
            assert np.allclose(derivs.sum(axis=0), 0.0, atol=1e-9)

    def test_random_cloud_linear_reproduction(self, rng):
        nodes = rng.uniform(0.0, 1.0, (60, 2))
        model = MlsModel(nodes=nodes, radii=np.full(60, 0.35))
        a, bx, by = 0.3, -1.7, 2.4
        f = a + bx * nodes[:, 0] + by * nodes[:, 1]
        for _ in range(10):
            pt = rng.uniform(0.2, 0.8, 2)
            idx, vals, derivs = mls_shape(model, pt)
            assert vals @ f[idx] == pytest.approx(a + bx * pt[0] + by * pt[1], abs=1e-9)
            assert derivs[:, 0] @ f[idx] == pytest.approx(bx, abs=1e-8)
            assert derivs[:, 1] @ f[idx] == pytest.approx(by, abs=1e-8)

    def test_derivatives_match_fd(self, rng):
        model = grid_model()
        f = np.sin(3.0 * model.nodes[:, 0]) * np.cosh(model.nodes[:, 1])
        for _ in range(8):
            pt = rng.uniform(0.2, 0.8, 2)
            idx, _, derivs = mls_shape(model, pt)
            step = 1e-6

            def value(p):
                i, v, _ = mls_shape(model, p)
                return v @ f[i]

            for g, dp in enumerate((np.array([step, 0.0]), np.array([0.0, step]))):
                fd = (value(pt + dp) - value(pt - dp)) / (2.0 * step)
                assert derivs[:, g] @ f[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_support_growth_recovers_sparse_cloud(self):
        nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        model = MlsModel(nodes=nodes, radii=np.full(4, 0.3))  # too small on purpose
        idx, vals, _ = mls_shape(model, (0.5, 0.5))
        assert idx.size >= 3
        assert vals.sum() == pytest.approx(1.0, abs=1e-9)


class TestRecoveredStrain:
    def test_affine_exact(self, rng):
        model = grid_model()
        C = rng.normal(size=(2, 2))
        u = model.nodes @ C.T
        want = np.array([C[0, 0], C[1, 1], C[0, 1] + C[1, 0]])
        for _ in range(6):
            pt = rng.uniform(0.1, 0.9, 2)
            got = recovered_strain(model, u, pt)
            assert np.allclose(got, want, atol=1e-9)

    def test_zero_displacement(self):
        model = grid_model()
        got = recovered_strain(model, np.zeros((len(model.nodes), 2)), (0.4, 0.6))
        assert np.allclose(got, 0.0)

    def test_quadratic_vs_dense_lsq_oracle(self, rng):
        # oracle: central differences of the weighted-least-squares fit value
        model = grid_model()
        nodes = model.nodes
        u = np.stack(
            [nodes[:, 0] ** 2 - 0.5 * nodes[:, 1] ** 2, nodes[:, 0] * nodes[:, 1]],
            axis=1,
        )

        def lsq_value(pt):
            r = np.linalg.norm(nodes - pt, axis=1)
            w = quartic_spline(r / model.radii)
            sel = w > 0
            A = np.column_stack(
                [np.ones(sel.sum()), nodes[sel, 0] - pt[0], nodes[sel, 1] - pt[1]]
            )
            sw = np.sqrt(w[sel])
            coef, *_ = np.linalg.lstsq(sw[:, None] * A, sw[:, None] * u[sel], rcond=None)
            return coef[0]

        for _ in range(20):
            pt = rng.uniform(0.15, 0.85, 2)
            step = 1e-6
            dux = (lsq_value(pt + [step, 0.0]) - lsq_value(pt - [step, 0.0])) / (2 * step)
            duy = (lsq_value(pt + [0.0, step]) - lsq_value(pt - [0.0, step])) / (2 * step)
            want = np.array([dux[0], duy[1], dux[1] + duy[0]])
            got = recovered_strain(model, u, pt)
            assert np.allclose(got, want, rtol=1e-4, atol=1e-7)

    def test_batch_matches_scalar(self, rng):
        model = grid_model()
        u = rng.normal(size=(len(model.nodes), 2))
        pts = rng.uniform(0.1, 0.9, (30, 2))
        batch = recovered_strain_batch(model, u, pts)
        for k in range(len(pts)):
            single = recovered_strain(model, u, pts[k])
            assert np.allclose(batch[k], single, rtol=1e-9, atol=1e-12)


class TestElementError:
    def test_affine_field_zero_error(self, rng):
        mesh = unit_mesh(2)
        mesh = refine_cells(mesh, [mesh.leaves()[0].id])
        caches = ElementCaches(mesh, material=MAT)
        model = MlsModel.from_caches(caches)
        C = rng.normal(size=(2, 2))
        u = (mesh.node_coords() @ C.T).reshape(-1)
        eta = element_errors(caches, u, model, caches.D)
        assert np.max(eta) < 1e-9

    def test_zero_stiffness_zero_error(self, rng):
        mesh = unit_mesh(2)
        caches = ElementCaches(mesh, material=MAT)
        model = MlsModel.from_caches(caches)
        u = rng.normal(size=2 * mesh.num_nodes)
        eta = element_errors(caches, u, model, np.zeros((3, 3)))
        assert np.max(eta) == 0.0

    def test_rate_under_uniform_refinement(self):
        def interpolant_error(depth):
            mesh = unit_mesh(depth)
            caches = ElementCaches(mesh, material=MAT)
            xy = mesh.node_coords()
            u = np.stack(
                [np.exp(xy[:, 0]) * np.cos(xy[:, 1]), -np.exp(xy[:, 0]) * np.sin(xy[:, 1])],
                axis=1,
            ).reshape(-1)
            model = MlsModel.from_caches(caches)
            eta = element_errors(caches, u, model, caches.D)
            return float(np.sqrt((eta**2).sum()))

        e3, e4 = interpolant_error(3), interpolant_error(4)
        rate = np.log2(e3 / e4)
        assert rate >= 0.9

    def test_single_element_accessor(self, rng):
        mesh = unit_mesh(2)
        caches = ElementCaches(mesh, material=MAT)
        model = MlsModel.from_caches(caches)
        u = rng.normal(size=2 * mesh.num_nodes) * 1e-3
        eta = element_errors(caches, u, model, caches.D)
        assert element_error(caches, 3, u, model, caches.D) == pytest.approx(eta[3])


class TestMarkBulk:
    def test_theta_one_marks_all_nonzero(self):
        eta = np.array([0.5, 0.0, 0.2, 0.9])
        assert mark_bulk(eta, 1.0).tolist() == [0, 2, 3]

    def test_theta_small_marks_single_max(self):
        eta = np.array([0.5, 0.1, 0.9, 0.3])
        assert mark_bulk(eta, 1e-12).tolist() == [2]

    def test_uniform_fraction(self):
        eta = np.ones(10)
        assert mark_bulk(eta, 0.35).tolist() == [0, 1, 2, 3]

    def test_theta_zero_empty(self):
        assert mark_bulk(np.ones(5), 0.0).size == 0

    def test_deterministic_tie_break(self):
        eta = np.array([0.3, 0.5, 0.5, 0.1])
        assert mark_bulk(eta, 0.5).tolist() == [1, 2]

    def test_prefix_property(self, rng):
        eta = rng.uniform(0.0, 1.0, 40)
        theta = 0.3
        marked = mark_bulk(eta, theta)
        total = (eta**2).sum()
        assert (eta[marked] ** 2).sum() >= theta * total * (1 - 1e-12)
        # dropping the smallest marked element breaks the bound
        smallest = marked[np.argmin(eta[marked])]
        rest = np.setdiff1d(marked, [smallest])
        assert (eta[rest] ** 2).sum() < theta * total


class TestInterpolator:
    def test_nodal_and_edge_values(self, rng):
        mesh = unit_mesh(2)
        mesh = refine_cells(mesh, [mesh.leaves()[5].id])
        caches = ElementCaches(mesh, material=MAT)
        interp = MeshInterpolator(caches)
        xy = mesh.node_coords()
        vals = 1.5 * xy[:, 0] - 0.3 * xy[:, 1] + 0.1
        for nid in range(0, mesh.num_nodes, 7):
            got = interp.eval_at_key(mesh.node_key(nid), vals)
            assert got == pytest.approx(vals[nid], abs=1e-12)
        for _ in range(20):
            pt = rng.uniform(0.01, 0.99, 2)
            got = interp.eval_at_point(pt, vals)
            assert got == pytest.approx(1.5 * pt[0] - 0.3 * pt[1] + 0.1, abs=1e-10)


class TestRefineAndTransfer:
    def test_affine_exact(self, rng):
        mesh = unit_mesh(2, max_depth=6)
        caches = ElementCaches(mesh, material=MAT)
        xy = mesh.node_coords()
        C = rng.normal(size=(2, 2)) * 1e-3
        u = (xy @ C.T).reshape(-1)
        phi = np.clip(0.2 + 0.3 * xy[:, 0], 0.0, 1.0)
        H = np.zeros(caches.total_qp)
        marked = [caches.elements[k].cell_id for k in (0, 5, 9)]
        new_caches, u2, phi2, H2 = refine_and_transfer(caches, u, phi, H, marked)
        xy2 = new_caches.mesh.node_coords()
        assert np.max(np.abs(u2.reshape(-1, 2) - xy2 @ C.T)) < 1e-10
        assert np.max(np.abs(phi2 - (0.2 + 0.3 * xy2[:, 0]))) < 1e-10
        assert np.all(H2 == 0.0)

    def test_no_new_extrema(self, rng):
        mesh = unit_mesh(3, max_depth=6)
        caches = ElementCaches(mesh, material=MAT)
        xy = mesh.node_coords()
        phi = np.clip(np.sin(3 * xy[:, 0]) * np.cos(2 * xy[:, 1]), 0.0, 1.0)
        u = np.zeros(2 * mesh.num_nodes)
        H = np.zeros(caches.total_qp)
        marked = [e.cell_id for e in caches.elements[::5]]
        new_caches, _, phi2, _ = refine_and_transfer(caches, u, phi, H, marked)
        assert phi2.min() >= phi.min() - 1e-10
        assert phi2.max() <= phi.max() + 1e-10
        # re-interpolation error stays within the old mesh's interpolation scale
        interp_old = MeshInterpolator(caches)
        interp_new = MeshInterpolator(new_caches)
        pts = rng.uniform(0.05, 0.95, (100, 2))
        diffs = [
            abs(interp_new.eval_at_point(p, phi2) - interp_old.eval_at_point(p, phi))
            for p in pts
        ]
        h = 1.0 / 8.0
        assert max(diffs) <= 9.0 * h**2 / 8.0  # |f''| <= 9 for the chosen field

    def test_history_parent_max_non_decreasing(self, rng):
        mesh = unit_mesh(2, max_depth=6)
        caches = ElementCaches(mesh, material=MAT)
        H = rng.uniform(0.0, 5.0, caches.total_qp)
        u = np.zeros(2 * mesh.num_nodes)
        phi = np.zeros(mesh.num_nodes)
        marked = [e.cell_id for e in caches.elements[:6]]
        new_caches, _, _, H2 = refine_and_transfer(caches, u, phi, H, marked)
        n_old_cells = len(mesh.cells)
        for e in new_caches.elements:
            cid = e.cell_id
            while cid >= n_old_cells or not mesh.cells[cid].is_leaf:
                cid = new_caches.mesh.cells[cid].parent
            src = [x for x in caches.elements if x.cell_id == cid][0]
            s0, s1 = caches.qp_offsets[src.id], caches.qp_offsets[src.id + 1]
            t0, t1 = new_caches.qp_offsets[e.id], new_caches.qp_offsets[e.id + 1]
            assert H2[t0:t1].max() <= H[s0:s1].max() + 1e-12

    def test_slit_side_values_preserved(self):
        # field that flips sign across the crack faces and closes at the tip:
        # exactly representable, so the transfer must reproduce it per face
        mesh = build_initial_mesh(
            [(0.0, 0.0, 1.0, 1.0)], 1.0, 3, slit=[(0.0, 0.5), (0.5, 0.5)], max_depth=6
        )
        caches = ElementCaches(mesh, material=MAT)

        def field(x, y, side):
            sign = float(side) if side != 0 else (1.0 if y > 0.5 else -1.0)
            if y == 0.5 and side == 0:
                sign = 0.0  # shared nodes along y = 0.5 beyond the tip
            return sign * 2.0 * max(0.5 - x, 0.0)

        xy = mesh.node_coords()
        ux = np.array(
            [field(xy[n, 0], xy[n, 1], mesh.node_slit_side(n)) for n in range(mesh.num_nodes)]
        )
        u = np.stack([ux, np.zeros_like(ux)], axis=1).reshape(-1)
        phi = np.zeros(mesh.num_nodes)
        H = np.zeros(caches.total_qp)
        band = [
            c.id
            for c in mesh.leaves()
            if c.origin[0] < 0.5 and c.origin[1] + c.size >= 0.5 >= c.origin[1]
        ]
        new_caches, u2, _, _ = refine_and_transfer(caches, u, phi, H, band)
        new_mesh = new_caches.mesh
        xy2 = new_mesh.node_coords()
        ux2 = u2.reshape(-1, 2)[:, 0]
        for nid in range(mesh.num_nodes, new_mesh.num_nodes):
            s = new_mesh.node_slit_side(nid)
            want = field(xy2[nid, 0], xy2[nid, 1], s)
            assert ux2[nid] == pytest.approx(want, abs=1e-12), (nid, xy2[nid], s)


class TestAdaptiveDrivers:
    def controls(self, **kw):
        base = dict(theta_bulk=0.3, elem_tol_rel=0.02, max_adapt_passes=30, quad_order=2)
        base.update(kw)
        return SimpleNamespace(**base)

    def test_theta_zero_never_refines(self):
        scen = builtin_scenarios()["tension"].with_overrides(initial_depth=3, max_depth=5)
        mesh = initial_mesh_convergence(scen, self.controls(theta_bulk=0.0))
        assert mesh.num_leaves == 64

    def test_loose_tolerance_terminates_immediately(self):
        scen = builtin_scenarios()["tension"].with_overrides(initial_depth=3, max_depth=5)
        mesh = initial_mesh_convergence(scen, self.controls(elem_tol_rel=0.95))
        assert mesh.num_leaves == 64

    def test_tension_refines_near_tip(self):
        scen = builtin_scenarios()["tension"].with_overrides(initial_depth=3, max_depth=5)
        mesh = initial_mesh_convergence(scen, self.controls())
        assert mesh.num_leaves > 64
        finest = max(c.level for c in mesh.leaves())
        tips = [c for c in mesh.leaves() if c.level == finest]
        d = [np.hypot(c.center[0] - 0.5, c.center[1] - 0.5) for c in tips]
        assert min(d) < 0.1  # finest cells cluster at the crack tip

    def test_safeguard_marks_crack_band(self):
        mesh = unit_mesh(2, max_depth=6)
        caches = ElementCaches(mesh, material=MAT)
        phi = np.zeros(mesh.num_nodes)
        xy = mesh.node_coords()
        phi[np.argmin(np.abs(xy - 0.5).sum(axis=1))] = 0.8
        eta = np.zeros(len(caches.elements))
        cells = adaptive_marking(
            caches, eta, theta_bulk=0.3, elem_tol_rel=0.02, phi=phi, lo=0.1
        )
        assert cells  # elements touching the high-phi node get marked

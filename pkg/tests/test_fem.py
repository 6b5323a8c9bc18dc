"""Q1 element machinery: quadrature, assembly, constraints, solvers.

Analytical anchors used here:
  * partition of unity of the Q1 basis at the Gauss points,
  * the exact 4x4 Laplacian element matrix on the unit square,
  * the manufactured Poisson solution u = x(1-x)y(1-y) with forcing
    f = 2[x(1-x) + y(1-y)], whose L2 error must shrink at second order,
  * per-node cubic u^3 - 8 for the Newton driver (root u = 2).
"""

import numpy as np
import pytest
import scipy.sparse as sparse

from goalcalib.fem import (
    GAUSS_POINTS,
    NewtonError,
    NumericError,
    SolverError,
    SparseSystem,
    apply_dirichlet,
    assemble,
    newton_solve,
    quadrature_context,
    scatter_pattern,
    scatter_vector,
    shape_functions,
    shape_gradients,
    solve_linear,
)
from goalcalib.mesh import build_mesh


def poisson_system(mesh, forcing, coeff=1.0):
    """Assemble -coeff*Laplace(u) = forcing with zero Dirichlet walls."""
    def kernel(ctx):
        f = forcing(ctx.points[..., 0], ctx.points[..., 1])
        return ctx.local_stiffness(coeff), ctx.local_load(f)

    system = assemble(mesh, kernel)
    return apply_dirichlet(system, mesh.boundary_mask)


class TestBasis:
    def test_partition_of_unity(self):
        for xi, eta in GAUSS_POINTS:
            assert abs(shape_functions(xi, eta).sum() - 1.0) < 1e-14
            assert np.abs(shape_gradients(xi, eta).sum(axis=0)).max() < 1e-14

    def test_nodal_interpolation(self):
        # Shape k equals 1 at reference corner k, 0 at the others.
        corners = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
        for k, (xi, eta) in enumerate(corners):
            np.testing.assert_allclose(
                shape_functions(xi, eta), np.eye(4)[k], atol=1e-15
            )

    def test_interpolation_reproduces_bilinear(self):
        mesh = build_mesh(3, 3)
        ctx = quadrature_context(mesh)
        coords = mesh.node_coords
        nodal = 2.0 + coords[:, 0] - 3.0 * coords[:, 1] + coords[:, 0] * coords[:, 1]
        x, y = ctx.points[..., 0], ctx.points[..., 1]
        np.testing.assert_allclose(ctx.interpolate(nodal), 2.0 + x - 3.0 * y + x * y)
        grads = ctx.gradient(nodal)
        np.testing.assert_allclose(grads[..., 0], 1.0 + y)
        np.testing.assert_allclose(grads[..., 1], -3.0 + x)


class TestAssembly:
    def test_unit_element_stiffness(self):
        # Known Q1 Laplacian matrix on a single unit square.
        mesh = build_mesh(1, 1)
        system = assemble(mesh, lambda ctx: (ctx.local_stiffness(1.0), None))
        expected = (
            np.array(
                [
                    [4.0, -1.0, -2.0, -1.0],
                    [-1.0, 4.0, -1.0, -2.0],
                    [-2.0, -1.0, 4.0, -1.0],
                    [-1.0, -2.0, -1.0, 4.0],
                ]
            )
            / 6.0
        )
        # Global node order is by grid index, so corner (1,1) is node 3 and
        # (0,1) is node 2; map the counterclockwise reference matrix over.
        perm = np.array([0, 1, 3, 2])
        expected = expected[np.ix_(perm, perm)]
        np.testing.assert_allclose(system.matrix.toarray(), expected, atol=1e-15)

    def test_mass_total_is_area(self):
        mesh = build_mesh(13, 9, extent=(2.0, 0.5))
        system = assemble(mesh, lambda ctx: (ctx.local_mass(1.0), None))
        assert system.matrix.sum() == pytest.approx(mesh.area, abs=1e-12)

    def test_stiffness_rowsums_vanish(self):
        mesh = build_mesh(6, 6)
        system = assemble(mesh, lambda ctx: (ctx.local_stiffness(1.0), None))
        assert np.abs(system.matrix @ np.ones(mesh.n_nodes)).max() < 1e-13

    def test_load_of_one_integrates_to_area(self):
        mesh = build_mesh(5, 7, extent=(3.0, 2.0))
        system = assemble(mesh, lambda ctx: (None, ctx.local_load(1.0)))
        assert system.rhs.sum() == pytest.approx(mesh.area, abs=1e-12)

    def test_nonfinite_reports_element(self):
        mesh = build_mesh(4, 4)

        def broken(ctx):
            Ke = ctx.local_stiffness(1.0)
            Ke[3, 0, 0] = np.nan
            return Ke, None

        with pytest.raises(NumericError) as err:
            assemble(mesh, broken)
        assert err.value.element_index == 3

    def test_scatter_matches_dense_reference(self):
        # Cross-check the bincount scatter against a brute-force loop.
        mesh = build_mesh(3, 2)
        rng = np.random.default_rng(11)
        Ke = rng.standard_normal((mesh.n_elements, 4, 4))
        dense = np.zeros((mesh.n_nodes, mesh.n_nodes))
        for e, nodes in enumerate(mesh.conn):
            for a in range(4):
                for b in range(4):
                    dense[nodes[a], nodes[b]] += Ke[e, a, b]
        pattern = scatter_pattern(mesh)
        np.testing.assert_allclose(pattern.csr(Ke).toarray(), dense, atol=1e-14)
        Fe = rng.standard_normal((mesh.n_elements, 4))
        ref = np.zeros(mesh.n_nodes)
        for e, nodes in enumerate(mesh.conn):
            ref[nodes] += Fe[e]
        np.testing.assert_allclose(scatter_vector(mesh, Fe), ref, atol=1e-14)


class TestDirichlet:
    def test_identity_rows(self):
        mesh = build_mesh(4, 4)
        system = assemble(mesh, lambda ctx: (ctx.local_stiffness(1.0), ctx.local_load(1.0)))
        constrained = apply_dirichlet(system, mesh.boundary_mask, values=2.5)
        A = constrained.matrix.toarray()
        for i in np.nonzero(mesh.boundary_mask)[0]:
            row = np.zeros(mesh.n_nodes)
            row[i] = 1.0
            np.testing.assert_array_equal(A[i], row)
            assert constrained.rhs[i] == 2.5
        # Interior rows untouched.
        free = ~mesh.boundary_mask
        np.testing.assert_array_equal(A[free], system.matrix.toarray()[free])

    def test_constant_solution_recovered(self):
        mesh = build_mesh(6, 5)
        system = assemble(mesh, lambda ctx: (ctx.local_stiffness(1.0), None))
        constrained = apply_dirichlet(system, mesh.boundary_mask, values=3.0)
        u = solve_linear(constrained)
        np.testing.assert_allclose(u, 3.0, atol=1e-11)


class TestSolveLinear:
    def test_direct_and_cg_agree(self):
        mesh = build_mesh(9, 9)
        system = poisson_system(mesh, lambda x, y: np.sin(np.pi * x) * y)
        direct = solve_linear(system, method="direct")
        iterative = solve_linear(system, method="cg", rtol=1e-12)
        np.testing.assert_allclose(iterative, direct, atol=1e-9)

    def test_residual_tolerance_enforced(self):
        # A singular matrix cannot satisfy the residual contract.
        matrix = sparse.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises((SolverError, RuntimeError)):
            solve_linear(SparseSystem(matrix, np.array([1.0, 0.0])))

    def test_unknown_method(self):
        matrix = sparse.identity(3, format="csr")
        with pytest.raises(ValueError):
            solve_linear(SparseSystem(matrix, np.zeros(3)), method="gmres")

    def test_manufactured_convergence_second_order(self):
        errors, hs = [], []
        for n in (8, 16, 32, 64):
            mesh = build_mesh(n, n)
            system = poisson_system(
                mesh, lambda x, y: 2.0 * (x * (1 - x) + y * (1 - y))
            )
            u = solve_linear(system)
            x, y = mesh.node_coords[:, 0], mesh.node_coords[:, 1]
            exact = x * (1 - x) * y * (1 - y)
            mass = assemble(mesh, lambda ctx: (ctx.local_mass(1.0), None)).matrix
            diff = u - exact
            errors.append(np.sqrt(diff @ (mass @ diff)))
            hs.append(1.0 / n)
        slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.2)

    def test_symmetry_under_axis_swap(self):
        # Symmetric forcing on a square mesh gives a mirror-symmetric solution.
        n = 12
        mesh = build_mesh(n, n)
        system = poisson_system(
            mesh, lambda x, y: 2.0 * (x * (1 - x) + y * (1 - y))
        )
        u = solve_linear(system).reshape(n + 1, n + 1)
        assert np.abs(u - u.T).max() < 1e-10


class TestNewton:
    def one_dof_system(self, value):
        return sparse.csr_matrix(np.array([[value]]))

    def test_linear_problem_one_iteration(self):
        mesh = build_mesh(5, 5)
        system = poisson_system(mesh, lambda x, y: np.ones_like(x))
        jac = lambda u: SparseSystem(system.matrix, None, system.pattern)
        res = lambda u: system.matrix @ u - system.rhs
        result = newton_solve(res, jac, np.zeros(mesh.n_nodes))
        assert result.iterations == 1
        np.testing.assert_allclose(result.x, solve_linear(system), atol=1e-12)

    def test_cubic_per_node(self):
        # Mass-lumped cubic residual m*(u^3 - 8): root u = 2 everywhere.
        mesh = build_mesh(4, 3)
        lump = assemble(mesh, lambda ctx: (None, ctx.local_load(1.0))).rhs

        def res(u):
            return lump * (u**3 - 8.0)

        def jac(u):
            return SparseSystem(sparse.diags(lump * 3.0 * u**2, format="csr"), None)

        result = newton_solve(res, jac, np.full(mesh.n_nodes, 1.0))
        np.testing.assert_allclose(result.x, 2.0, atol=1e-10)
        # Quadratic tail: each residual norm roughly squares.
        tail = result.residual_history[-2]
        assert tail < 1e-4

    def test_divergence_detected(self):
        # Newton on cbrt(x) doubles the iterate each step and never settles.
        res = lambda x: np.cbrt(x)
        jac = lambda x: SparseSystem(self.one_dof_system(1.0 / (3.0 * np.cbrt(x[0]) ** 2)), None)
        with pytest.raises(NewtonError) as err:
            newton_solve(res, jac, np.array([1.0]))
        assert len(err.value.history) >= 5

    def test_iteration_cap(self):
        # Constant residual with unit Jacobian never converges or diverges.
        res = lambda x: np.array([1.0])
        jac = lambda x: SparseSystem(self.one_dof_system(1.0), None)
        with pytest.raises(NewtonError) as err:
            newton_solve(res, jac, np.array([0.0]), max_iterations=7)
        assert "7" in str(err.value)

    def test_already_converged(self):
        res = lambda x: np.zeros(1)
        jac = lambda x: SparseSystem(self.one_dof_system(1.0), None)
        assert newton_solve(res, jac, np.array([4.0])).iterations == 0

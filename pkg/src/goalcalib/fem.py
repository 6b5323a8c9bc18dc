"""Bilinear (Q1) finite elements on structured quadrilateral meshes.

The pieces here are deliberately small: a 2x2 Gauss quadrature context bound
to a mesh, vectorized local-matrix helpers, a scatter step that folds element
contributions into CSR (and, for speed, LAPACK band storage), row-replacement
Dirichlet constraints, and direct/iterative linear solvers plus a damped-free
Newton driver. Everything downstream (model pairs, estimators, samplers) is
built from these.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as splinalg


class NumericError(ArithmeticError):
    """Non-finite values produced during assembly.

    Carries the index of the first offending element in ``element_index``.
    """

    def __init__(self, message, element_index=None):
        super().__init__(message)
        self.element_index = element_index


class SolverError(RuntimeError):
    """Linear or nonlinear solve did not reach the requested tolerance."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history) if history is not None else None


class NewtonError(SolverError):
    """Newton iteration diverged or hit the iteration cap."""


# 2x2 Gauss-Legendre rule on [-1, 1]^2; exact for bicubics, which covers
# every bilinear-times-bilinear integrand exactly on affine quads.
_G = 1.0 / np.sqrt(3.0)
GAUSS_POINTS = np.array(
    [(-_G, -_G), (_G, -_G), (_G, _G), (-_G, _G)]
)
GAUSS_WEIGHTS = np.ones(4)

# Reference-square corners in the same counterclockwise order as mesh.conn.
_REF_CORNERS = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])


def shape_functions(xi, eta):
    """Q1 shape functions at one reference point, shape (4,)."""
    return 0.25 * (1.0 + _REF_CORNERS[:, 0] * xi) * (1.0 + _REF_CORNERS[:, 1] * eta)


def shape_gradients(xi, eta):
    """Reference gradients of the Q1 shape functions, shape (4, 2)."""
    dxi = 0.25 * _REF_CORNERS[:, 0] * (1.0 + _REF_CORNERS[:, 1] * eta)
    deta = 0.25 * _REF_CORNERS[:, 1] * (1.0 + _REF_CORNERS[:, 0] * xi)
    return np.column_stack([dxi, deta])


class QuadratureContext:
    """Per-mesh tables used by element kernels.

    Attributes
    ----------
    basis : ndarray, (4 gauss, 4 local)
        Shape function values.
    grads : ndarray, (4 gauss, 4 local, 2)
        Physical gradients (constant across elements on a uniform mesh).
    wdet : ndarray, (4,)
        Quadrature weight times Jacobian determinant.
    points : ndarray, (n_elements, 4 gauss, 2)
        Physical quadrature point coordinates.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self.conn = mesh.conn
        self.basis = np.array([shape_functions(x, e) for x, e in GAUSS_POINTS])
        ref_grads = np.array([shape_gradients(x, e) for x, e in GAUSS_POINTS])
        jac = np.array([mesh.hx / 2.0, mesh.hy / 2.0])
        self.grads = ref_grads / jac  # (4g, 4i, 2), divides each gradient component
        self.wdet = GAUSS_WEIGHTS * jac[0] * jac[1]
        corners = mesh.node_coords[mesh.conn]  # (n_elem, 4, 2)
        self.points = np.einsum("gi,eik->egk", self.basis, corners)
        # Pre-contracted reference tensors so coefficient-weighted local
        # matrices reduce to one small contraction per assembly.
        self._stiff_ref = np.einsum("g,gik,gjk->gij", self.wdet, self.grads, self.grads)
        self._mass_ref = np.einsum("g,gi,gj->gij", self.wdet, self.basis, self.basis)
        self._wbasis = self.wdet[:, None] * self.basis
        self._wgrads = self.wdet[:, None, None] * self.grads

    def interpolate(self, values):
        """Nodal values -> values at quadrature points, (n_elem, 4 gauss)."""
        return values[self.conn] @ self.basis.T

    def gradient(self, values):
        """Nodal values -> gradients at quadrature points, (n_elem, 4 gauss, 2)."""
        return np.einsum("gik,ei->egk", self.grads, values[self.conn])

    # --- local contribution helpers -------------------------------------
    # coeff arguments are either scalars or (n_elem, 4 gauss) arrays.

    def local_load(self, coeff):
        """f |-> (f, phi_i): returns (n_elem, 4)."""
        return self._gausswise(coeff) @ self._wbasis

    def local_mass(self, coeff=1.0):
        """c |-> (c phi_j, phi_i): returns (n_elem, 4, 4)."""
        c = self._gausswise(coeff)
        return np.einsum("eg,gij->eij", c, self._mass_ref)

    def local_stiffness(self, coeff=1.0):
        """c |-> (c grad phi_j, grad phi_i): returns (n_elem, 4, 4)."""
        c = self._gausswise(coeff)
        return np.einsum("eg,gij->eij", c, self._stiff_ref)

    def local_grad_coupling(self, coeff, grad_field):
        """c, G |-> (c phi_j G . grad phi_i): returns (n_elem, 4, 4).

        Used for quasi-linear diffusion Jacobians where the coefficient
        linearization multiplies a frozen gradient ``G`` (n_elem, 4g, 2).
        """
        c = self._gausswise(coeff)
        proj = np.einsum("egk,gik->egi", grad_field, self.grads)
        proj *= (c * self.wdet)[..., None]
        return np.einsum("egi,gj->eij", proj, self.basis)

    def local_grad_load(self, grad_field):
        """G |-> (G . grad phi_i): returns (n_elem, 4)."""
        return np.einsum("egk,gik->ei", grad_field, self._wgrads)

    def integrate(self, coeff):
        """Integrate a quadrature-point (or constant) quantity over the mesh."""
        c = self._gausswise(coeff)
        return float(np.einsum("g,eg->", self.wdet, c))

    def _gausswise(self, coeff):
        if np.isscalar(coeff):
            return np.full((self.mesh.n_elements, 4), float(coeff))
        coeff = np.asarray(coeff, dtype=float)
        if coeff.shape == (self.mesh.n_elements, 4):
            return coeff
        raise ValueError(
            f"coefficient must be scalar or (n_elements, 4), got {coeff.shape}"
        )


def quadrature_context(mesh):
    """Cached :class:`QuadratureContext` for ``mesh``."""
    return mesh.cache("quadrature", lambda: QuadratureContext(mesh))


class ScatterPattern:
    """Folds (n_elem, 4, 4) local matrices into a fixed CSR pattern.

    The CSR structure is computed once; each assembly is then a single
    ``bincount`` over the flattened local entries. A band-storage view of
    the same pattern backs the direct solver.
    """

    def __init__(self, mesh):
        conn = mesh.conn
        n = mesh.n_nodes
        rows = np.repeat(conn, 4, axis=1).ravel()
        cols = np.tile(conn, (1, 4)).ravel()
        order = np.lexsort((cols, rows))
        rs, cs = rows[order], cols[order]
        keys = rs.astype(np.int64) * n + cs
        uniq, inverse = np.unique(keys, return_inverse=True)
        self.nnz = uniq.size
        self.indices = (uniq % n).astype(np.int32)
        urows = (uniq // n).astype(np.int64)
        self.indptr = np.zeros(n + 1, dtype=np.int32)
        np.add.at(self.indptr, urows + 1, 1)
        self.indptr = np.cumsum(self.indptr, dtype=np.int32)
        self.fold = np.empty(rows.size, dtype=np.int64)
        self.fold[order] = inverse
        self.shape = (n, n)

        row_of_entry = urows
        col_of_entry = self.indices
        self.bandwidth = int(np.max(np.abs(row_of_entry - col_of_entry)))
        # Flat index into LAPACK band storage ab[(ku + i - j), j].
        self._band_ix = (self.bandwidth + row_of_entry - col_of_entry) * n + col_of_entry
        self._keys = uniq
        self._rows = row_of_entry
        self._diag_pos = None
        self._transpose_map = None

    def csr(self, local_matrices):
        """Assemble local (n_elem, 4, 4) blocks into a CSR matrix."""
        data = np.bincount(self.fold, weights=local_matrices.ravel(), minlength=self.nnz)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def csr_data(self, local_matrices):
        """Just the CSR data vector, for pattern-sharing matrix arithmetic."""
        return np.bincount(self.fold, weights=local_matrices.ravel(), minlength=self.nnz)

    def wrap(self, data):
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def band(self, data):
        """CSR data vector -> LAPACK band storage (2*ku + 1, n)."""
        n = self.shape[0]
        ab = np.zeros((2 * self.bandwidth + 1) * n)
        ab[self._band_ix] = data
        return ab.reshape(2 * self.bandwidth + 1, n)

    def transpose_map(self):
        """Permutation sending CSR data of A to CSR data of A^T.

        The element-block pattern is structurally symmetric, so every (i, j)
        entry has a (j, i) partner at the same sparsity.
        """
        if self._transpose_map is None:
            n = self.shape[0]
            tkeys = self.indices.astype(np.int64) * n + self._rows
            self._transpose_map = np.searchsorted(self._keys, tkeys)
        return self._transpose_map

    def diagonal_positions(self):
        """Positions of diagonal entries in the CSR data vector."""
        if self._diag_pos is None:
            n = self.shape[0]
            pos = np.full(n, -1, dtype=np.int64)
            for i in range(n):
                sl = slice(self.indptr[i], self.indptr[i + 1])
                hits = np.nonzero(self.indices[sl] == i)[0]
                if hits.size:
                    pos[i] = self.indptr[i] + hits[0]
            if np.any(pos < 0):
                raise ValueError("pattern has empty diagonal entries")
            self._diag_pos = pos
        return self._diag_pos


def scatter_pattern(mesh):
    """Cached :class:`ScatterPattern` for ``mesh``."""
    return mesh.cache("scatter", lambda: ScatterPattern(mesh))


def scatter_vector(mesh, local_vectors):
    """Assemble (n_elem, 4) local vectors into a global load vector."""
    return np.bincount(
        mesh.conn.ravel(), weights=local_vectors.ravel(), minlength=mesh.n_nodes
    )


@dataclass
class SparseSystem:
    """A sparse linear system ``matrix @ x = rhs``."""

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    pattern: ScatterPattern = field(default=None, repr=False)


def assemble(mesh, element_kernel):
    """Assemble a kernel's element contributions into a :class:`SparseSystem`.

    Parameters
    ----------
    mesh : StructuredMesh
    element_kernel : callable
        Receives the mesh's :class:`QuadratureContext` and returns a pair
        ``(local_matrices, local_vectors)``; either entry may be ``None``.
        Shapes are (n_elem, 4, 4) and (n_elem, 4).

    Raises
    ------
    NumericError
        If any local contribution is non-finite; the error reports the
        first offending element index.
    """
    ctx = quadrature_context(mesh)
    Ke, Fe = element_kernel(ctx)
    for name, arr in (("matrix", Ke), ("vector", Fe)):
        if arr is not None and not np.all(np.isfinite(arr)):
            bad = np.nonzero(~np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1))[0]
            raise NumericError(
                f"non-finite {name} contribution in element {bad[0]}",
                element_index=int(bad[0]),
            )
    pattern = scatter_pattern(mesh)
    matrix = pattern.csr(Ke) if Ke is not None else pattern.wrap(np.zeros(pattern.nnz))
    rhs = scatter_vector(mesh, Fe) if Fe is not None else np.zeros(mesh.n_nodes)
    return SparseSystem(matrix, rhs, pattern)


class RowConstraint:
    """Row-replacement Dirichlet constraints for a fixed scatter pattern.

    Replaces each constrained row by the identity row and the rhs entry by
    the prescribed value. Precomputes the touched data positions so the hot
    assembly loops can constrain a raw CSR data vector in place.
    """

    def __init__(self, pattern, mask):
        self.mask = np.asarray(mask, dtype=bool)
        self.where = np.nonzero(self.mask)[0]
        starts = pattern.indptr[self.where]
        stops = pattern.indptr[self.where + 1]
        self.row_entries = np.concatenate(
            [np.arange(a, b) for a, b in zip(starts, stops)]
        ) if self.where.size else np.empty(0, dtype=np.int64)
        self.diag_entries = pattern.diagonal_positions()[self.where]

    def apply(self, data, rhs, values=0.0):
        """Constrain a CSR data vector and rhs in place."""
        data[self.row_entries] = 0.0
        data[self.diag_entries] = 1.0
        rhs[self.where] = values
        return data, rhs


def apply_dirichlet(system, mask, values=0.0):
    """Return a new :class:`SparseSystem` with identity rows at ``mask``."""
    pattern = system.pattern
    if pattern is None:
        matrix = system.matrix.tolil()
        where = np.nonzero(np.asarray(mask, dtype=bool))[0]
        for i in where:
            matrix.rows[i] = [int(i)]
            matrix.data[i] = [1.0]
        rhs = system.rhs.copy()
        rhs[where] = values
        return SparseSystem(matrix.tocsr(), rhs)
    data = system.matrix.data.copy()
    rhs = system.rhs.copy()
    RowConstraint(pattern, mask).apply(data, rhs, values)
    return SparseSystem(pattern.wrap(data), rhs, pattern)


def _solve_banded_csr(matrix, rhs, pattern):
    if pattern is not None and matrix.nnz == pattern.nnz:
        ku = pattern.bandwidth
        ab = pattern.band(matrix.data)
    else:
        coo = matrix.tocoo()
        ku = int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0
        ab = np.zeros((2 * ku + 1, matrix.shape[0]))
        ab[ku + coo.row - coo.col, coo.col] = coo.data
    return scipy.linalg.solve_banded((ku, ku), ab, rhs)


def solve_linear(system, method="direct", rtol=1e-12):
    """Solve a sparse linear system and verify the residual.

    ``method`` is ``"direct"`` (banded LAPACK factorization when the
    bandwidth is narrow, sparse LU otherwise) or ``"cg"`` (Jacobi-
    preconditioned conjugate gradients, for symmetric systems).

    Raises
    ------
    SolverError
        If the achieved relative residual exceeds ``rtol``; the error
        carries the achieved value.
    """
    matrix, rhs = system.matrix, system.rhs
    n = matrix.shape[0]
    if method == "direct":
        bandwidth = None
        if system.pattern is not None and matrix.nnz == system.pattern.nnz:
            bandwidth = system.pattern.bandwidth
        if bandwidth is not None and bandwidth <= max(64, int(np.sqrt(n)) + 2):
            apply_inverse = lambda b: _solve_banded_csr(matrix, b, system.pattern)
        else:
            lu = splinalg.splu(matrix.tocsc())
            apply_inverse = lu.solve
        x = apply_inverse(rhs)
    elif method == "cg":
        diag = matrix.diagonal()
        if np.any(diag == 0.0):
            raise SolverError("cg preconditioner needs a nonzero diagonal")
        precond = splinalg.LinearOperator((n, n), matvec=lambda v: v / diag)
        x, info = splinalg.cg(matrix, rhs, rtol=rtol, atol=0.0, maxiter=20 * n, M=precond)
        if info != 0:
            achieved = float(np.linalg.norm(rhs - matrix @ x))
            raise SolverError(
                f"cg did not converge (info={info})", residual=achieved
            )
        apply_inverse = None
    else:
        raise ValueError(f"unknown linear solver method {method!r}")

    scale = max(float(np.linalg.norm(rhs)), 1e-300)
    residual = float(np.linalg.norm(rhs - matrix @ x)) / scale
    if residual > rtol and apply_inverse is not None:
        # One pass of iterative refinement recovers a small backward error
        # when conditioning pushed the raw factorization past rtol.
        x = x + apply_inverse(rhs - matrix @ x)
        residual = float(np.linalg.norm(rhs - matrix @ x)) / scale
    if not np.isfinite(residual) or residual > rtol:
        raise SolverError(
            f"linear solve residual {residual:.3e} exceeds rtol={rtol:.1e}",
            residual=residual,
        )
    return x


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    residual_history: list


def newton_solve(
    residual_fn,
    jacobian_fn,
    x0,
    atol=1e-10,
    rtol=1e-12,
    max_iterations=25,
    divergence_window=5,
):
    """Full-step Newton iteration on assembled residual/Jacobian callables.

    ``residual_fn(x)`` returns the residual vector with constraints already
    applied; ``jacobian_fn(x)`` returns the matching :class:`SparseSystem`
    matrix (rhs ignored). Convergence means the residual norm fell below
    ``atol`` or below ``rtol`` times the initial norm. A residual norm that
    grows over ``divergence_window`` consecutive iterations raises
    :class:`NewtonError`, as does exhausting ``max_iterations``; both carry
    the residual-norm history.
    """
    x = np.array(x0, dtype=float)
    history = [float(np.linalg.norm(residual_fn(x)))]
    if history[0] <= atol:
        return NewtonResult(x, 0, history)
    growth = 0
    for iteration in range(1, max_iterations + 1):
        jac = jacobian_fn(x)
        system = SparseSystem(jac.matrix, -residual_fn(x), jac.pattern)
        x = x + solve_linear(system)
        norm = float(np.linalg.norm(residual_fn(x)))
        history.append(norm)
        if norm <= atol or norm <= rtol * history[0]:
            return NewtonResult(x, iteration, history)
        growth = growth + 1 if norm > history[-2] else 0
        if growth >= divergence_window:
            raise NewtonError(
                f"Newton diverged: residual grew {divergence_window} steps in a row",
                residual=norm,
                history=history,
            )
    raise NewtonError(
        f"Newton did not converge in {max_iterations} iterations",
        residual=history[-1],
        history=history,
    )

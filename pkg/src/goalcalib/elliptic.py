"""Elliptic model pair: nonlinear diffusion refined against linear diffusion.

Both models live on the unit square with homogeneous Dirichlet walls and the
oscillatory source ``10 cos^2(4 pi x) cos^2(4 pi y)``. The coarse model is
pure linear diffusion with conductivity ``kappa0``; the fine model replaces
the conductivity by a solution-dependent law ``k(u)`` parameterized by
``theta = (kappa, alpha)``. The quantity of interest is the domain integral
of the solution.

The solution-dependent laws are pluggable. ``quadratic`` is the default:

    quadratic    k(u) = kappa * (1 + alpha * u^2)
    linear       k(u) = kappa * (1 + alpha * u)
    exponential  k(u) = kappa * exp(alpha * u)
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fem import (
    RowConstraint,
    SparseSystem,
    newton_solve,
    quadrature_context,
    scatter_pattern,
    scatter_vector,
    solve_linear,
)
from .mesh import StructuredMesh


def forcing(x, y):
    """Source term of both models, ``10 cos^2(4 pi x) cos^2(4 pi y)``."""
    return 10.0 * np.cos(4.0 * np.pi * x) ** 2 * np.cos(4.0 * np.pi * y) ** 2


# name -> (k, dk/du, d2k/du2), each taking (u, kappa, alpha).
CONDUCTIVITY_LAWS = {
    "quadratic": (
        lambda u, k, a: k * (1.0 + a * u**2),
        lambda u, k, a: 2.0 * k * a * u,
        lambda u, k, a: 2.0 * k * a * np.ones_like(u),
    ),
    "linear": (
        lambda u, k, a: k * (1.0 + a * u),
        lambda u, k, a: k * a * np.ones_like(u),
        lambda u, k, a: np.zeros_like(u),
    ),
    "exponential": (
        lambda u, k, a: k * np.exp(a * u),
        lambda u, k, a: k * a * np.exp(a * u),
        lambda u, k, a: k * a**2 * np.exp(a * u),
    ),
}


@dataclass(frozen=True)
class EllipticFineParams:
    """Fine-model conductivity parameters ``theta = (kappa, alpha)``."""

    kappa: float
    alpha: float

    def __post_init__(self):
        if not (self.kappa > 0.0):
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")

    def as_array(self):
        return np.array([self.kappa, self.alpha])


@dataclass(frozen=True)
class EllipticCoarseParams:
    """Coarse-model conductivity."""

    kappa0: float = 0.25

    def __post_init__(self):
        if not (self.kappa0 > 0.0):
            raise ValueError(f"kappa0 must be positive, got {self.kappa0}")


class EllipticModelPair:
    """Coarse/fine elliptic pair with adjoint and error-problem solvers.

    The instance caches the coarse solution and its quadrature-point data
    after the first request, so repeated linearized error solves (the
    calibration hot path) cost one matrix assembly plus one banded solve.
    """

    def __init__(self, mesh: StructuredMesh, coarse=None, fine=None, law="quadratic", source=forcing):
        self.mesh = mesh
        self.coarse = coarse if coarse is not None else EllipticCoarseParams()
        self.fine = fine
        if law not in CONDUCTIVITY_LAWS:
            raise ValueError(
                f"unknown conductivity law {law!r}; options: {sorted(CONDUCTIVITY_LAWS)}"
            )
        self.law = law
        self._k, self._dk, self._d2k = CONDUCTIVITY_LAWS[law]

        self.ctx = quadrature_context(mesh)
        self.pattern = scatter_pattern(mesh)
        self.constraint = RowConstraint(self.pattern, mesh.boundary_mask)
        pts = self.ctx.points
        self.source_vector = self._zero_walls(
            scatter_vector(mesh, self.ctx.local_load(source(pts[..., 0], pts[..., 1])))
        )
        # QoI functional: integral of u against 1.
        self.qoi_vector = scatter_vector(mesh, self.ctx.local_load(1.0))
        self._coarse_cache = None

    # ------------------------------------------------------------------
    # plumbing

    def with_fine_params(self, fine):
        """Shallow copy sharing mesh and coarse caches, new fine parameters."""
        if not isinstance(fine, EllipticFineParams):
            fine = EllipticFineParams(*np.asarray(fine, dtype=float))
        clone = object.__new__(EllipticModelPair)
        clone.__dict__ = dict(self.__dict__)
        clone.fine = fine
        return clone

    @property
    def theta_dim(self):
        return 2

    def params_from_array(self, theta):
        theta = np.asarray(theta, dtype=float)
        return EllipticFineParams(kappa=theta[0], alpha=theta[1])

    def _fine_params(self, theta=None):
        params = self.fine if theta is None else theta
        if params is None:
            raise ValueError("no fine parameters configured on this pair")
        if not isinstance(params, EllipticFineParams):
            params = self.params_from_array(params)
        return params

    def _zero_walls(self, vec):
        vec = np.asarray(vec, dtype=float)
        vec[self.mesh.boundary_mask] = 0.0
        return vec

    def _coarse_data(self):
        if self._coarse_cache is None:
            local = self.ctx.local_stiffness(self.coarse.kappa0)
            data = self.pattern.csr_data(local)
            rhs = self.source_vector.copy()
            self.constraint.apply(data, rhs)
            system = SparseSystem(self.pattern.wrap(data), rhs, self.pattern)
            u0 = solve_linear(system)
            adj_rhs = self.qoi_vector.copy()
            adj_data = data.copy()  # symmetric, constraints already in place
            p0 = solve_linear(
                SparseSystem(self.pattern.wrap(adj_data), self._zero_walls(adj_rhs), self.pattern)
            )
            self._coarse_cache = {
                "u0": u0,
                "p0": p0,
                "u0_gauss": self.ctx.interpolate(u0),
                "grad_u0": self.ctx.gradient(u0),
            }
        return self._coarse_cache

    # ------------------------------------------------------------------
    # forward / adjoint solves

    def solve_coarse_forward(self):
        """Coarse solution (cached)."""
        return self._coarse_data()["u0"].copy()

    def solve_coarse_adjoint(self, u0=None):
        """Coarse adjoint weighting the QoI functional (cached)."""
        return self._coarse_data()["p0"].copy()

    def solve_fine_forward(self, theta=None, initial_guess=None, return_info=False):
        """Newton solve of the fine model; initial guess is the coarse solution."""
        params = self._fine_params(theta)
        u_init = self.solve_coarse_forward() if initial_guess is None else initial_guess

        def res(u):
            r = self._semilinear_vector(u, params) - self.source_vector
            r[self.mesh.boundary_mask] = u[self.mesh.boundary_mask]
            return r

        def jac(u):
            data = self._linearized_data(u, params)
            self.constraint.apply(data, np.zeros(self.mesh.n_nodes))
            return SparseSystem(self.pattern.wrap(data), None, self.pattern)

        result = newton_solve(res, jac, u_init)
        return (result.x, result) if return_info else result.x

    def solve_fine_adjoint(self, u, theta=None):
        """Fine adjoint at state ``u``: transposed linearization against the QoI."""
        params = self._fine_params(theta)
        data = self._linearized_data(u, params)
        rhs = self._zero_walls(self.qoi_vector.copy())
        tdata = data[self.pattern.transpose_map()]
        self.constraint.apply(tdata, rhs)
        return solve_linear(SparseSystem(self.pattern.wrap(tdata), rhs, self.pattern))

    # ------------------------------------------------------------------
    # forms and functionals (test/trial fields are plain nodal arrays)

    def semilinear_form(self, u, v, theta=None):
        """Weighted-gradient form of the fine model, integrated exactly."""
        params = self._fine_params(theta)
        k = self._k(self.ctx.interpolate(u), params.kappa, params.alpha)
        dot = np.einsum("egk,egk->eg", self.ctx.gradient(u), self.ctx.gradient(v))
        return self.ctx.integrate(k * dot)

    def coarse_form(self, u, v):
        dot = np.einsum("egk,egk->eg", self.ctx.gradient(u), self.ctx.gradient(v))
        return self.ctx.integrate(self.coarse.kappa0 * dot)

    def form_derivative(self, u, w, v, theta=None):
        """Directional derivative of the fine form at ``u`` in direction ``w``."""
        params = self._fine_params(theta)
        ug = self.ctx.interpolate(u)
        gu, gw, gv = (self.ctx.gradient(f) for f in (u, w, v))
        k = self._k(ug, params.kappa, params.alpha)
        dk = self._dk(ug, params.kappa, params.alpha)
        wg = self.ctx.interpolate(w)
        term = k * np.einsum("egk,egk->eg", gw, gv)
        term += dk * wg * np.einsum("egk,egk->eg", gu, gv)
        return self.ctx.integrate(term)

    def form_second_derivative(self, u, q, w, v, theta=None):
        """Second directional derivative in directions ``(q, w)``, paired with ``v``."""
        params = self._fine_params(theta)
        ug = self.ctx.interpolate(u)
        qg, wg = self.ctx.interpolate(q), self.ctx.interpolate(w)
        gu, gq, gw, gv = (self.ctx.gradient(f) for f in (u, q, w, v))
        dk = self._dk(ug, params.kappa, params.alpha)
        d2k = self._d2k(ug, params.kappa, params.alpha)
        term = dk * qg * np.einsum("egk,egk->eg", gw, gv)
        term += dk * wg * np.einsum("egk,egk->eg", gq, gv)
        term += d2k * qg * wg * np.einsum("egk,egk->eg", gu, gv)
        return self.ctx.integrate(term)

    def source_functional(self, v):
        return float(self.source_vector @ v)

    def qoi(self, u):
        """Integral of the solution over the domain."""
        return float(self.qoi_vector @ u)

    def qoi_derivative(self, u, v):
        return float(self.qoi_vector @ v)

    def qoi_second_derivative(self, u, q, v):
        return 0.0

    # ------------------------------------------------------------------
    # residual functionals and linearized solves (error machinery hooks)

    def residual_functional(self, u0, theta=None):
        """Coefficients of q -> source(q) - fine_form(u0; q), walls zeroed."""
        params = self._fine_params(theta)
        return self._zero_walls(self.source_vector - self._semilinear_vector(u0, params))

    def adjoint_residual_functional(self, u0, p0, theta=None):
        """Coefficients of v -> qoi'(u0; v) - fine_form'(u0; v, p0), walls zeroed."""
        params = self._fine_params(theta)
        matrix = self.pattern.wrap(self._linearized_data(u0, params))
        return self._zero_walls(self.qoi_vector - matrix.T @ p0)

    def linearized_apply(self, u0, direction, theta=None):
        """Coefficients of q -> form'(u0; direction, q), walls zeroed."""
        params = self._fine_params(theta)
        matrix = self.pattern.wrap(self._linearized_data(u0, params))
        return self._zero_walls(matrix @ direction)

    def second_derivative_functional(self, u0, a, b, theta=None):
        """Coefficients of q -> form''(u0; a, b, q), walls zeroed.

        The test function occupies the pairing slot; both ``a`` and ``b``
        are derivative directions.
        """
        params = self._fine_params(theta)
        ug = self.ctx.interpolate(u0)
        ag, bg = self.ctx.interpolate(a), self.ctx.interpolate(b)
        ga, gb, gu = (self.ctx.gradient(f) for f in (a, b, u0))
        dk = self._dk(ug, params.kappa, params.alpha)
        d2k = self._d2k(ug, params.kappa, params.alpha)
        grad_coeff = (dk * ag)[..., None] * gb
        grad_coeff += (dk * bg)[..., None] * ga
        grad_coeff += (d2k * ag * bg)[..., None] * gu
        local = self.ctx.local_grad_load(grad_coeff)
        return self._zero_walls(scatter_vector(self.mesh, local))

    def second_derivative_weighted_functional(self, u0, direction, weight, theta=None):
        """Coefficients of v -> form''(u0; direction, v, weight), walls zeroed.

        Here the test function is the second derivative direction and
        ``weight`` (an adjoint-like field) occupies the pairing slot.
        """
        params = self._fine_params(theta)
        ug = self.ctx.interpolate(u0)
        dg = self.ctx.interpolate(direction)
        gd = self.ctx.gradient(direction)
        gu = self.ctx.gradient(u0)
        gp = self.ctx.gradient(weight)
        dk = self._dk(ug, params.kappa, params.alpha)
        d2k = self._d2k(ug, params.kappa, params.alpha)
        # v-gradient terms and v-value terms, assembled separately.
        grad_coeff = (dk * dg)[..., None] * gp
        val_coeff = dk * np.einsum("egk,egk->eg", gd, gp)
        val_coeff += d2k * dg * np.einsum("egk,egk->eg", gu, gp)
        local = self.ctx.local_grad_load(grad_coeff) + self.ctx.local_load(val_coeff)
        return self._zero_walls(scatter_vector(self.mesh, local))

    def qoi_second_derivative_functional(self, u0, direction):
        """Coefficients of v -> qoi''(u0; direction, v); zero for a linear QoI."""
        return np.zeros(self.mesh.n_nodes)

    def solve_linearized_primal(self, u0, rhs, quad_shift=None, theta=None):
        """Solve form'(u0; e, q) [+ form''(u0; shift, e, q)] = rhs(q) for e."""
        params = self._fine_params(theta)
        data = self._linearized_data(u0, params, quad_shift)
        rhs = rhs.copy()
        self.constraint.apply(data, rhs)
        return solve_linear(SparseSystem(self.pattern.wrap(data), rhs, self.pattern))

    def solve_linearized_adjoint(self, u0, rhs, quad_shift=None, theta=None):
        """Solve form'(u0; v, w) [+ form''(u0; shift, v, w)] = rhs(v) for w."""
        params = self._fine_params(theta)
        data = self._linearized_data(u0, params, quad_shift)
        tdata = data[self.pattern.transpose_map()]
        rhs = rhs.copy()
        self.constraint.apply(tdata, rhs)
        return solve_linear(SparseSystem(self.pattern.wrap(tdata), rhs, self.pattern))

    def qoi_error_estimate(self, theta):
        """QoI of the first-order error field; the calibration workhorse.

        One linearized assembly at the cached coarse solution plus one
        banded solve per call.
        """
        params = self._fine_params(theta)
        cache = self._coarse_data()
        data = self._linearized_data_cached(params, cache)
        k = self._k(cache["u0_gauss"], params.kappa, params.alpha)
        fine_vec = scatter_vector(
            self.mesh, self.ctx.local_grad_load(k[..., None] * cache["grad_u0"])
        )
        rhs = self._zero_walls(self.source_vector - fine_vec)
        self.constraint.apply(data, rhs)
        e = solve_linear(SparseSystem(self.pattern.wrap(data), rhs, self.pattern))
        return float(self.qoi_vector @ e)

    # ------------------------------------------------------------------
    # internals

    def _semilinear_vector(self, u, params):
        """Galerkin vector of the fine form at u: entries fine_form(u; phi_i)."""
        ug = self.ctx.interpolate(u)
        gu = self.ctx.gradient(u)
        k = self._k(ug, params.kappa, params.alpha)
        return scatter_vector(self.mesh, self.ctx.local_grad_load(k[..., None] * gu))

    def _linearized_data(self, u, params, quad_shift=None):
        """CSR data of the linearized operator rows=test, cols=trial."""
        ug = self.ctx.interpolate(u)
        gu = self.ctx.gradient(u)
        k = self._k(ug, params.kappa, params.alpha)
        dk = self._dk(ug, params.kappa, params.alpha)
        local = self.ctx.local_stiffness(k)
        local += self.ctx.local_grad_coupling(dk, gu)
        if quad_shift is not None:
            d2k = self._d2k(ug, params.kappa, params.alpha)
            sg = self.ctx.interpolate(quad_shift)
            gs = self.ctx.gradient(quad_shift)
            local += self.ctx.local_stiffness(dk * sg)
            local += self.ctx.local_grad_coupling(dk, gs)
            local += self.ctx.local_grad_coupling(d2k * sg, gu)
        return self.pattern.csr_data(local)

    def _linearized_data_cached(self, params, cache):
        k = self._k(cache["u0_gauss"], params.kappa, params.alpha)
        dk = self._dk(cache["u0_gauss"], params.kappa, params.alpha)
        local = self.ctx.local_stiffness(k)
        local += self.ctx.local_grad_coupling(dk, cache["grad_u0"])
        return self.pattern.csr_data(local)

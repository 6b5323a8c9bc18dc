"""Tumor model pair: Allen-Cahn growth refined against reaction-diffusion.

Both models track a tumor volume fraction on the unit square over t in
[0, t_final], starting from the nodal indicator of a seeded disc, with
homogeneous Neumann walls and the static nutrient field ``exp(-1.5 x)``.
The coarse model is linear reaction-diffusion (growth ``lambda_p0 * f``,
death ``lambda_d0``, diffusivity ``D``). The fine model is an Allen-Cahn
equation with double-well energy ``C u^2 (1-u)^2``, interface coefficient
``epsilon``, logistic proliferation ``lambda_p u (1-u) f``, and death
``lambda_d u``; its parameters ``theta = (lambda_p, lambda_d, epsilon, C)``
are the calibration unknowns.

Time stepping is backward Euler with the nonlinear terms fully implicit
(Newton per step). The quantity of interest is the final-time volume
average plus time averages of the volume average over short observation
windows; the adjoint is the discrete dual of the marching scheme, so the
linear coarse model satisfies the primal/dual QoI identity to solver
tolerance.

States are :class:`Trajectory` stacks (one nodal field per time node) and
the functional coefficients consumed by the error machinery are plain
``(n_steps + 1, n_nodes)`` arrays, one weight vector per time node.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from .fem import (
    NewtonError,
    SolverError,
    SparseSystem,
    newton_solve,
    quadrature_context,
    scatter_pattern,
    scatter_vector,
)
from .mesh import Field, StructuredMesh, field_to_csv

SEED_CENTER = (0.5, 0.5)
SEED_RADIUS = 0.2821
DEFAULT_OBSERVATION_TIMES = (0.2, 0.4, 0.6, 0.8)
DEFAULT_WINDOW_WIDTH = 0.05


def nutrient(x, y, t=0.0):
    """Nutrient availability ``exp(-1.5 x)``: flat across y and frozen in time."""
    return np.exp(-1.5 * x) * np.ones_like(np.asarray(y, dtype=float))


def initial_condition(mesh):
    """Nodal indicator of the seeded tumor disc: 1 strictly inside, else 0.

    No smoothing is applied; the staircase boundary is part of the model
    definition and the disc area keeps the initial volume near 0.25.
    """
    dist = np.hypot(
        mesh.node_coords[:, 0] - SEED_CENTER[0],
        mesh.node_coords[:, 1] - SEED_CENTER[1],
    )
    return Field(mesh, np.where(dist < SEED_RADIUS, 1.0, 0.0))


def double_well_slope(u, scale):
    """First derivative of the well ``scale * u^2 (1-u)^2``."""
    return 2.0 * scale * u * (1.0 - u) * (1.0 - 2.0 * u)


def double_well_curvature(u, scale):
    """Second derivative of the double well."""
    return 2.0 * scale * (1.0 - 6.0 * u + 6.0 * u * u)


def double_well_third(u, scale):
    """Third derivative of the double well (linear in u)."""
    return scale * (24.0 * u - 12.0)


@dataclass(frozen=True)
class TumorFineParams:
    """Fine-model parameters ``theta = (lambda_p, lambda_d, epsilon, C)``.

    lambda_p and lambda_d are proliferation and death rates (1/time),
    epsilon scales the interface (gradient) energy, and C the double-well
    energy barrier.
    """

    lambda_p: float
    lambda_d: float
    epsilon: float
    C: float

    def __post_init__(self):
        for name in ("lambda_p", "lambda_d", "epsilon", "C"):
            value = getattr(self, name)
            if not (value > 0.0):
                raise ValueError(f"{name} must be positive, got {value}")

    def as_array(self):
        return np.array([self.lambda_p, self.lambda_d, self.epsilon, self.C])


@dataclass(frozen=True)
class TumorCoarseParams:
    """Coarse-model rates and diffusivity (all strictly positive)."""

    lambda_p0: float = 0.2
    lambda_d0: float = 0.1
    D: float = 0.05

    def __post_init__(self):
        for name in ("lambda_p0", "lambda_d0", "D"):
            value = getattr(self, name)
            if not (value > 0.0):
                raise ValueError(f"{name} must be positive, got {value}")


@dataclass
class Trajectory:
    """Backward-Euler state history: one nodal field per time node.

    ``values`` has shape (n_steps + 1, n_nodes); row k holds the state at
    time ``k * dt``. Supports the affine arithmetic the error machinery
    applies to states (sum, difference, scalar scaling).
    """

    mesh: StructuredMesh
    values: np.ndarray
    dt: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.mesh.n_nodes:
            raise ValueError(
                f"trajectory values have shape {self.values.shape}, expected "
                f"(n_time_nodes, {self.mesh.n_nodes})"
            )
        self.dt = float(self.dt)
        if not (self.dt > 0.0):
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def n_steps(self):
        return self.values.shape[0] - 1

    @property
    def t_final(self):
        return self.dt * self.n_steps

    @property
    def times(self):
        return self.dt * np.arange(self.values.shape[0])

    def field(self, step):
        """Snapshot at time node ``step`` as a :class:`Field`."""
        return Field(self.mesh, self.values[int(step)].copy())

    def copy(self):
        return Trajectory(self.mesh, self.values.copy(), self.dt)

    def _coerce(self, other):
        values = np.asarray(getattr(other, "values", other), dtype=float)
        if isinstance(other, Trajectory) and abs(other.dt - self.dt) > 1e-12 * self.dt:
            raise ValueError(f"time steps differ: {self.dt} vs {other.dt}")
        if values.shape != self.values.shape:
            raise ValueError(
                f"trajectory shapes differ: {self.values.shape} vs {values.shape}"
            )
        return values

    def __add__(self, other):
        return Trajectory(self.mesh, self.values + self._coerce(other), self.dt)

    def __sub__(self, other):
        return Trajectory(self.mesh, self.values - self._coerce(other), self.dt)

    def __mul__(self, scalar):
        return Trajectory(self.mesh, self.values * float(scalar), self.dt)

    __rmul__ = __mul__


@dataclass(frozen=True)
class QoISpec:
    """Final-time volume average plus windowed time averages.

    The scalar read off a trajectory is ``qbar * integral(u(t_final))``
    plus, per observation time tau, the time average over
    ``(tau, tau + window_width]`` of the volume average of the state. The
    window integral uses the same end-of-step rectangle rule as the
    marching scheme, so every window must cover a whole number of steps.
    ``qbar_weight=None`` resolves to 1/area, the volume average.
    """

    observation_times: tuple = DEFAULT_OBSERVATION_TIMES
    window_width: float = DEFAULT_WINDOW_WIDTH
    qbar_weight: float = None

    def __post_init__(self):
        object.__setattr__(
            self, "observation_times", tuple(float(t) for t in self.observation_times)
        )
        if not (self.window_width > 0.0):
            raise ValueError(f"window width must be positive, got {self.window_width}")
        if any(t < 0.0 for t in self.observation_times):
            raise ValueError("observation times must be nonnegative")

    @property
    def n_observations(self):
        return len(self.observation_times)

    def step_weights(self, dt, n_steps, area=1.0):
        """Per-step weights w with ``qoi(U) = sum_n w[n] * integral(u^n)``.

        Raises
        ------
        ValueError
            If a window does not align with the time grid or leaves
            ``[0, n_steps * dt]``.
        """
        weights = np.zeros(n_steps + 1)
        qbar = (1.0 / area) if self.qbar_weight is None else float(self.qbar_weight)
        weights[n_steps] += qbar
        span = self.window_width / dt
        if abs(span - round(span)) > 1e-6:
            raise ValueError(
                f"window width {self.window_width} is not a whole number of "
                f"steps of dt={dt}"
            )
        span = int(round(span))
        for tau in self.observation_times:
            start = tau / dt
            if abs(start - round(start)) > 1e-6:
                raise ValueError(
                    f"observation time {tau} is off the time grid (dt={dt})"
                )
            first = int(round(start)) + 1
            last = int(round(start)) + span
            if last > n_steps:
                raise ValueError(
                    f"window ({tau}, {tau + self.window_width}] ends past "
                    f"t_final={dt * n_steps}"
                )
            weights[first : last + 1] += dt / (self.window_width * area)
        return weights


class TumorModelPair:
    """Coarse/fine tumor pair with space-time adjoint and error solvers.

    Mirrors the duck-typed surface of the elliptic pair, with trajectories
    in place of single fields. The coarse trajectory and its adjoint are
    cached after the first request; ``qoi_error_estimate`` additionally
    caches everything parameter-independent (the residual pieces and the
    per-step operator data are affine in theta), which makes repeated
    estimates the calibration loop's cheap inner kernel.

    Instances are not thread-safe (a band-storage buffer is reused across
    solves); concurrent parameter sweeps should build one pair per worker.
    """

    def __init__(self, mesh: StructuredMesh, coarse=None, fine=None, qoi_spec=None,
                 dt=0.005, t_final=1.0, source=nutrient, initial_state=None):
        self.mesh = mesh
        self.coarse = coarse if coarse is not None else TumorCoarseParams()
        self.fine = fine
        self.qoi_spec = qoi_spec if qoi_spec is not None else QoISpec()

        ratio = float(t_final) / float(dt)
        self.n_steps = int(round(ratio))
        if self.n_steps < 1 or abs(ratio - self.n_steps) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"dt={dt} must divide t_final={t_final} into whole steps")
        self.dt = float(dt)
        self.t_final = float(t_final)

        self.ctx = quadrature_context(mesh)
        self.pattern = scatter_pattern(mesh)
        pts = self.ctx.points
        self._f_gauss = source(pts[..., 0], pts[..., 1])
        self._mass_data = self.pattern.csr_data(self.ctx.local_mass(1.0))
        self._stiff_data = self.pattern.csr_data(self.ctx.local_stiffness(1.0))
        self._mass = self.pattern.wrap(self._mass_data)
        self._stiff = self.pattern.wrap(self._stiff_data)
        self.qoi_vector = scatter_vector(mesh, self.ctx.local_load(1.0))
        if initial_state is None:
            self.initial_values = initial_condition(mesh).values
        else:
            values = np.asarray(getattr(initial_state, "values", initial_state), float)
            if values.shape != (mesh.n_nodes,):
                raise ValueError(
                    f"initial state has shape {values.shape}, expected ({mesh.n_nodes},)"
                )
            self.initial_values = values.copy()
        # Validates window alignment against this time grid at construction.
        self.qoi_weights = self.qoi_spec.step_weights(self.dt, self.n_steps, mesh.area)

        # Upper-triangle band scatter for the SPD step matrices.
        n = mesh.n_nodes
        rows = np.repeat(np.arange(n), np.diff(self.pattern.indptr))
        cols = self.pattern.indices.astype(np.int64)
        keep = rows <= cols
        ku = self.pattern.bandwidth
        self._band_take = np.nonzero(keep)[0]
        self._band_flat = (ku + rows[keep] - cols[keep]) * n + cols[keep]
        self._band_buffer = np.zeros((ku + 1) * n)

        self._mass_factor = None
        self._coarse_cache = None
        self._hot_cache = None

    # ------------------------------------------------------------------
    # plumbing

    def with_fine_params(self, fine):
        """Shallow copy sharing mesh and caches, new fine parameters."""
        if not isinstance(fine, TumorFineParams):
            fine = self.params_from_array(fine)
        clone = object.__new__(TumorModelPair)
        clone.__dict__ = dict(self.__dict__)
        clone.fine = fine
        return clone

    @property
    def theta_dim(self):
        return 4

    def params_from_array(self, theta):
        theta = np.asarray(theta, dtype=float)
        return TumorFineParams(
            lambda_p=theta[0], lambda_d=theta[1], epsilon=theta[2], C=theta[3]
        )

    def _fine_params(self, theta=None):
        params = self.fine if theta is None else theta
        if params is None:
            raise ValueError("no fine parameters configured on this pair")
        if not isinstance(params, TumorFineParams):
            params = self.params_from_array(params)
        return params

    def _trajectory_values(self, state):
        values = np.asarray(getattr(state, "values", state), dtype=float)
        expected = (self.n_steps + 1, self.mesh.n_nodes)
        if values.shape != expected:
            raise ValueError(f"trajectory has shape {values.shape}, expected {expected}")
        return values

    def _wrap(self, values):
        return Trajectory(self.mesh, values, self.dt)

    # ------------------------------------------------------------------
    # banded solves

    def _band_upper(self, data):
        """Upper band storage of a pattern-shaped CSR data vector (shared buffer)."""
        ab = self._band_buffer
        ab.fill(0.0)
        ab[self._band_flat] = data[self._band_take]
        return ab.reshape(self.pattern.bandwidth + 1, self.mesh.n_nodes)

    def _step_solve(self, data, rhs, step, rtol=1e-11):
        """Cholesky band solve of one implicit step, residual-checked."""
        ab = self._band_upper(data)
        try:
            x = scipy.linalg.solveh_banded(ab, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError(
                f"implicit step {step}: operator is not positive definite ({exc})"
            ) from exc
        matrix = self.pattern.wrap(data)
        scale = max(float(np.linalg.norm(rhs)), 1e-300)
        gap = float(np.linalg.norm(rhs - matrix @ x)) / scale
        if gap > rtol:
            x = x + scipy.linalg.solveh_banded(ab, rhs - matrix @ x)
            gap = float(np.linalg.norm(rhs - matrix @ x)) / scale
        if not np.isfinite(gap) or gap > rtol:
            raise SolverError(
                f"implicit step {step}: solve residual {gap:.3e} exceeds {rtol:.1e}",
                residual=gap,
            )
        return x

    def _mass_solve(self, rhs):
        if self._mass_factor is None:
            self._mass_factor = scipy.linalg.cholesky_banded(
                self._band_upper(self._mass_data)
            )
        return scipy.linalg.cho_solve_banded((self._mass_factor, False), rhs)

    # ------------------------------------------------------------------
    # reaction coefficients at quadrature points

    def _reaction_value(self, ug, params):
        """Reaction terms of the fine model (moved to the left-hand side)."""
        return (
            double_well_slope(ug, params.C)
            - params.lambda_p * ug * (1.0 - ug) * self._f_gauss
            + params.lambda_d * ug
        )

    def _reaction_slope(self, ug, params):
        """State derivative of the fine reaction terms."""
        return (
            double_well_curvature(ug, params.C)
            - params.lambda_p * (1.0 - 2.0 * ug) * self._f_gauss
            + params.lambda_d
        )

    def _reaction_curvature(self, ug, params):
        """Second state derivative of the fine reaction terms."""
        return double_well_third(ug, params.C) + 2.0 * params.lambda_p * self._f_gauss

    def _fine_rate_vector(self, x, params):
        """Assembled spatial operator of the fine model at nodal state ``x``."""
        xg = self.ctx.interpolate(x)
        load = self.ctx.local_load(self._reaction_value(xg, params))
        return params.epsilon * (self._stiff @ x) + scatter_vector(self.mesh, load)

    def _linearized_rate_vector(self, u_values, x, params):
        """Fine operator linearized at ``u_values`` applied to ``x``."""
        ug = self.ctx.interpolate(u_values)
        coeff = self._reaction_slope(ug, params) * self.ctx.interpolate(x)
        load = self.ctx.local_load(coeff)
        return params.epsilon * (self._stiff @ x) + scatter_vector(self.mesh, load)

    def _step_data(self, state_values, params, shift_values=None):
        """CSR data of the implicit step operator ``M + dt (eps K + reaction)``.

        ``shift_values`` adds the curvature mass evaluated along a given
        nodal field, turning the first-order operator into the Jacobian of
        the quadratic error problem.
        """
        ug = self.ctx.interpolate(state_values)
        coeff = self._reaction_slope(ug, params)
        if shift_values is not None:
            coeff = coeff + self._reaction_curvature(ug, params) * self.ctx.interpolate(
                shift_values
            )
        local = self.ctx.local_mass(self.dt * coeff)
        return (
            self._mass_data
            + self.dt * params.epsilon * self._stiff_data
            + self.pattern.csr_data(local)
        )

    # ------------------------------------------------------------------
    # forward / adjoint solves

    def _coarse_operator(self):
        """CSR data of the constant coarse step matrix."""
        w0 = self.coarse.lambda_d0 - self.coarse.lambda_p0 * self._f_gauss
        local = self.ctx.local_mass(self.dt * w0)
        return (
            self._mass_data
            + self.dt * self.coarse.D * self._stiff_data
            + self.pattern.csr_data(local)
        )

    def _coarse_data(self):
        if self._coarse_cache is None:
            data = self._coarse_operator()
            try:
                factor = scipy.linalg.cholesky_banded(self._band_upper(data))
            except np.linalg.LinAlgError as exc:
                raise SolverError(
                    f"coarse step operator is not positive definite ({exc})"
                ) from exc
            matrix = self.pattern.wrap(data)

            def checked_solve(rhs, step, rtol=1e-11):
                x = scipy.linalg.cho_solve_banded((factor, False), rhs)
                scale = max(float(np.linalg.norm(rhs)), 1e-300)
                gap = float(np.linalg.norm(rhs - matrix @ x)) / scale
                if gap > rtol:
                    x = x + scipy.linalg.cho_solve_banded((factor, False), rhs - matrix @ x)
                    gap = float(np.linalg.norm(rhs - matrix @ x)) / scale
                if not np.isfinite(gap) or gap > rtol:
                    raise SolverError(
                        f"coarse march step {step}: solve residual {gap:.3e}",
                        residual=gap,
                    )
                return x

            forward = np.empty((self.n_steps + 1, self.mesh.n_nodes))
            forward[0] = self.initial_values
            for step in range(1, self.n_steps + 1):
                forward[step] = checked_solve(self._mass @ forward[step - 1], step)

            weights = self.qoi_weights
            dual = np.empty_like(forward)
            dual[self.n_steps] = checked_solve(
                weights[self.n_steps] * self.qoi_vector, self.n_steps
            )
            for step in range(self.n_steps - 1, 0, -1):
                dual[step] = checked_solve(
                    self._mass @ dual[step + 1] + weights[step] * self.qoi_vector, step
                )
            dual[0] = dual[1]
            self._coarse_cache = {"u0": forward, "p0": dual}
        return self._coarse_cache

    def solve_coarse_forward(self):
        """Coarse trajectory (cached); one Cholesky, one solve per step."""
        return self._wrap(self._coarse_data()["u0"].copy())

    def solve_coarse_adjoint(self, u0=None):
        """Discrete dual of the coarse march weighting the QoI (cached)."""
        return self._wrap(self._coarse_data()["p0"].copy())

    def solve_fine_forward(self, theta=None, return_info=False):
        """March the fine model with one Newton solve per implicit step.

        Raises
        ------
        NewtonError
            On per-step nonconvergence, with the step index in the message
            and the residual history attached.
        SolverError
            If the state leaves the trust window [-0.1, 1.1] nodally.
        """
        params = self._fine_params(theta)
        values = np.empty((self.n_steps + 1, self.mesh.n_nodes))
        values[0] = self.initial_values
        infos = []
        for step in range(1, self.n_steps + 1):
            prev = values[step - 1]

            def residual_vec(x, prev=prev):
                return self._mass @ (x - prev) + self.dt * self._fine_rate_vector(x, params)

            def jacobian(x):
                data = self._step_data(x, params)
                return SparseSystem(self.pattern.wrap(data), None, self.pattern)

            try:
                result = newton_solve(residual_vec, jacobian, prev)
            except NewtonError as exc:
                raise NewtonError(
                    f"fine march step {step} (t={step * self.dt:.6g}): {exc}",
                    residual=exc.residual,
                    history=exc.history,
                ) from exc
            low, high = float(result.x.min()), float(result.x.max())
            if low < -0.1 or high > 1.1:
                raise SolverError(
                    f"fine state left [-0.1, 1.1] at step {step}: "
                    f"range [{low:.4g}, {high:.4g}]"
                )
            values[step] = result.x
            infos.append(result)
        trajectory = self._wrap(values)
        return (trajectory, infos) if return_info else trajectory

    def solve_fine_adjoint(self, u, theta=None):
        """Backward march of the fine linearization against the QoI weights."""
        return self.solve_linearized_adjoint(u, self._qoi_functional(), theta=theta)

    # ------------------------------------------------------------------
    # forms and functionals (states are trajectories)

    def semilinear_form(self, u, v, theta=None):
        """Space-time form of the fine model paired with test trajectory ``v``."""
        params = self._fine_params(theta)
        U = self._trajectory_values(u)
        V = self._trajectory_values(v)
        total = float((self._mass @ U[0]) @ V[0])
        for n in range(1, self.n_steps + 1):
            total += float((self._mass @ (U[n] - U[n - 1])) @ V[n])
            total += self.dt * float(self._fine_rate_vector(U[n], params) @ V[n])
        return total

    def coarse_form(self, u, v):
        """Space-time form of the coarse model."""
        U = self._trajectory_values(u)
        V = self._trajectory_values(v)
        step_matrix = self.pattern.wrap(self._coarse_operator())
        total = float((self._mass @ U[0]) @ V[0])
        for n in range(1, self.n_steps + 1):
            total += float((step_matrix @ U[n] - self._mass @ U[n - 1]) @ V[n])
        return total

    def form_derivative(self, u, w, v, theta=None):
        """Directional derivative of the fine form at ``u`` in direction ``w``."""
        params = self._fine_params(theta)
        U = self._trajectory_values(u)
        W = self._trajectory_values(w)
        V = self._trajectory_values(v)
        total = float((self._mass @ W[0]) @ V[0])
        for n in range(1, self.n_steps + 1):
            total += float((self._mass @ (W[n] - W[n - 1])) @ V[n])
            total += self.dt * float(
                self._linearized_rate_vector(U[n], W[n], params) @ V[n]
            )
        return total

    def form_second_derivative(self, u, q, w, v, theta=None):
        """Second directional derivative in ``(q, w)``, paired with ``v``.

        Only the reaction terms curve, so this is a weighted space-time
        mass pairing of the three trajectories; it is symmetric in all of
        ``q``, ``w``, ``v``.
        """
        params = self._fine_params(theta)
        U = self._trajectory_values(u)
        Q = self._trajectory_values(q)
        W = self._trajectory_values(w)
        V = self._trajectory_values(v)
        total = 0.0
        for n in range(1, self.n_steps + 1):
            ug = self.ctx.interpolate(U[n])
            product = (
                self._reaction_curvature(ug, params)
                * self.ctx.interpolate(Q[n])
                * self.ctx.interpolate(W[n])
                * self.ctx.interpolate(V[n])
            )
            total += self.dt * self.ctx.integrate(product)
        return total

    def source_functional(self, v):
        """Initial-state pairing, the only data term of either model."""
        V = self._trajectory_values(v)
        return float((self._mass @ self.initial_values) @ V[0])

    def qoi(self, u):
        """Final volume average plus windowed time averages of it."""
        U = self._trajectory_values(u)
        return float(self.qoi_weights @ (U @ self.qoi_vector))

    def qoi_derivative(self, u, v):
        return self.qoi(v)

    def qoi_second_derivative(self, u, q, v):
        return 0.0

    # ------------------------------------------------------------------
    # residual functionals and linearized solves (error machinery hooks)

    def _qoi_functional(self):
        """Per-step coefficient vectors of the QoI functional."""
        return np.outer(self.qoi_weights, self.qoi_vector)

    def residual_functional(self, u0, theta=None):
        """Coefficients of q -> source(q) - fine_form(u0; q), per time node."""
        params = self._fine_params(theta)
        U = self._trajectory_values(u0)
        out = np.empty_like(U)
        out[0] = self._mass @ (self.initial_values - U[0])
        for n in range(1, self.n_steps + 1):
            out[n] = -(
                self._mass @ (U[n] - U[n - 1])
                + self.dt * self._fine_rate_vector(U[n], params)
            )
        return out

    def adjoint_residual_functional(self, u0, p0, theta=None):
        """Coefficients of v -> qoi'(u0; v) - fine_form'(u0; v, p0)."""
        params = self._fine_params(theta)
        U = self._trajectory_values(u0)
        P = self._trajectory_values(p0)
        out = self._qoi_functional()
        out[0] -= self._mass @ (P[0] - P[1])
        for n in range(1, self.n_steps + 1):
            drift = P[n] - P[n + 1] if n < self.n_steps else P[n]
            out[n] -= (
                self._mass @ drift
                + self.dt * self._linearized_rate_vector(U[n], P[n], params)
            )
        return out

    def linearized_apply(self, u0, direction, theta=None):
        """Coefficients of q -> fine_form'(u0; direction, q), per time node."""
        params = self._fine_params(theta)
        U = self._trajectory_values(u0)
        V = self._trajectory_values(direction)
        out = np.empty_like(V)
        out[0] = self._mass @ V[0]
        for n in range(1, self.n_steps + 1):
            step_matrix = self.pattern.wrap(self._step_data(U[n], params))
            out[n] = step_matrix @ V[n] - self._mass @ V[n - 1]
        return out

    def second_derivative_functional(self, u0, a, b, theta=None):
        """Coefficients of q -> fine_form''(u0; a, b, q), per time node."""
        params = self._fine_params(theta)
        U = self._trajectory_values(u0)
        A = self._trajectory_values(a)
        B = self._trajectory_values(b)
        out = np.zeros_like(U)
        for n in range(1, self.n_steps + 1):
            ug = self.ctx.interpolate(U[n])
            coeff = (
                self._reaction_curvature(ug, params)
                * self.ctx.interpolate(A[n])
                * self.ctx.interpolate(B[n])
            )
            out[n] = self.dt * scatter_vector(self.mesh, self.ctx.local_load(coeff))
        return out

    def second_derivative_weighted_functional(self, u0, direction, weight, theta=None):
        """Coefficients of v -> fine_form''(u0; direction, v, weight).

        The curvature pairing multiplies all three non-state slots, so the
        weighted variant coincides with :meth:`second_derivative_functional`
        applied to (direction, weight).
        """
        return self.second_derivative_functional(u0, direction, weight, theta)

    def qoi_second_derivative_functional(self, u0, direction):
        """Zero: the QoI is linear in the state."""
        return np.zeros((self.n_steps + 1, self.mesh.n_nodes))

    def solve_linearized_primal(self, u0, rhs, quad_shift=None, theta=None):
        """March the fine linearization at ``u0`` forward against ``rhs``.

        ``rhs`` holds one coefficient vector per time node (as produced by
        the residual functionals). ``quad_shift`` adds the curvature mass
        along the given trajectory, making this one Newton step of the
        quadratic error problem.
        """
        params = self._fine_params(theta)
        U = self._trajectory_values(u0)
        R = np.asarray(getattr(rhs, "values", rhs), dtype=float)
        S = None if quad_shift is None else self._trajectory_values(quad_shift)
        out = np.empty_like(R)
        out[0] = self._mass_solve(R[0])
        for n in range(1, self.n_steps + 1):
            shift = None if S is None else S[n]
            data = self._step_data(U[n], params, shift)
            out[n] = self._step_solve(data, self._mass @ out[n - 1] + R[n], n)
        return self._wrap(out)

    def solve_linearized_adjoint(self, u0, rhs, quad_shift=None, theta=None):
        """March the transposed linearization backward against ``rhs``.

        Every step operator here is symmetric, so "transposed" only
        reverses the time coupling: the terminal block is solved first and
        the time-difference pairing hands each solution to the next-older
        step.
        """
        params = self._fine_params(theta)
        U = self._trajectory_values(u0)
        R = np.asarray(getattr(rhs, "values", rhs), dtype=float)
        S = None if quad_shift is None else self._trajectory_values(quad_shift)
        out = np.empty_like(R)
        last = self.n_steps
        for n in range(last, 0, -1):
            shift = None if S is None else S[n]
            data = self._step_data(U[n], params, shift)
            drag = 0.0 if n == last else self._mass @ out[n + 1]
            out[n] = self._step_solve(data, drag + R[n], n)
        out[0] = out[1] + self._mass_solve(R[0])
        return self._wrap(out)

    # ------------------------------------------------------------------
    # calibration hot path

    def _hot_data(self):
        """Parameter-independent pieces of the first-order error march.

        The residual splits into a constant part plus one vector per fine
        parameter, and the step operator data into mass/stiffness plus one
        reaction-mass data vector per nonlinear coefficient; everything is
        computed once from the cached coarse trajectory.
        """
        if self._hot_cache is None:
            U = self._coarse_data()["u0"]
            shape = (self.n_steps + 1, self.mesh.n_nodes)
            drift = np.zeros(shape)
            diffusion = np.zeros(shape)
            well = np.zeros(shape)
            growth = np.zeros(shape)
            decay = np.zeros(shape)
            well_data = np.zeros((self.n_steps + 1, self.pattern.nnz))
            growth_data = np.zeros_like(well_data)
            for n in range(1, self.n_steps + 1):
                ug = self.ctx.interpolate(U[n])
                drift[n] = -(self._mass @ (U[n] - U[n - 1]))
                diffusion[n] = -self.dt * (self._stiff @ U[n])
                well[n] = -self.dt * scatter_vector(
                    self.mesh, self.ctx.local_load(double_well_slope(ug, 1.0))
                )
                growth[n] = self.dt * scatter_vector(
                    self.mesh,
                    self.ctx.local_load(ug * (1.0 - ug) * self._f_gauss),
                )
                decay[n] = -self.dt * (self._mass @ U[n])
                well_data[n] = self.pattern.csr_data(
                    self.ctx.local_mass(double_well_curvature(ug, 1.0))
                )
                growth_data[n] = self.pattern.csr_data(
                    self.ctx.local_mass(-(1.0 - 2.0 * ug) * self._f_gauss)
                )
            self._hot_cache = {
                "drift": drift,
                "diffusion": diffusion,
                "well": well,
                "growth": growth,
                "decay": decay,
                "well_data": well_data,
                "growth_data": growth_data,
            }
        return self._hot_cache

    def qoi_error_estimate(self, theta):
        """QoI of the first-order error trajectory; the calibration workhorse.

        Equivalent to solving the linearized error march against the fine
        residual at the coarse trajectory and reading the QoI, but with all
        parameter-independent assembly hoisted out (the first call pays for
        the cache). Cost per call is one banded Cholesky solve per step.
        """
        params = self._fine_params(theta)
        hot = self._hot_data()
        lam_p, lam_d = params.lambda_p, params.lambda_d
        base = (1.0 + self.dt * lam_d) * self._mass_data + (
            self.dt * params.epsilon
        ) * self._stiff_data
        rhs = (
            hot["drift"]
            + params.epsilon * hot["diffusion"]
            + params.C * hot["well"]
            + lam_p * hot["growth"]
            + lam_d * hot["decay"]
        )
        weights = self.qoi_weights
        # The models share the initial state, so the error starts at zero.
        error = np.zeros(self.mesh.n_nodes)
        total = 0.0
        for n in range(1, self.n_steps + 1):
            data = base + self.dt * (
                params.C * hot["well_data"][n] + lam_p * hot["growth_data"][n]
            )
            error = self._step_solve(data, self._mass @ error + rhs[n], n)
            if weights[n] != 0.0:
                total += weights[n] * float(self.qoi_vector @ error)
        return total


def export_trajectory(trajectory, directory, steps=None, qoi_spec=None, prefix="state"):
    """Write trajectory snapshots as field CSVs plus a JSON manifest.

    One ``<prefix>_step_<k>.csv`` per requested time index (in the nodal
    field CSV format) and ``<prefix>_manifest.json`` recording the time
    grid, the QoI description when given, and the snapshot files. Returns
    the manifest path.
    """
    if steps is None:
        steps = range(trajectory.n_steps + 1)
    os.makedirs(directory, exist_ok=True)
    snapshots = {}
    for step in steps:
        step = int(step)
        if not (0 <= step <= trajectory.n_steps):
            raise ValueError(
                f"step {step} outside the trajectory (0..{trajectory.n_steps})"
            )
        name = f"{prefix}_step_{step:04d}.csv"
        field_to_csv(trajectory.field(step), os.path.join(directory, name))
        snapshots[str(step)] = name
    manifest = {
        "dt": trajectory.dt,
        "n_steps": trajectory.n_steps,
        "qoi_spec": None if qoi_spec is None else asdict(qoi_spec),
        "snapshots": snapshots,
    }
    path = os.path.join(directory, f"{prefix}_manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, indent=2) + "\n")
    return path

"""Time integration of the coupled macroscopic model.

Per step: radius update (Heun) -> coefficient lookup -> Darcy solve -> implicit
Euler transport step.  All macroscopic fields are continuous P1 on a triangular
mesh of the rectangle; the Darcy velocity is elementwise constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell_problems import CoefficientTable, interpolate
from .fem.elements import ElementGeometry
from .fem.mesh import EdgeTag, PeriodicMesh
from .fem.solve import DEFAULT_TOL, SolverError, relative_residual
from .geometry import porosity_of_radius
from .physics import PhysicsFunctions, SurfaceRate


class SimulationError(RuntimeError):
    """A sub-step failed; carries the step index and the last good state."""

    def __init__(self, message, step=None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state


@dataclass(frozen=True)
class MacroState:
    """Nodal ``u0, R0, p0, theta, dtheta_dt`` and the elementwise Darcy velocity."""

    time: float
    u0: np.ndarray
    R0: np.ndarray
    p0: np.ndarray
    vstar: np.ndarray
    theta: np.ndarray
    dtheta_dt: np.ndarray


# ---------------------------------------------------------------------------
# coefficient providers


class TableCoefficients:
    """Coefficients looked up in a :class:`CoefficientTable`."""

    def __init__(self, table: CoefficientTable):
        self.table = table
        self.R_min = table.config.R_min
        self.R_max = table.config.R_max

    def __call__(self, R):
        return interpolate(self.table, R)


class AnalyticCoefficients:
    """Closed-form ``d(R)``, ``k(R)`` (used by manufactured-solution tests)."""

    def __init__(self, dstar, kstar, R_min, R_max):
        self.dstar, self.kstar = dstar, kstar
        self.R_min, self.R_max = R_min, R_max

    def __call__(self, R):
        R = np.asarray(R, dtype=float)
        if np.any(R < self.R_min - 1e-12) or np.any(R > self.R_max + 1e-12):
            raise ValueError("radius outside the coefficient range")
        theta, dtheta = porosity_of_radius(R)
        return theta, self.dstar(R), self.kstar(R), dtheta


# ---------------------------------------------------------------------------
# discretisation


@dataclass(frozen=True)
class MacroDiscretization:
    """Cached P1 geometry of a macro mesh."""

    mesh: PeriodicMesh

    @cached_property
    def geom(self):
        return ElementGeometry(self.mesh)

    @cached_property
    def area(self):
        return np.abs(self.geom.det) / 2.0

    @cached_property
    def grads(self):
        return self.geom.p1_gradients  # (M, 3, 2)

    @cached_property
    def lumped(self):
        m = np.zeros(self.mesh.n_nodes)
        np.add.at(m, self.mesh.elements, np.repeat(self.area[:, None] / 3.0, 3, axis=1))
        return m

    @cached_property
    def mass(self):
        el = self.mesh.elements
        local = (np.ones((3, 3)) + np.eye(3))[None] * (self.area / 12.0)[:, None, None]
        return _assemble(el, local, self.mesh.n_nodes)

    @cached_property
    def boundary(self):
        b = np.zeros(self.mesh.n_nodes, dtype=bool)
        b[self.mesh.tagged_nodes(EdgeTag.OUTER)] = True
        return b

    @cached_property
    def interior(self):
        return np.nonzero(~self.boundary)[0]

    @cached_property
    def centroids(self):
        return self.geom.centroids

    def at_centroids(self, nodal):
        return np.asarray(nodal)[self.mesh.elements].mean(axis=1)

    def gradient(self, nodal):
        """Elementwise gradient of a P1 field, ``(M, 2)``."""
        return np.einsum("mai,ma->mi", self.grads, np.asarray(nodal)[self.mesh.elements])

    def stiffness(self, coeff_elem):
        local = np.einsum("m,mai,mbi->mab", coeff_elem * self.area, self.grads, self.grads)
        return _assemble(self.mesh.elements, local, self.mesh.n_nodes)

    def advection(self, v_elem):
        """``C[i, j] = -int phi_j v . grad(phi_i)`` for elementwise constant ``v``."""
        vg = np.einsum("mi,mai->ma", v_elem, self.grads)  # v . grad(phi_a)
        local = -(self.area / 3.0)[:, None, None] * vg[:, :, None] * np.ones((1, 1, 3))
        C = _assemble(self.mesh.elements, local, self.mesh.n_nodes)
        C.eliminate_zeros()
        return C

    def grad_load(self, w_elem):
        """``b[i] = int w . grad(phi_i)`` for elementwise constant ``w``."""
        local = np.einsum("m,mi,mai->ma", self.area, w_elem, self.grads)
        out = np.zeros(self.mesh.n_nodes)
        np.add.at(out, self.mesh.elements, local)
        return out

    def quad_load(self, values_q):
        """``b[i] = int s phi_i`` with ``s`` given at the quadrature points."""
        from .fem.elements import QUAD_POINTS, p1_values

        phi = p1_values(QUAD_POINTS)  # (nq, 3)
        local = np.einsum("mq,mq,qa->ma", self.geom.weights, values_q, phi)
        out = np.zeros(self.mesh.n_nodes)
        np.add.at(out, self.mesh.elements, local)
        return out

    def l2_error(self, nodal, exact_q):
        from .fem.elements import QUAD_POINTS, p1_values

        uh = np.asarray(nodal)[self.mesh.elements] @ p1_values(QUAD_POINTS).T
        return float(np.sqrt(np.sum(self.geom.weights * (uh - exact_q) ** 2)))


def _assemble(cells, local, n):
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _solve_interior(A, b, interior, tol):
    """Solve ``A[I, I] x_I = b_I`` with zero boundary values; returns ``(x_I, residual)``."""
    Aii = A[interior][:, interior].tocsc()
    bi = b[interior]
    if not np.any(bi):
        return np.zeros_like(bi), 0.0
    try:
        lu = spla.splu(Aii, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SolverError(f"factorisation failed: {exc}") from exc
    x = lu.solve(bi)
    res = relative_residual(Aii, x, bi)
    if res > tol:
        x = x + lu.solve(bi - Aii @ x)
        res = relative_residual(Aii, x, bi)
    if not res <= tol:
        raise SolverError(f"relative residual {res:.3e} above tolerance {tol:.1e}", res)
    return x, res


# ---------------------------------------------------------------------------
# sub-steps


def step_radius(state: MacroState, dt: float, g: SurfaceRate, R_min: float, R_max: float):
    """Heun update of ``dR/dt = g(u0, R)`` at every node (``u0`` frozen over the step).

    Returns ``(R, theta, dtheta_dt, clamps)``.  A result outside ``[R_min, R_max]``
    is clamped (and counted) when the overshoot is at most ``dt * C_g``; a
    larger overshoot raises.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u, R = state.u0, state.R0
    k1 = g(u, R)
    k2 = g(u, R + dt * k1)
    R_new = R + 0.5 * dt * (k1 + k2)
    over = np.maximum(R_new - R_max, R_min - R_new)
    outside = over > 0
    clamps = int(np.count_nonzero(outside))
    if clamps:
        if np.max(over) > dt * g.C_g * (1 + 1e-12):
            raise SimulationError(f"radius left [{R_min}, {R_max}] by {np.max(over):.3e} in one step")
        R_new = np.clip(R_new, R_min, R_max)
    theta, _ = porosity_of_radius(R_new)
    dtheta_dt = -2.0 * np.pi * R_new * g(u, R_new)
    return R_new, theta, dtheta_dt, clamps


@dataclass(frozen=True)
class DarcyResult:
    p0: np.ndarray
    vstar: np.ndarray
    kstar: np.ndarray  # per element
    divergence_residual: float
    solver_residual: float


def solve_darcy(disc: MacroDiscretization, R0, dtheta_dt, coeffs, physics: PhysicsFunctions, t: float, source=None, tol=DEFAULT_TOL):
    """``-div(K* (h0 - grad p)) = -dtheta/dt (+ source)`` with ``p = p_b`` on the boundary.

    ``K* = k(R) I`` is evaluated at element centroids and ``h0`` likewise, so the
    elementwise velocity ``v* = K* (h0 - grad p)`` satisfies the weak identity
    ``int v* . grad(phi) = -int dtheta/dt phi (+ int source phi)`` for every
    interior test function up to the solver residual.  ``source`` is a callable
    ``(t, x) -> values`` evaluated at quadrature points.
    """
    R_e = disc.at_centroids(R0)
    _, _, k_e, _ = coeffs(R_e)
    k_e = np.asarray(k_e, dtype=float)
    h0 = np.asarray(physics.h0(t, disc.centroids), dtype=float)
    lift = np.asarray(physics.p_b(t, disc.mesh.nodes), dtype=float)
    K = disc.stiffness(k_e)
    # sources: int dtheta_dt phi - int s phi
    src = disc.mass @ np.asarray(dtheta_dt, dtype=float)
    if source is not None:
        src = src - disc.quad_load(source(t, disc.geom.points.reshape(-1, 2)).reshape(disc.geom.weights.shape))
    rhs = disc.grad_load(k_e[:, None] * (h0 - disc.gradient(lift))) + src
    q, res = _solve_interior(K, rhs, disc.interior, tol)
    p = lift.copy()
    p[disc.interior] += q
    v = k_e[:, None] * (h0 - disc.gradient(p))
    r = (disc.grad_load(v) + src)[disc.interior]
    scale = max(np.linalg.norm(disc.grad_load(v)[disc.interior]), np.linalg.norm(src[disc.interior]))
    div_res = float(np.linalg.norm(r) / scale) if scale > 0 else float(np.linalg.norm(r))
    return DarcyResult(p, v, k_e, div_res, res)


def element_peclet(disc: MacroDiscretization, vstar, d_elem) -> float:
    """``max |v*| h_e / (2 d*)`` over elements, ``h_e`` the longest edge of a right triangle."""
    if vstar is None:
        return 0.0
    h = np.sqrt(2.0 * disc.area)
    return float(np.max(np.linalg.norm(vstar, axis=1) * h / (2.0 * np.asarray(d_elem))))


@dataclass(frozen=True)
class TransportResult:
    u0: np.ndarray
    balance_residual: float
    boundary_flux: float
    solver_residual: float
    peclet: float


def step_transport(
    disc: MacroDiscretization,
    u_old,
    theta_old,
    theta_new,
    dtheta_dt,
    d_elem,
    vstar,
    physics: PhysicsFunctions,
    dt: float,
    t_new: float,
    source=None,
    tol=DEFAULT_TOL,
):
    """Implicit Euler for ``d(theta u)/dt - div(D* grad u - u v*) = theta f(u) + dtheta/dt rho``.

    Diffusion and advection are implicit with frozen ``v*``; the reaction is
    lagged (``f(u_old)``).  Zeroth-order terms use the lumped (nodal) mass.
    ``u = 0`` on the boundary.  ``vstar=None`` drops the advection operator.
    """
    m = disc.lumped
    A = disc.stiffness(np.asarray(d_elem, dtype=float)) + sp.diags(m * theta_new / dt)
    peclet = 0.0
    if vstar is not None and np.any(vstar):
        A = A + disc.advection(vstar)
        peclet = element_peclet(disc, vstar, d_elem)
    A = A.tocsr()
    f_old = physics.f(u_old)
    sources = m * (theta_new * f_old + physics.rho * np.asarray(dtheta_dt))
    if source is not None:
        sources = sources + m * source(t_new, disc.mesh.nodes)
    b = m * theta_old * u_old / dt + sources
    ui, res = _solve_interior(A, b, disc.interior, tol)
    u = np.zeros_like(u_old, dtype=float)
    u[disc.interior] = ui
    # discrete balance over interior nodes: storage change - boundary inflow - sources
    I = disc.interior
    storage = np.sum(m[I] * (theta_new[I] * u[I] - theta_old[I] * u_old[I])) / dt
    ops = (A - sp.diags(m * theta_new / dt)) @ u
    inflow = -np.sum(ops[I])
    balance = abs(storage - inflow - np.sum(sources[I]))
    return TransportResult(u, float(balance), float(inflow), res, peclet)


# ---------------------------------------------------------------------------
# full simulation


@dataclass
class Trajectory:
    snapshots: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    mesh: PeriodicMesh | None = None
    max_peclet: float = 0.0
    max_divergence_residual: float = 0.0
    clamps: int = 0

    @property
    def final(self) -> MacroState:
        return self.snapshots[-1]


DIAGNOSTIC_COLUMNS = ("t", "min_u", "max_u", "min_R", "max_R", "balance_residual", "clamps")


@dataclass(frozen=True)
class MacroProblem:
    """Everything the time loop needs, independent of how it was configured."""

    mesh: PeriodicMesh
    physics: PhysicsFunctions
    coeffs: object
    R_min: float
    R_max: float
    T: float
    dt: float
    u_init: object
    R_init: object
    snapshot_every: int = 1
    transport_source: object = None
    darcy_source: object = None


def initial_state(problem: MacroProblem, disc: MacroDiscretization | None = None) -> MacroState:
    disc = disc or MacroDiscretization(problem.mesh)
    x = problem.mesh.nodes
    u = np.asarray(problem.u_init(0.0, x), dtype=float).copy()
    u[disc.boundary] = 0.0
    R = np.asarray(problem.R_init(0.0, x), dtype=float).copy()
    if np.any(R < problem.R_min) or np.any(R > problem.R_max):
        raise ValueError(f"initial radius outside [{problem.R_min}, {problem.R_max}]")
    theta, _ = porosity_of_radius(R)
    dtheta = -2.0 * np.pi * R * problem.physics.g(u, R)
    dr = solve_darcy(disc, R, dtheta, problem.coeffs, problem.physics, 0.0, problem.darcy_source)
    return MacroState(0.0, u, R, dr.p0, dr.vstar, theta, dtheta)


def initial_peclet(problem: MacroProblem) -> float:
    """Element Peclet number of the initial state."""
    disc = MacroDiscretization(problem.mesh)
    state = initial_state(problem, disc)
    _, d_e, _, _ = problem.coeffs(disc.at_centroids(state.R0))
    return element_peclet(disc, state.vstar, d_e)


def run_problem(problem: MacroProblem, couple: bool = True, callback=None) -> Trajectory:
    """Integrate to ``T``.  ``couple=False`` freezes the radius (fixed-porosity transport)."""
    disc = MacroDiscretization(problem.mesh)
    state = initial_state(problem, disc)
    if not couple:
        state = replace(state, dtheta_dt=np.zeros_like(state.theta))
    traj = Trajectory(mesh=problem.mesh)
    traj.snapshots.append(state)
    traj.diagnostics.append(_diag(state, 0.0, 0))
    n_steps = int(round(problem.T / problem.dt))
    if n_steps < 1 or abs(n_steps * problem.dt - problem.T) > 1e-9 * problem.T:
        raise ValueError("T must be a positive integer multiple of dt")
    phys = problem.physics
    for n in range(1, n_steps + 1):
        t_new = n * problem.dt
        try:
            if couple:
                R, theta, dtheta, clamps = step_radius(state, problem.dt, phys.g, problem.R_min, problem.R_max)
            else:
                R, theta, dtheta, clamps = state.R0, state.theta, state.dtheta_dt, 0
            dr = solve_darcy(disc, R, dtheta, problem.coeffs, phys, t_new, problem.darcy_source)
            _, d_e, _, _ = problem.coeffs(disc.at_centroids(R))
            tr = step_transport(
                disc, state.u0, state.theta, theta, dtheta, d_e, dr.vstar, phys, problem.dt, t_new, problem.transport_source
            )
        except (SolverError, SimulationError, ValueError) as exc:
            raise SimulationError(f"step {n} (t = {t_new:.6g}) failed: {exc}", step=n, state=state) from exc
        state = MacroState(t_new, tr.u0, R, dr.p0, dr.vstar, theta, dtheta)
        traj.clamps += clamps
        traj.max_peclet = max(traj.max_peclet, tr.peclet)
        traj.max_divergence_residual = max(traj.max_divergence_residual, dr.divergence_residual)
        traj.diagnostics.append(_diag(state, tr.balance_residual, clamps))
        if n % problem.snapshot_every == 0 or n == n_steps:
            traj.snapshots.append(state)
        if callback:
            callback(n, state)
    return traj


def _diag(state: MacroState, balance, clamps):
    return (
        state.time,
        float(state.u0.min()),
        float(state.u0.max()),
        float(state.R0.min()),
        float(state.R0.max()),
        float(balance),
        int(clamps),
    )


def run_simulation(config, table: CoefficientTable | None = None, cache_dir=None, couple: bool = True) -> Trajectory:
    """Build the problem described by a :class:`~porecell.config.ScenarioConfig` and integrate it."""
    from .config import build_problem

    problem = build_problem(config, table=table, cache_dir=cache_dir)
    return run_problem(problem, couple=couple)


# ---------------------------------------------------------------------------
# micro-field reconstruction


@dataclass(frozen=True)
class MicroFields:
    """Cell fields reconstructed at one macro point."""

    w0: np.ndarray  # P2 vector values on the cell solution's mesh
    q1: np.ndarray  # P1 values
    u1: np.ndarray  # P1 values
    R_cell: float
    forcing: np.ndarray  # h0 - grad p0
    flux: np.ndarray  # int A0 w0
    expected_flux: np.ndarray  # K* (h0 - grad p0)


def locate(mesh: PeriodicMesh, point):
    """Index of an element containing ``point`` and its barycentric coordinates."""
    p = np.asarray(point, dtype=float)
    P = mesh.nodes[mesh.elements]
    v0, v1, v2 = P[:, 0], P[:, 1], P[:, 2]
    det = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v2[:, 0] - v0[:, 0]) * (v1[:, 1] - v0[:, 1])
    l1 = ((p[0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v2[:, 0] - v0[:, 0]) * (p[1] - v0[:, 1])) / det
    l2 = ((v1[:, 0] - v0[:, 0]) * (p[1] - v0[:, 1]) - (p[0] - v0[:, 0]) * (v1[:, 1] - v0[:, 1])) / det
    lam = np.stack([1 - l1 - l2, l1, l2], axis=1)
    inside = np.all(lam >= -1e-12, axis=1)
    if not np.any(inside):
        raise ValueError(f"point {tuple(p)} lies outside the macroscopic domain")
    e = int(np.argmax(inside))
    return e, lam[e]


def reconstruct_micro_fields(state: MacroState, cell_solutions: dict, point, mesh: PeriodicMesh, physics: PhysicsFunctions):
    """Two-scale reconstruction at a macro point.

    ``cell_solutions`` maps sample radii to ``(DiffusionCellSolution,
    StokesCellSolution)``; the sample nearest to the local radius is used.
    Returns ``w0 = sum_i (h0 - grad p0)_i w_i``, ``q1 = (psi - y).h0 +
    sum_i (h0 - grad p0)_i pi_i`` and ``u1 = sum_i d_i u0 chi_i``.
    """
    from .cell_problems import Formulation, superposition_flux
    from .geometry import psi_inverse, psi_raw

    disc = MacroDiscretization(mesh)
    e, lam = locate(mesh, point)
    R_loc = float(lam @ state.R0[mesh.elements[e]])
    radii = np.array(sorted(cell_solutions))
    R_cell = float(radii[np.argmin(np.abs(radii - R_loc))])
    dsol, ssol = cell_solutions[R_cell]
    grad_p = disc.gradient(state.p0)[e]
    grad_u = disc.gradient(state.u0)[e]
    h0 = np.asarray(physics.h0(state.time, np.asarray(point, dtype=float)[None, :]), dtype=float)[0]
    G = h0 - grad_p
    w0 = sum(G[i] * ssol.velocities[i].values for i in range(2))
    cell_nodes = ssol.mesh.nodes
    t = ssol.transform
    if ssol.formulation == Formulation.FIXED:
        shift = psi_raw(t, cell_nodes) - cell_nodes
    else:
        shift = cell_nodes - psi_inverse(t, cell_nodes, tol=1e-9)
    q1 = shift @ h0 + sum(G[i] * ssol.pressures[i].values for i in range(2))
    u1 = sum(grad_u[i] * dsol.correctors[i].values for i in range(2))
    flux = superposition_flux(ssol, G)
    return MicroFields(w0, q1, u1, R_cell, G, flux, ssol.Kstar_flux @ G)

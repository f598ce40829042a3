"""Manufactured-solution convergence studies for the macroscopic solver.

Sources are derived from the exact fields by central differences (step
``1e-5``, truncation ~1e-10), which keeps every case a few lines long and
independent of hand-derived formulas.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem.mesh import gen_macro_mesh
from .geometry import porosity_of_radius
from .macro_solver import (
    AnalyticCoefficients,
    MacroDiscretization,
    MacroProblem,
    run_problem,
    solve_darcy,
    step_transport,
)
from .physics import PhysicsFunctions, build_g

FD_STEP = 1e-5
R_MIN, R_MAX = 0.1, 0.25
CASES = ("darcy", "heat", "transport", "coupled")


def model_dstar(R):
    """Smooth decreasing stand-in for ``d*(R)``."""
    theta, _ = porosity_of_radius(R)
    return theta / (1.0 + np.pi * np.asarray(R) ** 2)


def model_kstar(R):
    """Smooth decreasing stand-in for ``k*(R)``."""
    return 0.4 * (0.5 - np.asarray(R)) ** 3


def model_coefficients():
    return AnalyticCoefficients(model_dstar, model_kstar, R_MIN, R_MAX)


@dataclass
class ConvergenceTable:
    case: str
    parameter: str  # "h" or "dt"
    steps: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def orders(self):
        s, e = np.asarray(self.steps), np.asarray(self.errors)
        return list(np.log(e[:-1] / e[1:]) / np.log(s[:-1] / s[1:]))

    @property
    def min_order(self) -> float:
        return float(min(self.orders))

    def format(self) -> str:
        lines = [f"# {self.case}: L2 error vs {self.parameter}", f"{self.parameter},error,order"]
        orders = [float("nan")] + self.orders
        lines += [f"{s:.6g},{e:.6e},{o:.4f}" for s, e, o in zip(self.steps, self.errors, orders)]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# finite-difference calculus on callables f(t, x)


def _ddt(fn, t, x):
    return (fn(t + FD_STEP, x) - fn(t - FD_STEP, x)) / (2 * FD_STEP)


def _grad(fn, t, x):
    out = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = FD_STEP
        out.append((fn(t, x + e) - fn(t, x - e)) / (2 * FD_STEP))
    return np.stack(out, axis=-1)


def _div(vec_fn, t, x):
    tot = 0.0
    for k in range(2):
        e = np.zeros(2)
        e[k] = FD_STEP
        tot = tot + (vec_fn(t, x + e)[:, k] - vec_fn(t, x - e)[:, k]) / (2 * FD_STEP)
    return tot


def _sinsin(x):
    return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])


# ---------------------------------------------------------------------------
# Darcy


def mms_darcy(levels=(8, 16, 32), R_uniform=0.18) -> ConvergenceTable:
    """``p = sin(pi x) sin(pi y) + x/2`` with uniform radius and a constant body force."""
    coeffs = model_coefficients()
    k = float(model_kstar(R_uniform))
    H = np.array([0.3, -0.2])

    def p_exact(t, x):
        return _sinsin(x) + 0.5 * x[:, 0]

    def source(t, x):
        # -div(k (H - grad p)) = s  (dtheta/dt = 0)
        return -_div(lambda tt, xx: k * (H - _grad(p_exact, tt, xx)), t, x)

    phys = PhysicsFunctions(f=None, g=None, h0=lambda t, x: np.broadcast_to(H, (len(x), 2)), p_b=p_exact)
    table = ConvergenceTable("darcy", "h")
    for n in levels:
        disc = MacroDiscretization(gen_macro_mesh((0, 0, 1, 1), n, n))
        N = disc.mesh.n_nodes
        res = solve_darcy(disc, np.full(N, R_uniform), np.zeros(N), coeffs, phys, 0.0, source=source)
        pts = disc.geom.points.reshape(-1, 2)
        table.steps.append(1.0 / n)
        table.errors.append(disc.l2_error(res.p0, p_exact(0.0, pts).reshape(disc.geom.weights.shape)))
    return table


# ---------------------------------------------------------------------------
# transport with frozen porosity


def _transport_case(levels, dt_of_h, T, advect: bool, name: str, parameter="h", dts=None):
    R_uniform = 0.18
    theta, _ = porosity_of_radius(R_uniform)
    d = float(model_dstar(R_uniform))
    k = float(model_kstar(R_uniform))
    H = np.array([2.0, 1.0]) if advect else np.zeros(2)
    v = k * H
    f = (lambda u: 0.5 - 0.8 * u) if advect else (lambda u: 0.0 * u)
    rho = 0.0

    def u_exact(t, x):
        return np.exp(-t) * _sinsin(x)

    def source(t, x):
        flux = lambda tt, xx: d * _grad(u_exact, tt, xx) - u_exact(tt, xx)[:, None] * v  # noqa: E731
        return theta * _ddt(u_exact, t, x) - _div(flux, t, x) - theta * f(u_exact(t, x))

    phys = PhysicsFunctions(f=f, g=None, h0=None, p_b=None, rho=rho)
    table = ConvergenceTable(name, parameter)
    runs = [(n, dt_of_h(1.0 / n)) for n in levels] if dts is None else [(levels[0], dt) for dt in dts]
    for n, dt in runs:
        disc = MacroDiscretization(gen_macro_mesh((0, 0, 1, 1), n, n))
        N, M = disc.mesh.n_nodes, disc.mesh.n_elements
        steps = int(round(T / dt))
        dt = T / steps
        u = u_exact(0.0, disc.mesh.nodes)
        th = np.full(N, theta)
        d_e = np.full(M, d)
        v_e = np.broadcast_to(v, (M, 2)).copy() if advect else None
        for s in range(1, steps + 1):
            tr = step_transport(disc, u, th, th, np.zeros(N), d_e, v_e, phys, dt, s * dt, source=source)
            u = tr.u0
        pts = disc.geom.points.reshape(-1, 2)
        table.steps.append(1.0 / n if dts is None else dt)
        table.errors.append(disc.l2_error(u, u_exact(T, pts).reshape(disc.geom.weights.shape)))
    return table


def mms_heat(levels=(8, 16, 32), T=0.1, c_dt=0.5) -> ConvergenceTable:
    """``u = e^-t sin(pi x) sin(pi y)`` with constant porosity, no flow, no reaction; ``dt = c h^2``."""
    return _transport_case(levels, lambda h: c_dt * h * h, T, advect=False, name="heat")


def mms_heat_time(n=64, dts=(0.2, 0.1, 0.05), T=1.0) -> ConvergenceTable:
    return _transport_case((n,), None, T, advect=False, name="heat-time", parameter="dt", dts=dts)


def mms_transport(levels=(8, 16, 32), T=0.1, c_dt=0.5) -> ConvergenceTable:
    """Heat case plus constant Darcy drift and a linear reaction."""
    return _transport_case(levels, lambda h: c_dt * h * h, T, advect=True, name="transport")


# ---------------------------------------------------------------------------
# fully coupled


def coupled_problem(n=32, dt=0.05, T=1.0, c=0.02, R_in=0.16, omega=4.0):
    """All terms active; the radius follows ``dR/dt = c u`` in closed form.

    With ``u = q(t) S(x)``, ``q = 1 + sin(omega t)``, the exact radius is
    ``R_in + c S(x) Q(t)`` with ``Q = t + (1 - cos(omega t)) / omega``, which stays
    on the plateau of the tapered rate for the defaults.  The oscillating
    profile keeps the time-discretisation error well above the spatial one.
    """
    g = build_g({"name": "mms-linear", "params": {"c": c}}, R_MIN, R_MAX)
    H = np.array([0.5, 0.25])
    rho = 0.5
    f = lambda u: 0.2 - 0.5 * u  # noqa: E731

    def u_exact(t, x):
        return (1.0 + np.sin(omega * t)) * _sinsin(x)

    def R_exact(t, x):
        return R_in + c * _sinsin(x) * (t + (1.0 - np.cos(omega * t)) / omega)

    def p_exact(t, x):
        return (1.0 + t) * _sinsin(x) + 0.2 * x[:, 0]

    def theta_exact(t, x):
        return porosity_of_radius(R_exact(t, x))[0]

    def v_exact(t, x):
        return model_kstar(R_exact(t, x))[:, None] * (H - _grad(p_exact, t, x))

    def darcy_source(t, x):
        return _ddt(theta_exact, t, x) - _div(v_exact, t, x)

    def transport_source(t, x):
        flux = lambda tt, xx: model_dstar(R_exact(tt, xx))[:, None] * _grad(u_exact, tt, xx) - u_exact(tt, xx)[:, None] * v_exact(tt, xx)  # noqa: E731
        th = theta_exact(t, x)
        return (
            _ddt(lambda tt, xx: theta_exact(tt, xx) * u_exact(tt, xx), t, x)
            - _div(flux, t, x)
            - th * f(u_exact(t, x))
            - rho * _ddt(theta_exact, t, x)
        )

    phys = PhysicsFunctions(f=f, g=g, h0=lambda t, x: np.broadcast_to(H, (len(x), 2)), p_b=p_exact, rho=rho)
    problem = MacroProblem(
        mesh=gen_macro_mesh((0, 0, 1, 1), n, n),
        physics=phys,
        coeffs=model_coefficients(),
        R_min=R_MIN,
        R_max=R_MAX,
        T=T,
        dt=dt,
        u_init=u_exact,
        R_init=R_exact,
        snapshot_every=10**9,
        transport_source=transport_source,
        darcy_source=darcy_source,
    )
    return problem, u_exact, R_exact


def mms_coupled(n=64, dts=(0.025, 0.0125, 0.00625), T=1.0) -> ConvergenceTable:
    table = ConvergenceTable("coupled", "dt")
    for dt in dts:
        problem, u_exact, _ = coupled_problem(n=n, dt=dt, T=T)
        traj = run_problem(problem)
        disc = MacroDiscretization(problem.mesh)
        pts = disc.geom.points.reshape(-1, 2)
        table.steps.append(dt)
        table.errors.append(disc.l2_error(traj.final.u0, u_exact(T, pts).reshape(disc.geom.weights.shape)))
    return table


def run_case(case: str) -> ConvergenceTable:
    if case == "darcy":
        return mms_darcy()
    if case == "heat":
        return mms_heat()
    if case == "transport":
        return mms_transport()
    if case == "coupled":
        return mms_coupled()
    raise ValueError(f"unknown MMS case {case!r}; choose from {CASES}")

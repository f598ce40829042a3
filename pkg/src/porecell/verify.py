"""Identity and property checks over all modules, reported as rows of (check, value, threshold, pass).

Two levels share the same checks: ``fast`` runs the Stokes cell problems on meshes
with ``h ~ 1/16`` and ``1/32`` and tabulates 5 samples, ``full`` uses ``h ~ 1/64``
and ``1/128`` and the default 17-sample table.  Diffusion cell problems are cheap
and always run at ``h ~ 1/64`` and ``1/128``.  A check that raises becomes a failing row; nothing here
propagates an exception.
"""
from __future__ import annotations

import csv
import io
import operator
import time
import traceback
from dataclasses import dataclass

import numpy as np

from .cell_problems import (
    TableConfig,
    anisotropy,
    compute_table,
    corrector_correspondence,
    formulation_mesh,
    solve_diffusion_cell,
    solve_stokes_cell,
)
from .fem.mesh import gen_cell_mesh, gen_macro_mesh
from .fem.solve import DEFAULT_TOL
from .geometry import CellTransform, piola_residual, rhs_identity_residual, tensors_at
from .macro_solver import MacroDiscretization, MacroProblem, TableCoefficients, run_problem, solve_darcy
from .physics import PhysicsFunctions, build_g, build_scalar, nonnegativity_violations

R_MIN, R_MAX = 0.1, 0.25
LEVELS = {"fast": (16, 32), "full": (64, 128)}
DIFFUSION_LEVELS = (64, 128)
TABLE_SIZE = {"fast": (5, 16), "full": (17, 32)}
N_SWEEP = 1000

_OPS = {"<=": operator.le, ">=": operator.ge, "<": operator.lt, ">": operator.gt, "==": operator.eq}


@dataclass(frozen=True)
class Check:
    """One report row; ``passed`` is ``value <relation> threshold``."""

    name: str
    value: float
    threshold: float
    relation: str = "<="
    note: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and _OPS[self.relation](self.value, self.threshold))

    def row(self):
        return [self.name, f"{self.value:.6e}", f"{self.relation} {self.threshold:.6e}", "pass" if self.passed else "FAIL"]


def mid_radius():
    return 0.5 * (R_MIN + R_MAX)


def sweep_points(n_points=N_SWEEP, R_ref=R_MAX, n_angles=40):
    """Polar grid of about ``n_points`` points on the reference cell outside the hole.

    Radii run from the hole boundary to the inscribed circle of the cell, which
    covers the whole support of the transformation.
    """
    n_r = max(2, n_points // n_angles)
    r = np.linspace(R_ref, 0.5, n_r)
    a = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    rr, aa = np.meshgrid(r, a, indexing="ij")
    return 0.5 + np.stack([rr * np.cos(aa), rr * np.sin(aa)], axis=-1).reshape(-1, 2)


def _transforms(D=None):
    D = np.eye(2) if D is None else D
    return [CellTransform(R, R_MIN, R_MAX, diffusion=D) for R in (R_MIN, mid_radius(), R_MAX)]


# ---------------------------------------------------------------------------
# geometry


def check_piola(perturbation=0.0, h=1e-5):
    # start 2h outside the hole so the stencil stays on the reference domain
    y = sweep_points(R_ref=R_MAX + 2 * h)
    worst = max(float(np.linalg.norm(piola_residual(t, y, h, perturbation), axis=1).max()) for t in _transforms())
    return Check("piola_identity", worst, 1e-6, note=f"h_fd={h:g}, {len(y)} points x 3 radii")


def check_rhs_identity(h=1e-5):
    y = sweep_points(R_ref=R_MAX + 2 * h)
    xis = (np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, -2.0]))
    worst = max(
        float(np.linalg.norm(rhs_identity_residual(t, y, xi, h), axis=1).max()) for t in _transforms() for xi in xis
    )
    return Check("rhs_identity", worst, 1e-6, note=f"h_fd={h:g}, {len(y)} points x 3 radii x 3 directions")


def jacobian_constants(n_points=N_SWEEP, D=None):
    """``(c_J, alpha)``: minimum Jacobian and minimum eigenvalue of ``D0`` over the sweep."""
    y = sweep_points(n_points)
    cJ, alpha = np.inf, np.inf
    for t in _transforms(D):
        ts = tensors_at(t, y)
        cJ = min(cJ, float(ts.J.min()))
        alpha = min(alpha, float(np.linalg.eigvalsh(ts.D0).min()))
    return cJ, alpha


def check_jacobian_and_coercivity():
    c1, a1 = jacobian_constants(N_SWEEP)
    c2, a2 = jacobian_constants(2 * N_SWEEP)
    return [
        Check("jacobian_floor", c1, 0.0, ">", note="min J over the sweep"),
        Check("jacobian_floor_stability", abs(c2 - c1) / c1, 0.1, note="relative change under sample doubling"),
        Check("coercivity", a1, 0.0, ">", note="min eigenvalue of D0 over the sweep"),
        Check("coercivity_stability", abs(a2 - a1) / a1, 0.1, note="relative change under sample doubling"),
    ]


# ---------------------------------------------------------------------------
# cell problems


def _cell_mesh(t, n, formulation):
    return formulation_mesh(gen_cell_mesh(R_MAX, n), t, formulation)


def check_isotropy(levels, diffusion_levels=DIFFUSION_LEVELS):
    """Anisotropy of ``D*`` and ``K*`` at three radii on the coarse level, and its reduction."""
    out = []
    for t in _transforms():
        aD = [anisotropy(solve_diffusion_cell(t, _cell_mesh(t, n, "moving"), "moving").Dstar) for n in diffusion_levels]
        aK = [anisotropy(solve_stokes_cell(t, _cell_mesh(t, n, "moving"), "moving").Kstar_energy) for n in levels]
        for what, (coarse, fine), lv in (("D", aD, diffusion_levels), ("K", aK, levels)):
            out.append(Check(f"isotropy_{what}_R={t.R:g}", coarse, 0.01, note=f"h=1/{lv[0]}"))
            ratio = coarse / fine if fine > 0 else np.inf
            out.append(Check(f"isotropy_{what}_reduction_R={t.R:g}", ratio, 2.0, ">=", note=f"h=1/{lv[0]} -> 1/{lv[1]}"))
    return out


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def check_equivalence(levels, diffusion_levels=DIFFUSION_LEVELS):
    """Fixed-cell vs moving-cell ``D*``, ``K*`` and corrector correspondence on two levels."""
    out = []
    for R in (R_MIN, mid_radius()):
        t = CellTransform(R, R_MIN, R_MAX)
        gD, gC, gK = [], [], []
        for n in diffusion_levels:
            df = solve_diffusion_cell(t, _cell_mesh(t, n, "fixed"), "fixed")
            dm = solve_diffusion_cell(t, _cell_mesh(t, n, "moving"), "moving")
            gD.append(_rel(df.Dstar, dm.Dstar))
            gC.append(corrector_correspondence(df, dm, t))
        for n in levels:
            sf = solve_stokes_cell(t, _cell_mesh(t, n, "fixed"), "fixed")
            sm = solve_stokes_cell(t, _cell_mesh(t, n, "moving"), "moving")
            gK.append(_rel(sf.Kstar_energy, sm.Kstar_energy))
        for name, g, lv in (
            ("equivalence_D", gD, diffusion_levels),
            ("equivalence_K", gK, levels),
            ("corrector_correspondence", gC, diffusion_levels),
        ):
            out.append(Check(f"{name}_R={R:g}", g[0], 0.02, note=f"h=1/{lv[0]}"))
            out.append(Check(f"{name}_shrinks_R={R:g}", g[1], g[0], "<", note=f"h=1/{lv[1]} vs h=1/{lv[0]}"))
    return out


def verification_table(level="fast", tol=DEFAULT_TOL):
    n_samples, res = TABLE_SIZE[level]
    return compute_table(TableConfig(R_MIN, R_MAX, n_samples=n_samples, cell_resolution=res, tol=tol))


def check_table(table, tol=DEFAULT_TOL):
    """Dual permeability agreement and the Voigt bound at every tabulated radius."""
    gap = table.details["dual_gap"]
    margin = table.details["voigt_margin"]
    interior = margin[1:-1]
    return [
        Check("dual_permeability", float(gap.max()), 10 * tol, note=f"{len(gap)} tabulated radii"),
        Check("voigt_bound", float(margin.min()), 0.0, ">=", note="min of theta D xi.xi - D* xi.xi"),
        Check("voigt_bound_strict_interior", float(interior.min()) if len(interior) else np.inf, 0.0, ">"),
    ]


# ---------------------------------------------------------------------------
# macro model


def _zero_force(t, x):
    return np.zeros((len(x), 2))


def check_darcy(table, tol=DEFAULT_TOL, n=16):
    """Constant boundary pressure gives ``v* = 0``; a constant force ``H`` gives ``v* = k H``."""
    disc = MacroDiscretization(gen_macro_mesh((0, 0, 1, 1), n, n))
    N = disc.mesh.n_nodes
    coeffs = TableCoefficients(table)
    # off-sample radius: halfway between the second and third samples
    R = 0.5 * (table.R[1] + table.R[2])
    Rn = np.full(N, R)
    phys = PhysicsFunctions(f=None, g=None, h0=_zero_force, p_b=lambda t, x: np.full(len(x), 0.7))
    r0 = solve_darcy(disc, Rn, np.zeros(N), coeffs, phys, 0.0, tol=tol)
    p_dev = float(np.max(np.abs(r0.p0 - 0.7)))
    v_max = float(np.max(np.abs(r0.vstar)))
    H = np.array([1.0, 0.5])
    phys = PhysicsFunctions(f=None, g=None, h0=lambda t, x: np.broadcast_to(H, (len(x), 2)), p_b=lambda t, x: np.zeros(len(x)))
    r1 = solve_darcy(disc, Rn, np.zeros(N), coeffs, phys, 0.0, tol=tol)
    cfg = table.config
    t = cfg.transform(R)
    mesh = formulation_mesh(gen_cell_mesh(cfg.R_max, cfg.cell_resolution), t, cfg.formulation)
    k = float(np.trace(solve_stokes_cell(t, mesh, cfg.formulation, cfg.tol).Kstar_energy) / 2)
    err = float(np.max(np.linalg.norm(r1.vstar - k * H, axis=1)) / np.linalg.norm(k * H))
    return [
        Check("darcy_constant_pressure_p", p_dev, 10 * tol),
        Check("darcy_constant_pressure_v", v_max, 10 * tol),
        Check("darcy_constant_force", err, 0.005, note=f"table vs direct cell solve at R={R:.6g}"),
    ]


def confinement_problem(n=16, steps=200, dt=0.002, delta=0.02, k_p=1.0, k_d=0.3, u_cap=10.0, coeffs=None):
    """Coupled run with the tapered reaction rate; ``dt <= delta / C_g`` for the defaults."""
    from .mms import model_coefficients

    g = build_g({"name": "tapered-reaction", "params": {"k_p": k_p, "k_d": k_d, "delta": delta, "u_cap": u_cap}}, R_MIN, R_MAX)
    if dt > delta / g.C_g:
        raise ValueError("dt exceeds delta / C_g")
    H = np.array([1.0, 0.5])
    phys = PhysicsFunctions(
        f=lambda u: 0.5 - np.asarray(u),
        g=g,
        h0=lambda t, x: np.broadcast_to(H, (len(x), 2)),
        p_b=lambda t, x: np.zeros(len(x)),
        rho=1.0,
    )
    return MacroProblem(
        mesh=gen_macro_mesh((0, 0, 1, 1), n, n),
        physics=phys,
        coeffs=coeffs or model_coefficients(),
        R_min=R_MIN,
        R_max=R_MAX,
        T=steps * dt,
        dt=dt,
        u_init=build_scalar({"name": "trig", "params": {"amplitude": 1.0}}),
        R_init=build_scalar({"name": "trig", "params": {"amplitude": 0.08, "offset": 0.16}}),
        snapshot_every=steps,
    )


def check_confinement(problem=None):
    problem = problem or confinement_problem()
    ph = problem.physics
    bad = nonnegativity_violations(ph.f, ph.g, problem.R_min, problem.R_max)
    traj = run_problem(problem)
    d = np.array(traj.diagnostics)
    u0_max = float(d[0, 2])
    return [
        Check("ode_data_compliance", float(len(bad)), 0.0, "=="),
        Check("ode_clamps", float(traj.clamps), 0.0, "==", note=f"{len(d) - 1} steps"),
        Check("ode_R_min", float(d[:, 3].min()), problem.R_min, ">="),
        Check("ode_R_max", float(d[:, 4].max()), problem.R_max, "<="),
        Check("u_nonnegative", float(d[:, 1].min()), 0.0, ">="),
        # no explicit ceiling is available; the empirical maximum is recorded
        Check("u_max_recorded", float(d[:, 2].max()), np.inf, "<", note=f"initial max {u0_max:.6g}"),
    ]


# ---------------------------------------------------------------------------
# driver


def _guard(name, fn, *args, **kw):
    try:
        out = fn(*args, **kw)
    except Exception as exc:  # a failing check must not abort the report
        return [Check(name, float("nan"), float("nan"), note=f"error: {exc!r}".replace("\n", " "))], traceback.format_exc()
    return (out if isinstance(out, list) else [out]), None


def run_verification(level="fast", perturb_adjugate=0.0, progress=None):
    """Run every check at ``level``; returns the list of :class:`Check` rows."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {sorted(LEVELS)}")
    levels = LEVELS[level]
    rows = []

    def run(name, fn, *args, **kw):
        t0 = time.perf_counter()
        out, _ = _guard(name, fn, *args, **kw)
        rows.extend(out)
        if progress:
            progress(name, out, time.perf_counter() - t0)
        return out

    run("piola_identity", check_piola, perturb_adjugate)
    run("rhs_identity", check_rhs_identity)
    run("jacobian", check_jacobian_and_coercivity)
    run("isotropy", check_isotropy, levels)
    run("equivalence", check_equivalence, levels)
    try:
        table = verification_table(level)
    except Exception as exc:
        rows.append(Check("table", float("nan"), float("nan"), note=f"error: {exc!r}"))
        table = None
    if table is not None:
        run("table", check_table, table)
        run("darcy", check_darcy, table)
    run("confinement", check_confinement)
    return rows


def format_report(rows, header="") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "value", "threshold", "pass"])
    for c in rows:
        w.writerow(c.row())
    return buf.getvalue()

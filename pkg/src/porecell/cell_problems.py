"""Periodic diffusion and Stokes cell problems and the effective-coefficient table.

Two equivalent formulations are supported:

``fixed``
    Solve on the reference cell (hole radius ``R_max``) with coefficients pulled
    back by the cell transformation: ``D0`` for diffusion, the symmetric
    transformed viscous form with ``A``, ``J`` for Stokes.
``moving``
    Solve on the mapped cell (hole radius ``R``) with the plain coefficients.

Both give the same ``D*`` and ``K*`` in the continuum; the moving formulation is
the production default.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import __version__
from .fem.assembly import (
    DiscreteField,
    LinearSystem,
    Space,
    ViscousForm,
    assemble_elliptic,
    assemble_stokes,
    mass_p1,
    stokes_operators,
)
from .fem.elements import QUAD_POINTS, ElementGeometry, p2_values
from .fem.mesh import PeriodicMesh, gen_cell_mesh, map_mesh
from .fem.solve import DEFAULT_TOL, solve_reduced
from .geometry import CellTransform, porosity_of_radius, tensors_at

_P2_AT_Q = p2_values(QUAD_POINTS)
VOIGT_DIRECTIONS = (np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0]))


class Formulation(str, Enum):
    FIXED = "fixed"
    MOVING = "moving"


def _check_mesh(mesh: PeriodicMesh, t: CellTransform, formulation: Formulation):
    expected = t.R_max if formulation == Formulation.FIXED else t.R
    if mesh.hole_radius is None or not np.isclose(mesh.hole_radius, expected, rtol=0, atol=1e-12):
        raise ValueError(
            f"{formulation.value} formulation needs a cell mesh with hole radius {expected}, "
            f"got {mesh.hole_radius}"
        )


def formulation_mesh(reference: PeriodicMesh, t: CellTransform, formulation) -> PeriodicMesh:
    """The mesh a formulation is solved on: the reference cell or its image under ``psi``."""
    formulation = Formulation(formulation)
    return reference if formulation == Formulation.FIXED else map_mesh(reference, t)


def anisotropy(T) -> float:
    """``|T - tr(T)/2 I|_F / (tr(T)/2)``."""
    T = np.asarray(T, dtype=float)
    d = np.trace(T) / T.shape[0]
    return float(np.linalg.norm(T - d * np.eye(T.shape[0])) / d)


# ---------------------------------------------------------------------------
# diffusion


@dataclass(frozen=True)
class DiffusionCellSolution:
    """Correctors ``chi_1, chi_2`` (mean zero) and the effective diffusion matrix."""

    correctors: tuple
    Dstar: np.ndarray
    formulation: Formulation
    R: float
    h: float
    mesh: PeriodicMesh
    residual: float = 0.0

    def voigt_margins(self, theta: float, D) -> np.ndarray:
        """``theta D xi.xi - D* xi.xi`` for the three test directions (non-negative if the bound holds)."""
        D = np.asarray(D, dtype=float)
        return np.array([theta * xi @ D @ xi - xi @ self.Dstar @ xi for xi in VOIGT_DIRECTIONS])


def effective_diffusion(mesh: PeriodicMesh, coeff, tol: float = DEFAULT_TOL):
    """Solve both periodic corrector problems for ``coeff`` and return ``(chi, D*, residual)``.

    ``coeff`` is constant ``(2, 2)`` or sampled per quadrature point ``(M, nq, 2, 2)``.
    """
    geom = ElementGeometry(mesh)
    C = np.asarray(coeff, dtype=float)
    if C.ndim == 2:
        C = np.broadcast_to(C, geom.weights.shape + (2, 2))
    system = assemble_elliptic(mesh, C)
    x = solve_reduced(system, tol)
    chi = system.expand(x)  # (N, 2)
    res = float(np.max(np.linalg.norm(system.matrix @ x - system.rhs, axis=0) / np.linalg.norm(system.rhs, axis=0)))
    # gradients of chi_i per element, (M, 2 [i], 2 [component])
    grads = np.einsum("mak,mai->mik", geom.p1_gradients, chi[mesh.elements])
    flux = grads + np.eye(2)[None]
    Dstar = np.einsum("mq,mik,mqkl,mjl->ij", geom.weights, flux, C, flux)
    return chi, 0.5 * (Dstar + Dstar.T), res


def solve_diffusion_cell(t: CellTransform, mesh: PeriodicMesh, formulation="moving", tol=DEFAULT_TOL):
    """Diffusion cell problems ``-div(C (grad chi_i + e_i)) = 0`` with periodic, Neumann and mean-zero conditions.

    ``C = D0(R, .)`` on the reference mesh (fixed) or the constant ``D`` on the
    mapped mesh (moving).
    """
    formulation = Formulation(formulation)
    _check_mesh(mesh, t, formulation)
    if formulation == Formulation.FIXED:
        coeff = tensors_at(t, ElementGeometry(mesh).points).D0
    else:
        coeff = t.diffusion
    chi, Dstar, res = effective_diffusion(mesh, coeff, tol)
    fields = tuple(DiscreteField(mesh, Space.P1, chi[:, i].copy()) for i in range(2))
    return DiffusionCellSolution(fields, Dstar, formulation, float(t.R), float(mesh.h), mesh, res)


# ---------------------------------------------------------------------------
# Stokes


@dataclass(frozen=True)
class StokesCellSolution:
    """Velocities ``w_1, w_2``, mean-zero pressures and both permeability formulas."""

    velocities: tuple
    pressures: tuple
    Kstar_flux: np.ndarray
    Kstar_energy: np.ndarray
    formulation: Formulation
    R: float
    h: float
    mesh: PeriodicMesh
    transform: CellTransform
    residual: float = 0.0
    divergence_residual: float = 0.0
    divergence_l2: float = 0.0

    @property
    def dual_gap(self) -> float:
        """``|K_flux - K_energy| / |K_energy|`` (Frobenius)."""
        return float(np.linalg.norm(self.Kstar_flux - self.Kstar_energy) / np.linalg.norm(self.Kstar_energy))

    def adjugate_at_q(self):
        geom = ElementGeometry(self.mesh)
        if self.formulation == Formulation.FIXED:
            return tensors_at(self.transform, geom.points).A
        return np.broadcast_to(np.eye(2), geom.weights.shape + (2, 2))


def _stokes_fields(t, mesh, formulation):
    if formulation == Formulation.FIXED:
        ts = tensors_at(t, ElementGeometry(mesh).points)
        return ViscousForm.SYMMETRIC, ts.A, ts.J
    return ViscousForm.HALF_GRADIENT, None, None


def assemble_stokes_cell(t: CellTransform, mesh: PeriodicMesh, formulation="moving"):
    """Assembled Stokes cell system ``(LinearSystem, StokesOperators)`` for a formulation."""
    formulation = Formulation(formulation)
    _check_mesh(mesh, t, formulation)
    form, A, J = _stokes_fields(t, mesh, formulation)
    return assemble_stokes(mesh, form, A, J, ops=stokes_operators(mesh, form, A, J))


def solve_stokes_cell(t: CellTransform, mesh: PeriodicMesh, formulation="moving", tol=DEFAULT_TOL, system=None):
    """Stokes cell problems for the unit forcings, no-slip on the obstacle.

    ``K_flux[i, j] = int (A^T e_i) . w_j`` and ``K_energy[i, j] = a(w_i, w_j)``
    with ``a`` the viscous form of the formulation.  ``system`` may pass a
    pre-assembled ``(LinearSystem, StokesOperators)`` pair.
    """
    formulation = Formulation(formulation)
    system, ops = system or assemble_stokes_cell(t, mesh, formulation)
    x = solve_reduced(system, tol)
    return _stokes_solution(t, mesh, formulation, system, ops, x)


def _stokes_solution(t, mesh, formulation, system: LinearSystem, ops, x):
    full = system.expand(x)
    n2 = 2 * ops.space.n
    W = full[:n2]
    P = full[n2:]
    Kflux = ops.F.T @ W
    Kenergy = W.T @ (ops.A @ W)
    res = float(np.max(np.linalg.norm(system.matrix @ x - system.rhs, axis=0) / np.linalg.norm(system.rhs, axis=0)))
    # discrete divergence against all periodic pressure test functions, relative to the forcing size
    Pp = system.prolongation[n2:, system.saddle[0] :]
    div_weak = Pp.T @ (ops.B @ W)
    div_res = float(np.max(np.linalg.norm(div_weak, axis=0) / np.linalg.norm(ops.F, axis=0)))
    div_l2 = _divergence_l2(ops, W)
    vel = tuple(DiscreteField(mesh, Space.P2_VECTOR, W[:, i].copy()) for i in range(2))
    pres = tuple(DiscreteField(mesh, Space.P1_PRESSURE, P[:, i].copy()) for i in range(2))
    return StokesCellSolution(
        vel,
        pres,
        Kflux,
        0.5 * (Kenergy + Kenergy.T),
        formulation,
        float(t.R),
        float(mesh.h),
        mesh,
        t,
        res,
        div_res,
        div_l2,
    )


def _divergence_l2(ops, W):
    """``max_i (int |J tr(grad_z w_i)|^2)^(1/2)``."""
    cells = ops.space.cells
    nv = ops.space.n
    out = []
    for i in range(W.shape[1]):
        ux, uy = W[:nv, i][cells], W[nv:, i][cells]
        div = np.einsum("mqk,mk->mq", ops.z_gradients[..., 0], ux) + np.einsum("mqk,mk->mq", ops.z_gradients[..., 1], uy)
        out.append(np.sqrt(np.sum(ops.geom.weights * (ops.jac_det * div) ** 2)))
    return float(max(out))


def velocity_at_q(sol: StokesCellSolution, i: int):
    """``w_i`` at the quadrature points, ``(M, nq, 2)``."""
    from .fem.elements import p2_space

    space = p2_space(sol.mesh)
    nv = space.n
    v = sol.velocities[i].values
    return np.stack([v[:nv][space.cells] @ _P2_AT_Q.T, v[nv:][space.cells] @ _P2_AT_Q.T], axis=-1)


def superposition_flux(sol: StokesCellSolution, G) -> np.ndarray:
    """``int A (sum_j G_j w_j)`` evaluated by quadrature of the reconstructed field."""
    G = np.asarray(G, dtype=float)
    w = sum(G[j] * velocity_at_q(sol, j) for j in range(2))
    A = sol.adjugate_at_q()
    geom = ElementGeometry(sol.mesh)
    return np.einsum("mq,mqij,mqj->i", geom.weights, A, w)


def corrector_correspondence(fixed: DiffusionCellSolution, moving: DiffusionCellSolution, t: CellTransform, component=None):
    """Relative L2 mismatch in ``chi~_i(psi(y)) = chi_i(y) + (y - psi(y)) . e_i + const``.

    Both sides are compared at corresponding nodes of the reference mesh and its
    image; the best constant is removed and the result is normalised by the
    L2 norm of ``chi~_i`` on the mapped cell.  Returns the larger of the two
    components unless ``component`` selects one.
    """
    if Formulation(fixed.formulation) != Formulation.FIXED or Formulation(moving.formulation) != Formulation.MOVING:
        raise ValueError("need one fixed and one moving solution")
    if not (np.isclose(fixed.R, t.R) and np.isclose(moving.R, t.R)):
        raise ValueError(f"radius mismatch: fixed {fixed.R}, moving {moving.R}, transform {t.R}")
    if fixed.mesh.n_nodes != moving.mesh.n_nodes or fixed.mesh.n_elements != moving.mesh.n_elements:
        raise ValueError("moving mesh must be the image of the fixed mesh")
    y = fixed.mesh.nodes
    z = moving.mesh.nodes
    M = mass_p1(moving.mesh)
    vol = M.sum()
    out = []
    for i in range(2):
        e = moving.correctors[i].values - (fixed.correctors[i].values + (y - z)[:, i])
        e = e - (M @ e).sum() / vol
        ref = moving.correctors[i].values
        out.append(float(np.sqrt(e @ (M @ e)) / np.sqrt(ref @ (M @ ref))))
    return max(out) if component is None else out[component]


# ---------------------------------------------------------------------------
# coefficient table

TABLE_COLUMNS = ("R", "theta", "dstar", "kstar", "aniso_d", "aniso_k")


@dataclass(frozen=True)
class TableConfig:
    """Inputs that determine a coefficient table."""

    R_min: float
    R_max: float
    D: tuple = ((1.0, 0.0), (0.0, 1.0))
    n_samples: int = 17
    cell_resolution: int = 32
    formulation: str = "moving"
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        D = tuple(tuple(float(v) for v in row) for row in np.asarray(self.D, dtype=float))
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "formulation", Formulation(self.formulation).value)
        if not (0.0 < self.R_min < self.R_max < 0.5):
            raise ValueError(f"need 0 < R_min < R_max < 0.5, got {self.R_min}, {self.R_max}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")

    def key(self) -> dict:
        return {
            "R_min": float(self.R_min),
            "R_max": float(self.R_max),
            "D": [list(r) for r in self.D],
            "n_samples": int(self.n_samples),
            "cell_resolution": int(self.cell_resolution),
            "formulation": self.formulation,
            "tol": float(self.tol),
            "version": __version__,
        }

    def key_json(self) -> str:
        return json.dumps(self.key(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.key_json().encode()).hexdigest()

    def transform(self, R) -> CellTransform:
        return CellTransform(float(R), self.R_min, self.R_max, diffusion=np.array(self.D))


def sample_radii(R_min: float, R_max: float, n: int) -> np.ndarray:
    """Chebyshev-Lobatto points on ``[R_min, R_max]`` in increasing order, endpoints exact."""
    k = np.arange(n)
    R = 0.5 * (R_min + R_max) - 0.5 * (R_max - R_min) * np.cos(np.pi * k / (n - 1))
    R[0], R[-1] = R_min, R_max
    return R


@dataclass(frozen=True)
class CoefficientTable:
    """Scalar effective coefficients sampled over the radius.

    ``samples`` has columns :data:`TABLE_COLUMNS`; ``details`` holds per-sample
    diagnostics (dual permeability gap, Voigt margin, solver residuals).
    """

    samples: np.ndarray
    config: TableConfig
    details: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != len(TABLE_COLUMNS):
            raise ValueError(f"samples must have columns {TABLE_COLUMNS}")
        if np.any(np.diff(s[:, 0]) <= 0):
            raise ValueError("table radii must be strictly increasing")
        theta, _ = porosity_of_radius(s[:, 0])
        if np.max(np.abs(theta - s[:, 1])) > 1e-12:
            raise ValueError("theta column does not match 1 - pi R^2")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, TABLE_COLUMNS.index(name)]

    @property
    def R(self):
        return self.column("R")

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(_table_body(self.samples).encode()).hexdigest()

    @property
    def monotone(self) -> bool:
        """``dstar`` and ``kstar`` strictly decreasing in ``R``."""
        return bool(np.all(np.diff(self.column("dstar")) < 0) and np.all(np.diff(self.column("kstar")) < 0))

    @cached_property
    def _interp(self):
        R = self.R
        return PchipInterpolator(R, self.column("dstar")), PchipInterpolator(R, self.column("kstar"))

    def __hash__(self):
        return hash(self.content_hash)


def interpolate(table: CoefficientTable, R):
    """``(theta, dstar, kstar, dtheta_dR)`` at radius ``R`` (scalar or array).

    ``theta`` and its derivative are analytic; ``dstar`` and ``kstar`` use a
    shape-preserving monotone cubic through the samples.
    """
    R = np.asarray(R, dtype=float)
    lo, hi = table.config.R_min, table.config.R_max
    if np.any(R < lo - 1e-12) or np.any(R > hi + 1e-12) or not np.all(np.isfinite(R)):
        bad = R[(R < lo - 1e-12) | (R > hi + 1e-12) | ~np.isfinite(R)]
        raise ValueError(f"radius {bad.ravel()[0]} outside the table range [{lo}, {hi}]")
    Rc = np.clip(R, lo, hi)
    d_i, k_i = table._interp
    theta, dtheta = porosity_of_radius(Rc)
    return theta, d_i(Rc)[()], k_i(Rc)[()], dtheta


def _sample_row(args):
    config, R = args
    t = config.transform(R)
    reference = gen_cell_mesh(config.R_max, config.cell_resolution)
    mesh = formulation_mesh(reference, t, config.formulation)
    dsol = solve_diffusion_cell(t, mesh, config.formulation, config.tol)
    ssol = solve_stokes_cell(t, mesh, config.formulation, config.tol)
    D, K = dsol.Dstar, 0.5 * (ssol.Kstar_energy + ssol.Kstar_energy.T)
    theta, _ = porosity_of_radius(R)
    row = (float(R), float(theta), float(np.trace(D) / 2), float(np.trace(K) / 2), anisotropy(D), anisotropy(K))
    detail = {
        "dual_gap": ssol.dual_gap,
        "voigt_margin": float(dsol.voigt_margins(theta, config.D).min()),
        "diffusion_residual": dsol.residual,
        "stokes_residual": ssol.residual,
        "divergence_residual": ssol.divergence_residual,
    }
    return row, detail


def compute_table(config: TableConfig, workers: int = 1, progress=None) -> CoefficientTable:
    """Run both cell problems at every sample radius (optionally in a process pool)."""
    radii = sample_radii(config.R_min, config.R_max, config.n_samples)
    jobs = [(config, R) for R in radii]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            it = pool.map(_sample_row, jobs)
            for R, out in zip(radii, _guarded(it, radii)):
                results.append(out)
                if progress:
                    progress(*out)
    else:
        for R, job in zip(radii, jobs):
            try:
                out = _sample_row(job)
            except Exception as exc:
                raise RuntimeError(f"cell solve failed at R = {R!r}: {exc}") from exc
            results.append(out)
            if progress:
                progress(*out)
    rows = np.array([r for r, _ in results])
    details = {k: np.array([d[k] for _, d in results]) for k in results[0][1]}
    return CoefficientTable(rows, config, details)


def _guarded(it, radii):
    radii = iter(radii)
    while True:
        R = next(radii, None)
        try:
            out = next(it)
        except StopIteration:
            return
        except Exception as exc:
            raise RuntimeError(f"cell solve failed at R = {R!r}: {exc}") from exc
        yield out


# ---------------------------------------------------------------------------
# persistence


def _table_body(samples) -> str:
    lines = [",".join(TABLE_COLUMNS)]
    lines += [",".join(repr(float(v)) for v in row) for row in np.asarray(samples)]
    return "\n".join(lines) + "\n"


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_table(table: CoefficientTable, csv_path, meta_path=None):
    """Write ``csv_path`` and the key-value sidecar (``<csv>.meta`` by default)."""
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(csv_path.suffix + ".meta")
    cfg = table.config
    header = f"# porecell {__version__} config_hash={cfg.hash()}\n"
    _atomic_write(csv_path, header + _table_body(table.samples))
    meta = {
        "config_hash": cfg.hash(),
        "content_hash": table.content_hash,
        "version": __version__,
        "key": cfg.key_json(),
        "R_min": repr(cfg.R_min),
        "R_max": repr(cfg.R_max),
        "D": json.dumps(cfg.D),
        "cell_resolution": str(cfg.cell_resolution),
        "formulation": cfg.formulation,
        "n_samples": str(cfg.n_samples),
    }
    for k, v in sorted(table.details.items()):
        meta[f"detail.{k}"] = json.dumps([float(x) for x in v])
    text = f"# porecell {__version__} config_hash={cfg.hash()}\n" + "".join(f"{k}={v}\n" for k, v in meta.items())
    _atomic_write(meta_path, text)
    return csv_path, meta_path


def _read_kv(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k] = v
    return out


def read_table(csv_path, config: TableConfig, meta_path=None) -> CoefficientTable:
    """Load a table, verifying the full configuration key and the content hash."""
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(csv_path.suffix + ".meta")
    meta = _read_kv(meta_path)
    if meta.get("key") != config.key_json():
        raise ValueError("cached table was built for a different configuration")
    lines = [ln for ln in csv_path.read_text().splitlines() if not ln.startswith("#")]
    if not lines or lines[0] != ",".join(TABLE_COLUMNS):
        raise ValueError("table file has an unexpected header")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if hashlib.sha256(_table_body(rows).encode()).hexdigest() != meta.get("content_hash"):
        raise ValueError("table content hash mismatch")
    details = {k[7:]: np.array(json.loads(v)) for k, v in meta.items() if k.startswith("detail.")}
    return CoefficientTable(rows, config, details)


def default_cache_dir() -> Path:
    env = os.environ.get("PORECELL_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "porecell"


def cache_paths(config: TableConfig, cache_dir=None):
    d = Path(cache_dir) if cache_dir else default_cache_dir()
    stem = f"table-{config.hash()[:16]}"
    return d / f"{stem}.csv", d / f"{stem}.csv.meta"


def build_table(config: TableConfig, cache_dir=None, workers: int = 1, progress=None, use_cache=True):
    """Cached :func:`compute_table`; returns ``(table, cache_hit)``.

    A cached file is used only if its stored key equals the full configuration
    key and its rows reproduce the recorded content hash; otherwise the table is
    recomputed and the stale files are replaced atomically.
    """
    csv_path, meta_path = cache_paths(config, cache_dir)
    if use_cache and csv_path.exists() and meta_path.exists():
        try:
            return read_table(csv_path, config, meta_path), True
        except (ValueError, OSError, json.JSONDecodeError):
            pass
    table = compute_table(config, workers=workers, progress=progress)
    if use_cache:
        write_table(table, csv_path, meta_path)
    return table, False

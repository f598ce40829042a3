"""Linear solves with a checked relative-residual contract.

Scalar problems use a sparse LU factorisation.  Stokes saddle-point systems
eliminate the velocity with a sparse Cholesky-like factor of the viscous block
and run preconditioned CG on the pressure Schur complement, refined on the
true residual until the contract holds.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import LinearSystem

DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


def relative_residual(matrix, x, rhs) -> float:
    r = matrix @ x - rhs
    nb = np.linalg.norm(rhs)
    return float(np.linalg.norm(r) / nb) if nb > 0 else float(np.linalg.norm(r))


def _columns(b):
    return [slice(None)] if b.ndim == 1 else [(slice(None), j) for j in range(b.shape[1])]


def _solve_direct(A, b, tol, max_refine):
    try:
        lu = spla.splu(A.tocsc(), permc_spec="COLAMD")
    except RuntimeError as exc:  # singular factor
        raise SolverError(f"factorisation failed: {exc}") from exc
    x = lu.solve(b)
    cols = _columns(b)
    res = max(relative_residual(A, x[c], b[c]) for c in cols)
    for _ in range(max_refine):
        if res <= tol:
            break
        x = x + lu.solve(b - A @ x)
        res = max(relative_residual(A, x[c], b[c]) for c in cols)
    return x, res


def _spd_factor(A):
    try:
        lu = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SolverError(f"velocity block factorisation failed: {exc}") from exc
    return lu.solve


def _velocity_solver(A):
    """Factor the SPD velocity block, reusing one factor when the components decouple identically."""
    h = A.shape[0] // 2
    off = A[:h, h:]
    if off.count_nonzero() == 0 and A.shape[0] % 2 == 0:
        Axx, Ayy = A[:h, :h].tocsr(), A[h:, h:].tocsr()
        sx = _spd_factor(Axx)
        sy = sx if (Axx != Ayy).count_nonzero() == 0 else _spd_factor(Ayy)
        return lambda b: np.concatenate([sx(b[:h]), sy(b[h:])])
    return _spd_factor(A)


class _SchurSolver:
    """Exact velocity elimination plus projected PCG on the pressure Schur complement.

    The reduced system is ``[[A, C, 0], [C^T, 0, m], [0, m^T, 0]]`` with ``m``
    the lumped pressure mass.  CG runs on ``S = C^T A^-1 C`` restricted to
    ``m^T p = 0`` and preconditioned by ``2 diag(m)^-1`` (viscosity 1/2).
    """

    def __init__(self, K, n_velocity, n_pressure):
        nv, npr = n_velocity, n_pressure
        self.nv, self.npr = nv, npr
        self.C = K[:nv, nv : nv + npr].tocsc()
        self.m = np.asarray(K[nv : nv + npr, -1].toarray()).ravel()
        if np.any(self.m == 0):
            raise SolverError("pressure border row has zero entries")
        self.solve_v = _velocity_solver(K[:nv, :nv])
        self.ones_m = self.m.sum()

    def _project(self, z):
        return z - self.m @ z / self.ones_m

    def _schur(self, p):
        return self.C.T @ self.solve_v(self.C @ p)

    def __call__(self, b, rtol, maxiter):
        nv, npr = self.nv, self.npr
        f, g, c = b[:nv], b[nv : nv + npr], b[-1]
        u0 = self.solve_v(f)
        p_c = np.full(npr, c / self.ones_m)
        rhs = self.C.T @ u0 - g - self._schur(p_c)
        p = np.zeros(npr)
        r = rhs.copy()
        z = self._project(2.0 * r / np.abs(self.m))
        d = z.copy()
        rz = r @ z
        ref = np.sqrt(abs(rz)) or 1.0
        for _ in range(maxiter):
            if np.sqrt(abs(rz)) <= rtol * ref:
                break
            Sd = self._schur(d)
            step = rz / (d @ Sd)
            p += step * d
            r -= step * Sd
            z = self._project(2.0 * r / np.abs(self.m))
            rz_new = r @ z
            d = z + (rz_new / rz) * d
            rz = rz_new
        # the leftover residual is parallel to m; its size is the multiplier
        lam = -(r.sum()) / self.ones_m
        p = p + p_c
        u = self.solve_v(f - self.C @ p)
        return np.concatenate([u, p, [lam]])


def _solve_saddle(system, tol, max_refine=4):
    K = sp.csr_matrix(system.matrix)
    solver = _SchurSolver(K, *system.saddle)
    b = np.asarray(system.rhs, dtype=float)
    single = b.ndim == 1
    B = b[:, None] if single else b
    X = np.zeros_like(B)
    worst = 0.0
    maxiter = max(200, B.shape[0] // 10)
    for j in range(B.shape[1]):
        bj = B[:, j]
        x = np.zeros_like(bj)
        res = relative_residual(K, x, bj)
        for _ in range(max_refine):
            if res <= tol:
                break
            x = x + solver(bj - K @ x, 1e-2 * tol, maxiter)
            res = relative_residual(K, x, bj)
        X[:, j] = x
        worst = max(worst, res)
    return (X[:, 0] if single else X), worst


def solve_reduced(system: LinearSystem, tol: float = DEFAULT_TOL, max_refine: int = 3, method: str = "auto"):
    """Solve the reduced system; returns reduced unknowns (multipliers included).

    ``method`` is ``"direct"`` (monolithic LU), ``"iterative"`` (Schur complement
    CG, saddle-point systems only) or ``"auto"``, which picks the Schur path for
    saddle-point systems.
    """
    A = sp.csr_matrix(system.matrix)
    b = np.asarray(system.rhs, dtype=float)
    if not np.all(np.isfinite(A.data)) or not np.all(np.isfinite(b)):
        raise SolverError("system contains non-finite entries")
    if A.shape[0] == 0:
        return b.copy()
    if method not in ("auto", "direct", "iterative"):
        raise ValueError(f"unknown solver method {method!r}")
    iterative = method == "iterative" or (
        method == "auto" and system.saddle is not None
    )
    if iterative:
        if system.saddle is None:
            raise ValueError("the iterative path needs a saddle-point system")
        x, res = _solve_saddle(system, tol)
    else:
        x, res = _solve_direct(A, b, tol, max_refine)
    if not res <= tol:
        raise SolverError(f"relative residual {res:.3e} above tolerance {tol:.1e}", res)
    return x


def solve_linear(system: LinearSystem, tol: float = DEFAULT_TOL, method: str = "auto"):
    """Solve and expand to full field values (``prolongation @ x + lift``)."""
    return system.expand(solve_reduced(system, tol, method=method))

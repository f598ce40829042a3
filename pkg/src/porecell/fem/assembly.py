"""Sparse assembly of P1 elliptic and P2/P1 Stokes systems with periodic constraints."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .elements import QUAD_POINTS, ElementGeometry, P2Space, p1_values, p2_space, p2_values
from .mesh import EdgeTag, PeriodicMesh

_P1_AT_Q = p1_values(QUAD_POINTS)  # (nq, 3)
_P2_AT_Q = p2_values(QUAD_POINTS)  # (nq, 6)


class Space(str, Enum):
    P1 = "P1-scalar"
    P2_VECTOR = "P2-vector"
    P1_PRESSURE = "P1-pressure"


@dataclass(frozen=True)
class DiscreteField:
    """Coefficient vector of a finite element field on ``mesh``.

    P2 vector fields store ``[x-components, y-components]`` over the P2 nodes
    (vertices first, then edge midpoints).
    """

    mesh: PeriodicMesh
    space: Space
    values: np.ndarray

    def __post_init__(self):
        n = self.mesh.n_nodes
        if self.space == Space.P2_VECTOR:
            n = 2 * (self.mesh.n_nodes + _n_edges(self.mesh))
        if self.values.shape[0] != n:
            raise ValueError(f"{self.space.value} on this mesh needs {n} values, got {self.values.shape[0]}")


def _n_edges(mesh: PeriodicMesh) -> int:
    el = mesh.elements
    e = np.sort(np.concatenate([el[:, [0, 1]], el[:, [1, 2]], el[:, [2, 0]]]), axis=1)
    return len(np.unique(e, axis=0))


@dataclass(frozen=True)
class LinearSystem:
    """A reduced linear system plus the map back to full field values.

    ``full = prolongation @ x[:n_primal] + lift``; trailing unknowns beyond
    ``n_primal`` are Lagrange multipliers.  ``saddle = (n_velocity, n_pressure)``
    marks a Stokes layout ``[u_x, u_y, p, multiplier]`` with equal velocity halves.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constraints: tuple = ()
    prolongation: sp.csr_matrix | None = None
    lift: np.ndarray | None = None
    saddle: tuple | None = None

    def __post_init__(self):
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n):
            raise ValueError("matrix must be square")
        if self.rhs.shape[0] != n:
            raise ValueError(f"rhs has {self.rhs.shape[0]} rows, matrix has {n}")
        if self.saddle is not None and sum(self.saddle) + 1 != n:
            raise ValueError("saddle block sizes do not match the matrix")

    @property
    def n_primal(self) -> int:
        return self.matrix.shape[0] if self.prolongation is None else self.prolongation.shape[1]

    def expand(self, x):
        if self.prolongation is None:
            return x
        full = self.prolongation @ x[: self.n_primal]
        if self.lift is not None:
            full = full + (self.lift if full.ndim == 1 else self.lift[:, None])
        return full


def _scatter(cells, local):
    """COO triplets for element matrices ``local[m, a, b]`` over dofs ``cells[m, a]``."""
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    return rows, cols, local.ravel()


def _coo(cells, local, n):
    r, c, v = _scatter(cells, local)
    return sp.coo_matrix((v, (r, c)), shape=(n, n)).tocsr()


def _vector(cells, local, n):
    out = np.zeros((n,) + local.shape[2:])
    np.add.at(out, cells, local)
    return out


# ---------------------------------------------------------------------------
# periodic reduction

def _wrap_keys(points, tol_digits=9):
    w = np.mod(np.round(points, tol_digits), 1.0)
    w = np.where(np.isclose(w, 1.0, atol=10.0 ** -tol_digits), 0.0, w)
    return np.round(w, tol_digits - 1)


def periodic_prolongation(points, periodic: bool, eliminate=None):
    """Map reduced unknowns to all nodes, identifying points equal modulo the lattice.

    ``eliminate`` lists nodes constrained to zero (dropped from the reduced space).
    """
    n = len(points)
    if periodic:
        keys = _wrap_keys(points)
        _, first, canon = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        canon = canon.ravel()
    else:
        canon = np.arange(n)
    keep = np.ones(canon.max() + 1, dtype=bool)
    if eliminate is not None and len(eliminate):
        keep[canon[np.asarray(eliminate)]] = False
    red = -np.ones(len(keep), dtype=int)
    red[keep] = np.arange(keep.sum())
    col = red[canon]
    rows = np.nonzero(col >= 0)[0]
    return sp.csr_matrix((np.ones(len(rows)), (rows, col[rows])), shape=(n, int(keep.sum())))


# ---------------------------------------------------------------------------
# P1 operators

def stiffness_p1(mesh: PeriodicMesh, coeff=None, geom: ElementGeometry | None = None):
    """``K_ij = int C grad(phi_j) . grad(phi_i)``; ``coeff`` is ``None``, ``(2,2)``, ``(M,2,2)`` or ``(M,nq,2,2)``."""
    geom = geom or ElementGeometry(mesh)
    G = geom.p1_gradients
    w = geom.weights
    if coeff is None:
        C = np.broadcast_to(np.eye(2), (mesh.n_elements, 2, 2)) * w.sum(axis=1)[:, None, None]
    else:
        coeff = np.asarray(coeff, dtype=float)
        if coeff.ndim == 2:
            C = coeff[None] * w.sum(axis=1)[:, None, None]
        elif coeff.ndim == 3:
            C = coeff * w.sum(axis=1)[:, None, None]
        else:
            C = np.einsum("mq,mqij->mij", w, coeff)
    local = np.einsum("mai,mij,mbj->mab", G, C, G)
    return _coo(mesh.elements, local, mesh.n_nodes)


def mass_p1(mesh: PeriodicMesh, weight=None, geom: ElementGeometry | None = None):
    """``M_ij = int w phi_i phi_j``; ``weight`` per quadrature point ``(M, nq)`` or ``None``."""
    geom = geom or ElementGeometry(mesh)
    w = geom.weights if weight is None else geom.weights * weight
    local = np.einsum("mq,qa,qb->mab", w, _P1_AT_Q, _P1_AT_Q)
    return _coo(mesh.elements, local, mesh.n_nodes)


def load_p1(mesh: PeriodicMesh, values_at_q, geom: ElementGeometry | None = None):
    """``b_i = int f phi_i`` for ``f`` given at quadrature points ``(M, nq)``."""
    geom = geom or ElementGeometry(mesh)
    local = np.einsum("mq,mq,qa->ma", geom.weights, values_at_q, _P1_AT_Q)
    return _vector(mesh.elements, local, mesh.n_nodes)


def interpolate_p1_at_q(mesh: PeriodicMesh, nodal):
    """Values of a P1 field at the quadrature points, ``(M, nq)``."""
    return np.einsum("qa,ma->mq", _P1_AT_Q, np.asarray(nodal)[mesh.elements])


def _check_spd(coeff):
    c = np.asarray(coeff)
    if not np.allclose(c, np.swapaxes(c, -1, -2), rtol=1e-10, atol=1e-12):
        raise ValueError("coefficient samples must be symmetric")
    if np.linalg.eigvalsh(c.reshape(-1, 2, 2)).min() <= 0:
        raise ValueError("coefficient samples must be positive definite")


def assemble_elliptic(mesh: PeriodicMesh, coeff, periodic: bool | None = None) -> LinearSystem:
    """Periodic cell problem ``-div(C (grad chi_i + e_i)) = 0`` with a mean-zero multiplier.

    ``coeff`` is sampled per quadrature point (``(M, nq, 2, 2)``) or constant.
    The right-hand side has one column per driver ``e_1, e_2``.
    """
    geom = ElementGeometry(mesh)
    C = np.asarray(coeff, dtype=float)
    if C.ndim == 2:
        C = np.broadcast_to(C, (mesh.n_elements, geom.weights.shape[1], 2, 2))
    _check_spd(C)
    periodic = len(mesh.periodic_pairs) > 0 if periodic is None else periodic
    K = stiffness_p1(mesh, C, geom)
    # rhs_i = -int C e_i . grad(phi)
    Ce = np.einsum("mq,mqij->mij", geom.weights, C)
    local = -np.einsum("mai,mij->maj", geom.p1_gradients, Ce)  # (M, 3, 2): column j is driver e_j
    b = _vector(mesh.elements, local, mesh.n_nodes)
    P = periodic_prolongation(mesh.nodes, periodic)
    Kr = (P.T @ K @ P).tocsr()
    mvec = P.T @ np.asarray(mass_p1(mesh, geom=geom).sum(axis=1)).ravel()
    n = Kr.shape[0]
    A = sp.bmat([[Kr, sp.csr_matrix(mvec[:, None])], [sp.csr_matrix(mvec[None, :]), None]]).tocsr()
    rhs = np.vstack([P.T @ b, np.zeros((1, b.shape[1]))])
    return LinearSystem(A, rhs, ("periodic-reduced", "mean-zero"), prolongation=P)


# ---------------------------------------------------------------------------
# Stokes

class ViscousForm(str, Enum):
    HALF_GRADIENT = "half-gradient"
    SYMMETRIC = "transformed-symmetric"


@dataclass(frozen=True)
class StokesOperators:
    """Unconstrained blocks of the transformed Stokes problem on one mesh."""

    space: P2Space
    geom: ElementGeometry
    A: sp.csr_matrix  # viscous block on [ux, uy]
    B: sp.csr_matrix  # (n_p, 2 n_v): int q J tr(grad_z v) = int q A : grad v
    F: np.ndarray  # (2 n_v, 2): int (A^T e_i) . v
    M_p: sp.csr_matrix
    z_gradients: np.ndarray  # (M, nq, 6, 2): F^-T grad_y phi
    jac_det: np.ndarray  # (M, nq)
    adj: np.ndarray  # (M, nq, 2, 2)


def stokes_operators(mesh, visc_form=ViscousForm.HALF_GRADIENT, A_field=None, J_field=None) -> StokesOperators:
    """Assemble the viscous, divergence and forcing blocks.

    ``A_field`` (adjugate) and ``J_field`` (determinant) are given per quadrature
    point; ``None`` means the identity transformation.  ``F^-1 = A / J``.
    """
    visc_form = ViscousForm(visc_form)
    space = p2_space(mesh)
    geom = ElementGeometry(mesh)
    M, nq = geom.weights.shape
    if A_field is None:
        A_field = np.broadcast_to(np.eye(2), (M, nq, 2, 2))
    if J_field is None:
        J_field = np.ones((M, nq))
    A_field = np.asarray(A_field, dtype=float)
    J_field = np.asarray(J_field, dtype=float)
    Finv = A_field / J_field[..., None, None]
    # g = F^-T grad_y(phi)
    g = np.einsum("mqji,mqkj->mqki", Finv, geom.p2_gradients)
    wJ = geom.weights * J_field
    nv = space.n
    cells = space.cells
    gg = np.einsum("mq,mqai,mqbi->mab", wJ, g, g)
    if visc_form == ViscousForm.HALF_GRADIENT:
        blk = 0.5 * gg
        local = np.zeros((M, 12, 12))
        local[:, :6, :6] = blk
        local[:, 6:, 6:] = blk
    else:
        local = np.zeros((M, 12, 12))
        for a in range(2):
            for b in range(2):
                cross = np.einsum("mq,mqk,mql->mkl", wJ, g[..., b], g[..., a])
                block = 0.5 * cross
                if a == b:
                    block = block + 0.5 * gg
                local[:, 6 * a : 6 * a + 6, 6 * b : 6 * b + 6] = block
    vcells = np.concatenate([cells, cells + nv], axis=1)
    Avis = _coo(vcells, local, 2 * nv)

    # divergence block
    div_local = np.einsum("mq,qa,mqkb->mabk", wJ, _P1_AT_Q, g).reshape(M, 3, 12)
    r = np.repeat(mesh.elements, 12, axis=1).ravel()
    c = np.tile(vcells, (1, 3)).ravel()
    B = sp.coo_matrix((div_local.ravel(), (r, c)), shape=(mesh.n_nodes, 2 * nv)).tocsr()

    # forcing A^T e_i, column i
    AT = np.swapaxes(A_field, -1, -2)
    f_local = np.einsum("mq,mqbi,qk->mbki", geom.weights, AT, _P2_AT_Q).reshape(M, 12, 2)
    Fvec = _vector(vcells, f_local, 2 * nv)
    Mp = mass_p1(mesh, geom=geom)
    return StokesOperators(space, geom, Avis, B, Fvec, Mp, g, J_field, A_field)


def assemble_stokes(mesh, visc_form=ViscousForm.HALF_GRADIENT, A_field=None, J_field=None, ops=None):
    """Periodic Stokes cell system, no-slip on the obstacle, mean-zero pressure.

    Unknowns are ``[velocity (reduced), pressure (reduced), multiplier]``; the
    right-hand side has one column per unit forcing ``A^T e_i``.
    """
    ops = ops or stokes_operators(mesh, visc_form, A_field, J_field)
    space = ops.space
    no_slip = space.obstacle_dofs()
    if len(no_slip) == 0:
        raise ValueError("Stokes cell problem needs an obstacle boundary for the no-slip condition")
    periodic = len(mesh.periodic_pairs) > 0
    Pv1 = periodic_prolongation(space.points, periodic, eliminate=no_slip)
    Pv = sp.block_diag([Pv1, Pv1]).tocsr()
    Pp = periodic_prolongation(mesh.nodes, periodic)
    Ar = (Pv.T @ ops.A @ Pv).tocsr()
    Br = (Pp.T @ ops.B @ Pv).tocsr()
    mp = Pp.T @ np.asarray(ops.M_p.sum(axis=1)).ravel()
    K = sp.bmat(
        [
            [Ar, -Br.T, None],
            [-Br, None, sp.csr_matrix(mp[:, None])],
            [None, sp.csr_matrix(mp[None, :]), None],
        ]
    ).tocsr()
    rhs = np.vstack([Pv.T @ ops.F, np.zeros((Br.shape[0] + 1, 2))])
    P = sp.block_diag([Pv, Pp]).tocsr()
    system = LinearSystem(
        K,
        rhs,
        ("periodic-reduced", "no-slip", "mean-zero-pressure"),
        prolongation=P,
        saddle=(Ar.shape[0], Br.shape[0]),
    )
    return system, ops

from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from porecell.fem.assembly import (
    _P2_AT_Q,
    LinearSystem,
    ViscousForm,
    assemble_elliptic,
    assemble_stokes,
    load_p1,
    mass_p1,
    periodic_prolongation,
    stiffness_p1,
)
from porecell.fem.elements import QUAD_POINTS, ElementGeometry, p1_values
from porecell.fem.mesh import gen_cell_mesh, gen_full_cell_mesh
from porecell.fem.solve import SolverError, relative_residual, solve_linear, solve_reduced

# ---------------------------------------------------------------------------
# P1 operators


def test_full_square_corrector_vanishes():
    mesh = gen_full_cell_mesh(8)
    system = assemble_elliptic(mesh, np.eye(2))
    chi = solve_linear(system)
    assert np.abs(chi).max() <= 1e-12


def test_mass_and_stiffness_properties():
    mesh = gen_cell_mesh(0.2, 8)
    M = mass_p1(mesh)
    K = stiffness_p1(mesh, np.array([[2.0, 0.5], [0.5, 1.0]]))
    assert M.sum() == pytest.approx(mesh.area(), rel=1e-13)
    assert abs(M - M.T).max() <= 1e-16
    assert abs(K - K.T).max() <= 1e-14
    # constants are in the kernel of the stiffness matrix
    assert np.abs(K @ np.ones(mesh.n_nodes)).max() <= 1e-12


@pytest.mark.parametrize(
    "coeff",
    [np.array([[1.0, 0.2], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, -1.0]])],
)
def test_elliptic_rejects_non_spd(coeff):
    with pytest.raises(ValueError):
        assemble_elliptic(gen_full_cell_mesh(4), coeff)


def test_periodic_elliptic_mms_second_order():
    """``-lap u = 8 pi^2 u`` on the periodic square with ``u = sin(2 pi x) sin(2 pi y)``."""

    def u_exact(x):
        return np.sin(2 * np.pi * x[..., 0]) * np.sin(2 * np.pi * x[..., 1])

    errs = []
    for n in (8, 16, 32):
        mesh = gen_full_cell_mesh(n)
        g = ElementGeometry(mesh)
        P = periodic_prolongation(mesh.nodes, True)
        K = P.T @ stiffness_p1(mesh, geom=g) @ P
        b = P.T @ load_p1(mesh, 8 * np.pi**2 * u_exact(g.points), geom=g)
        m = P.T @ np.asarray(mass_p1(mesh, geom=g).sum(axis=1)).ravel()
        A = sp.bmat([[K, sp.csr_matrix(m[:, None])], [sp.csr_matrix(m[None, :]), None]]).tocsr()
        system = LinearSystem(A, np.append(b, 0.0), prolongation=P)
        u = solve_linear(system)
        uq = np.einsum("qa,ma->mq", p1_values(QUAD_POINTS), u[mesh.elements])
        errs.append(np.sqrt(np.sum(g.weights * (uq - u_exact(g.points)) ** 2)))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= 1.9)


# ---------------------------------------------------------------------------
# Stokes

R_HOLE, B_OUT = 0.25, 0.45


def _G(u, k):
    """``G(u) = (u - R^2)^2 (b^2 - u)^3`` on ``[R^2, b^2]`` and its derivatives."""
    a = u - R_HOLE**2
    b = np.clip(B_OUT**2 - u, 0.0, None)
    vals = ((a * a * b**3), (2 * a * b**3 - 3 * a * a * b * b), (2 * b**3 - 12 * a * b * b + 6 * a * a * b))[k]
    return np.where(a > 0, vals, 0.0)


def stokes_exact(x):
    """Divergence-free ``w = phi(r) (d_y, -d_x)`` with ``phi = G(r^2)``, zero on the hole.

    Returns ``w`` and ``f = -lap(w)/2 + grad p`` for ``p = cos(2 pi x) + cos(2 pi y)``.
    """
    d = x - 0.5
    r2 = np.sum(d**2, axis=-1)
    r = np.sqrt(r2)
    phi, g1, g2 = _G(r2, 0), _G(r2, 1), _G(r2, 2)
    dphi = 2 * r * g1
    d2phi = 4 * r2 * g2 + 2 * g1
    lap = d2phi + 3 * dphi / np.where(r > 0, r, 1.0)
    w = np.stack([phi * d[..., 1], -phi * d[..., 0]], axis=-1)
    lap_w = np.stack([lap * d[..., 1], -lap * d[..., 0]], axis=-1)
    grad_p = -2 * np.pi * np.stack([np.sin(2 * np.pi * x[..., 0]), np.sin(2 * np.pi * x[..., 1])], axis=-1)
    return w, -0.5 * lap_w + grad_p


def _stokes_velocity_error(n):
    mesh = gen_cell_mesh(R_HOLE, n)
    system, ops = assemble_stokes(mesh)
    nv = ops.space.n
    w, f = stokes_exact(ops.geom.points)
    local = np.einsum("mq,mqc,qa->mca", ops.geom.weights, f, _P2_AT_Q)
    load = np.zeros((2, nv))
    for c in range(2):
        np.add.at(load[c], ops.space.cells, local[:, c])
    n_vel = system.saddle[0]
    Pv = system.prolongation[: 2 * nv, :n_vel]
    rhs = np.zeros(system.matrix.shape[0])
    rhs[:n_vel] = Pv.T @ load.ravel()
    W = system.expand(solve_reduced(replace(system, rhs=rhs)))[: 2 * nv]
    wh = np.stack([W[:nv][ops.space.cells] @ _P2_AT_Q.T, W[nv:][ops.space.cells] @ _P2_AT_Q.T], axis=-1)
    return float(np.sqrt(np.sum(ops.geom.weights[..., None] * (wh - w) ** 2)))


def test_stokes_mms_velocity_order():
    errs = [_stokes_velocity_error(n) for n in (8, 16, 32)]
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders >= 2.5), orders


def test_stokes_inf_sup_bounded_below():
    betas = []
    for n in (8, 12, 16):
        mesh = gen_cell_mesh(R_HOLE, n)
        system, ops = assemble_stokes(mesh)
        nvr, npr = system.saddle
        K = system.matrix.toarray()
        A, B = K[:nvr, :nvr], -K[nvr : nvr + npr, :nvr]
        Pp = periodic_prolongation(mesh.nodes, True)
        Mp = (Pp.T @ ops.M_p @ Pp).toarray()
        ev = np.sort(sla.eigh(B @ np.linalg.solve(A, B.T), Mp, eigvals_only=True))
        # the constant pressure spans the kernel; the next eigenvalue is beta^2
        assert abs(ev[0]) <= 1e-10
        betas.append(ev[1])
    assert min(betas) >= 0.5
    assert betas[-1] >= 0.9 * betas[0]


def test_stokes_needs_obstacle():
    with pytest.raises(ValueError):
        assemble_stokes(gen_full_cell_mesh(4))


def test_symmetric_and_half_gradient_forms_agree():
    mesh = gen_cell_mesh(R_HOLE, 16)
    K = {}
    for form in ViscousForm:
        system, ops = assemble_stokes(mesh, form)
        W = system.expand(solve_reduced(system))[: 2 * ops.space.n]
        K[form] = ops.F.T @ W
    rel = np.linalg.norm(K[ViscousForm.SYMMETRIC] - K[ViscousForm.HALF_GRADIENT]) / np.linalg.norm(
        K[ViscousForm.HALF_GRADIENT]
    )
    assert rel <= 0.01


def test_identity_fields_give_plain_stokes():
    mesh = gen_cell_mesh(0.2, 8)
    g = ElementGeometry(mesh)
    M, nq = g.weights.shape
    plain, _ = assemble_stokes(mesh, ViscousForm.SYMMETRIC)
    ident, _ = assemble_stokes(mesh, ViscousForm.SYMMETRIC, np.broadcast_to(np.eye(2), (M, nq, 2, 2)), np.ones((M, nq)))
    assert abs(plain.matrix - ident.matrix).max() == 0.0
    np.testing.assert_array_equal(plain.rhs, ident.rhs)


# ---------------------------------------------------------------------------
# solver


def test_solver_identity_and_small_system():
    I = LinearSystem(sp.identity(5, format="csr"), np.arange(5.0))
    np.testing.assert_array_equal(solve_reduced(I), np.arange(5.0))
    A = sp.csr_matrix([[4.0, 1.0], [1.0, 3.0]])
    x = solve_reduced(LinearSystem(A, np.array([1.0, 2.0])))
    np.testing.assert_allclose(x, [1 / 11, 7 / 11], rtol=1e-14)


def test_solver_matches_dense_oracle():
    rng = np.random.default_rng(0)
    Q = rng.standard_normal((100, 100))
    A = Q @ Q.T + 100 * np.eye(100)
    b = rng.standard_normal(100)
    x = solve_reduced(LinearSystem(sp.csr_matrix(A), b))
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-10, atol=1e-12)
    assert relative_residual(sp.csr_matrix(A), x, b) <= 1e-10


def test_solver_rejects_singular_and_non_finite():
    with pytest.raises(SolverError):
        solve_reduced(LinearSystem(sp.csr_matrix(np.zeros((3, 3))), np.ones(3)))
    A = sp.identity(2, format="csr")
    with pytest.raises(SolverError):
        solve_reduced(LinearSystem(A, np.array([1.0, np.nan])))


def test_iterative_and_direct_paths_agree():
    system, _ = assemble_stokes(gen_cell_mesh(0.2, 8))
    xi = solve_reduced(system, method="iterative")
    xd = solve_reduced(system, method="direct")
    n = system.saddle[0]
    np.testing.assert_allclose(xi[:n], xd[:n], atol=1e-9 * np.abs(xd[:n]).max())
    with pytest.raises(ValueError):
        solve_reduced(LinearSystem(sp.identity(2, format="csr"), np.ones(2)), method="iterative")

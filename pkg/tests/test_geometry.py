import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from porecell.geometry import (
    CellTransform,
    CutoffProfile,
    cutoff_eval,
    piola_residual,
    porosity,
    porosity_of_radius,
    psi,
    psi_inverse,
    radial_determinant,
    rhs_identity_residual,
    smooth_step,
    tensors_at,
)

M = np.array([0.5, 0.5])
R_MIN, R_MAX = 0.1, 0.25


def transform(R, D=None):
    return CellTransform(R, R_MIN, R_MAX, diffusion=np.eye(2) if D is None else D)


def annulus_points(n, rng, r_lo=R_MAX, r_hi=0.5):
    r = rng.uniform(r_lo, r_hi, n)
    a = rng.uniform(0, 2 * np.pi, n)
    return M + np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def fd_jacobian(t, y, h=1e-5):
    cols = [(psi(t, y + h * e) - psi(t, y - h * e)) / (2 * h) for e in np.eye(2)]
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# cutoff


def test_cutoff_plateau_and_support():
    prof = CutoffProfile(0.25, 0.375)
    assert cutoff_eval(prof, 0.25) == 1.0
    assert cutoff_eval(prof, 0.1) == 1.0
    assert cutoff_eval(prof, 0.40) == 0.0
    assert cutoff_eval(prof, 0.375) == 0.0


def test_cutoff_midpoint_matches_independent_formula():
    a, b, s = 0.25, 0.375, 0.3125
    tau = (s - a) / (b - a)
    p, q = np.exp(-1 / (1 - tau)), np.exp(-1 / tau)
    expected = p / (p + q)
    val = float(cutoff_eval(CutoffProfile(a, b), s))
    assert 0.0 < val < 1.0
    assert val == pytest.approx(expected, abs=1e-15)
    assert val == pytest.approx(0.5, abs=1e-15)


def test_cutoff_strictly_decreasing_and_derivative():
    prof = CutoffProfile.for_radius(R_MAX)
    assert prof.b == pytest.approx((R_MAX + 0.5) / 2)
    # exp(-1/t) flattens below double precision near the ends, so test the bulk
    s = np.linspace(prof.a + 0.05 * prof.width, prof.b - 0.05 * prof.width, 2001)
    assert np.all(np.diff(prof(s)) < 0)
    assert np.all(prof.derivative(s) < 0)
    h = 1e-7
    fd = (prof(s + h) - prof(s - h)) / (2 * h)
    assert np.max(np.abs(fd - prof.derivative(s))) < 1e-6


@pytest.mark.parametrize("a,b", [(0.0, 0.3), (0.3, 0.2), (0.2, 0.5)])
def test_cutoff_rejects_bad_interval(a, b):
    with pytest.raises(ValueError):
        CutoffProfile(a, b)


def test_smooth_step_limits():
    assert smooth_step(-1.0) == 1.0 and smooth_step(0.0) == 1.0
    assert smooth_step(1.0) == 0.0 and smooth_step(2.0) == 0.0


# ---------------------------------------------------------------------------
# transform


def test_transform_rejects_bad_radii():
    with pytest.raises(ValueError):
        CellTransform(0.3, 0.1, 0.25)
    with pytest.raises(ValueError):
        CellTransform(0.2, 0.1, 0.5)
    with pytest.raises(ValueError):
        CellTransform(0.2, 0.1, 0.25, diffusion=np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_psi_identity_at_R_max():
    rng = np.random.default_rng(1)
    y = annulus_points(200, rng)
    assert np.array_equal(psi(transform(R_MAX), y), y)


@pytest.mark.parametrize("R", [0.1, 0.15, 0.2])
def test_psi_boundary_correspondence(R):
    t = transform(R)
    for e in np.eye(2):
        np.testing.assert_allclose(psi(t, M + R_MAX * e), M + R * e, atol=1e-15)
        np.testing.assert_allclose(psi_inverse(t, M + R * e), M + R_MAX * e, atol=1e-12)


def test_psi_identity_outside_support():
    t = transform(0.12)
    rng = np.random.default_rng(2)
    y = annulus_points(200, rng, r_lo=t.cutoff.b, r_hi=0.7)
    np.testing.assert_array_equal(psi(t, y), y)
    np.testing.assert_array_equal(psi_inverse(t, y), y)


def test_psi_rejects_points_inside_obstacle():
    with pytest.raises(ValueError):
        psi(transform(0.2), M + np.array([0.1, 0.0]))
    with pytest.raises(ValueError):
        psi_inverse(transform(0.2), M + np.array([0.1, 0.0]))


def test_round_trip_random():
    rng = np.random.default_rng(3)
    worst = 0.0
    for R in rng.uniform(R_MIN, R_MAX, 10):
        t = transform(R)
        y = annulus_points(100, rng)
        worst = max(worst, np.abs(psi_inverse(t, psi(t, y)) - y).max())
    assert worst <= 1e-10


@settings(max_examples=50, deadline=None)
@given(R=st.floats(R_MIN, R_MAX), r=st.floats(R_MAX, 0.49), a=st.floats(0, 2 * np.pi))
def test_round_trip_property(R, r, a):
    t = transform(R)
    y = M + r * np.array([np.cos(a), np.sin(a)])
    assert np.abs(psi_inverse(t, psi(t, y)) - y).max() <= 1e-10


@settings(max_examples=30, deadline=None)
@given(R=st.floats(R_MIN, R_MAX))
def test_alpha_monotone(R):
    t = transform(R)
    r = np.linspace(R_MAX, t.cutoff.b, 4001)
    assert np.all(t.alpha_prime(r) > 0)
    assert np.all(np.diff(t.alpha(r)) > 0)


# ---------------------------------------------------------------------------
# tensors


def test_tensors_identity_cases():
    rng = np.random.default_rng(4)
    D = np.array([[2.0, 0.3], [0.3, 1.0]])
    y = annulus_points(50, rng)
    ts = tensors_at(transform(R_MAX, D), y)
    np.testing.assert_allclose(ts.F, np.broadcast_to(np.eye(2), ts.F.shape), atol=1e-15)
    np.testing.assert_allclose(ts.J, 1.0, atol=1e-15)
    np.testing.assert_allclose(ts.A, np.broadcast_to(np.eye(2), ts.A.shape), atol=1e-15)
    np.testing.assert_allclose(ts.D0, np.broadcast_to(D, ts.D0.shape), atol=1e-15)
    t = transform(0.15)
    y = annulus_points(50, rng, r_lo=t.cutoff.b, r_hi=0.5)
    ts = tensors_at(t, y)
    np.testing.assert_allclose(ts.F, np.broadcast_to(np.eye(2), ts.F.shape), atol=1e-15)
    np.testing.assert_allclose(ts.J, 1.0, atol=1e-15)


def test_jacobian_matches_finite_differences():
    t = transform(0.15)
    y = M + np.array([0.3, 0.0])
    assert np.abs(fd_jacobian(t, y) - tensors_at(t, y).F).max() <= 1e-6


def test_tensor_algebra():
    rng = np.random.default_rng(5)
    D = np.array([[1.5, -0.2], [-0.2, 0.7]])
    for R in (0.1, 0.17, 0.23):
        t = transform(R, D)
        y = annulus_points(300, rng)
        ts = tensors_at(t, y)
        np.testing.assert_allclose(np.linalg.det(ts.F), ts.J, rtol=1e-13)
        AF = ts.A @ ts.F
        np.testing.assert_allclose(AF, ts.J[:, None, None] * np.eye(2), atol=1e-13)
        np.testing.assert_allclose(ts.D0, np.swapaxes(ts.D0, -1, -2), atol=1e-14)
        assert np.linalg.eigvalsh(ts.D0).min() > 0
        assert np.abs(np.linalg.det(ts.F) - radial_determinant(t, y)).max() <= 1e-12


def test_jacobian_floor_on_dense_sample():
    # 128 x 128 sample of the reference cell, 11 radii
    g = (np.arange(128) + 0.5) / 128
    X, Y = np.meshgrid(g, g)
    y = np.stack([X.ravel(), Y.ravel()], 1)
    y = y[np.linalg.norm(y - M, axis=1) >= R_MAX]
    floor = min(float(tensors_at(transform(R), y).J.min()) for R in np.linspace(R_MIN, R_MAX, 11))
    assert floor > 0
    # radial map: the floor is attained on the hole, J = alpha' * alpha / r
    assert floor == pytest.approx(R_MIN / R_MAX, rel=0.05)


# ---------------------------------------------------------------------------
# identities


def test_piola_residual_zero_at_R_max():
    rng = np.random.default_rng(6)
    y = annulus_points(100, rng, r_lo=R_MAX + 1e-4)
    assert np.abs(piola_residual(transform(R_MAX), y)).max() == 0.0


def test_piola_residual_point_example():
    r = piola_residual(transform(0.15), M + np.array([0.28, 0.05]), h=1e-5)
    assert np.linalg.norm(r) <= 1e-6


def test_piola_residual_is_second_order():
    t = transform(0.12)
    y = M + np.array([0.29, 0.03])
    r1 = np.linalg.norm(piola_residual(t, y, h=1e-3))
    r2 = np.linalg.norm(piola_residual(t, y, h=5e-4))
    assert np.log2(r1 / r2) == pytest.approx(2.0, abs=0.1)


def test_piola_detects_perturbation():
    y = M + np.array([0.3, 0.1])
    r = piola_residual(transform(R_MAX), y, perturbation=1e-3)
    # div of eps * diag(y) is eps * (1, 1)
    np.testing.assert_allclose(r, [1e-3, 1e-3], rtol=1e-6)


def test_rhs_identity_examples():
    t = transform(0.2)
    y = M + np.array([0.3, 0.1])
    assert np.linalg.norm(rhs_identity_residual(t, y, np.array([1.0, -2.0]), 1e-5)) <= 1e-6
    assert np.array_equal(rhs_identity_residual(t, y, np.zeros(2)), np.zeros(2))
    assert np.abs(rhs_identity_residual(transform(R_MAX), y, np.array([1.0, -2.0]))).max() == 0.0


def test_rhs_identity_sweep():
    rng = np.random.default_rng(7)
    y = annulus_points(1000, rng, r_lo=R_MAX + 1e-4)
    worst = 0.0
    for R in (R_MIN, 0.5 * (R_MIN + R_MAX), R_MAX):
        for xi in (np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, -2.0])):
            worst = max(worst, np.linalg.norm(rhs_identity_residual(transform(R), y, xi), axis=1).max())
    assert worst <= 1e-6


# ---------------------------------------------------------------------------
# porosity


def test_porosity_closed_form():
    theta, dtheta, surface = porosity(transform(0.25))
    assert theta == pytest.approx(0.8036504592, abs=1e-10)
    assert surface == pytest.approx(np.pi / 2)
    for R in np.linspace(R_MIN, R_MAX, 7):
        th, dth, s = porosity(transform(R))
        assert dth + s == 0.0
        assert (th, dth) == porosity_of_radius(R)

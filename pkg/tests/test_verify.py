import numpy as np

from porecell.verify import (
    N_SWEEP,
    Check,
    check_darcy,
    check_jacobian_and_coercivity,
    check_piola,
    check_rhs_identity,
    check_table,
    format_report,
    sweep_points,
    verification_table,
)


def test_check_relations():
    assert Check("a", 1.0, 2.0).passed
    assert not Check("a", 3.0, 2.0).passed
    assert Check("a", 0.0, 0.0, "==").passed
    assert not Check("a", float("nan"), 1.0).passed
    assert Check("a", 1.0, float("inf"), "<").passed
    assert Check("a", 1.0, 0.5, ">", note="x").row() == ["a", "1.000000e+00", "> 5.000000e-01", "pass"]


def test_sweep_covers_transformation_support():
    y = sweep_points()
    r = np.linalg.norm(y - 0.5, axis=1)
    assert len(y) == N_SWEEP
    np.testing.assert_allclose([r.min(), r.max()], [0.25, 0.5], atol=1e-15)


def test_piola_check_reacts_to_perturbation():
    assert check_piola(perturbation=1e-3).value >= 1e-3


def test_geometry_checks_pass():
    assert check_rhs_identity().passed
    assert all(c.passed for c in check_jacobian_and_coercivity())


def test_table_and_darcy_checks_pass():
    table = verification_table("fast")
    rows = check_table(table) + check_darcy(table)
    assert [r.name for r in rows if not r.passed] == []


def test_format_report():
    text = format_report([Check("a", 1.0, 2.0)], header="# h\n")
    assert text.splitlines() == ["# h", "check,value,threshold,pass", "a,1.000000e+00,<= 2.000000e+00,pass"]

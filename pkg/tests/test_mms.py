import numpy as np
import pytest

from porecell.mms import ConvergenceTable, mms_coupled, mms_heat, mms_heat_time, mms_transport, run_case


def test_convergence_table_orders():
    t = ConvergenceTable("demo", "h", [0.5, 0.25, 0.125], [4.0, 1.0, 0.25])
    np.testing.assert_allclose(t.orders, [2.0, 2.0])
    assert t.min_order == pytest.approx(2.0)
    lines = t.format().splitlines()
    assert lines[1] == "h,error,order" and len(lines) == 5


def test_heat_spatial_order():
    assert mms_heat().min_order >= 1.9


def test_transport_spatial_order():
    assert mms_transport().min_order >= 1.9


def test_heat_temporal_order():
    assert mms_heat_time().min_order >= 0.9


@pytest.mark.slow
def test_coupled_temporal_order():
    assert mms_coupled().min_order >= 0.9


def test_unknown_case():
    with pytest.raises(ValueError):
        run_case("stokes")

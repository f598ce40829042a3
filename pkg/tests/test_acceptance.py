"""Acceptance suite: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py`` (the lines appear in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from porecell.mms import mms_coupled, mms_darcy, mms_heat
from porecell.verify import (
    LEVELS,
    check_confinement,
    check_darcy,
    check_equivalence,
    check_isotropy,
    check_jacobian_and_coercivity,
    check_piola,
    check_rhs_identity,
    check_table,
    verification_table,
)

ROOT = Path(__file__).resolve().parents[1]
FULL = LEVELS["full"]
RESULTS = {}


def record(number, title, rows, extra=True, detail=""):
    """Store the criterion line and return whether it passed."""
    ok = bool(extra) and all(r.passed for r in rows)
    worst = "; ".join(f"{r.name}={r.value:.3e} ({r.relation} {r.threshold:.3g})" for r in rows if not r.passed)
    text = detail or worst or ", ".join(f"{r.name}={r.value:.3e}" for r in rows[:3])
    RESULTS[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {text}"
    print(RESULTS[number])
    return ok


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def table():
    return verification_table("full")


@pytest.fixture(scope="module")
def equivalence_rows():
    return check_equivalence(FULL)


def test_criterion_01_piola_identity():
    row, dt = timed(check_piola)
    assert record(1, "Piola identity", [row], dt < 5, f"max residual {row.value:.3e} (<= 1e-06), {dt:.1f}s (< 5s)")


def test_criterion_02_rhs_identity():
    row, dt = timed(check_rhs_identity)
    assert record(2, "right-hand-side identity", [row], dt < 5, f"max residual {row.value:.3e} (<= 1e-06), {dt:.1f}s (< 5s)")


def test_criterion_03_jacobian_and_coercivity():
    rows = check_jacobian_and_coercivity()
    v = {r.name: r.value for r in rows}
    detail = (
        f"c_J={v['jacobian_floor']:.4g} (change {v['jacobian_floor_stability']:.2e}), "
        f"alpha={v['coercivity']:.4g} (change {v['coercivity_stability']:.2e})"
    )
    assert record(3, "Jacobian floor and coercivity", rows, detail=detail)


def test_criterion_04_isotropy():
    rows, dt = timed(check_isotropy, FULL)
    worst = max(r.value for r in rows if "reduction" not in r.name)
    least = min(r.value for r in rows if "reduction" in r.name)
    detail = f"max anisotropy {worst:.2e} at h=1/64 (<= 1e-2), min reduction {least:.1f}x (>= 2), {dt:.0f}s (< 180s)"
    assert record(4, "isotropy of D* and K*", rows, dt < 180, detail)


def test_criterion_05_dual_permeability(table):
    rows = [r for r in check_table(table) if r.name == "dual_permeability"]
    detail = f"max gap {rows[0].value:.2e} over {len(table.R)} radii (<= {rows[0].threshold:.0e})"
    assert record(5, "dual permeability formulas", rows, detail=detail)


def test_criterion_06_formulation_equivalence(equivalence_rows):
    rows = [r for r in equivalence_rows if r.name.startswith("equivalence")]
    worst = max(r.value for r in rows if "shrinks" not in r.name)
    assert record(6, "fixed vs moving cell", rows, detail=f"max gap {worst:.2e} at h=1/64 (<= 2e-2), shrinking at 1/128")


def test_criterion_07_corrector_correspondence(equivalence_rows):
    rows = [r for r in equivalence_rows if r.name.startswith("corrector")]
    worst = max(r.value for r in rows if "shrinks" not in r.name)
    assert record(7, "corrector correspondence", rows, detail=f"max mismatch {worst:.2e} at h=1/64 (<= 2e-2), shrinking at 1/128")


def test_criterion_08_voigt_bound(table):
    rows = [r for r in check_table(table) if r.name.startswith("voigt")]
    assert record(8, "Voigt bound", rows, detail=f"min margin {rows[0].value:.3e}, interior {rows[1].value:.3e} (> 0)")


def test_criterion_09_darcy_exact_cases(table):
    rows = check_darcy(table)
    v = {r.name: r.value for r in rows}
    detail = (
        f"|p - p_b|={v['darcy_constant_pressure_p']:.1e}, |v|={v['darcy_constant_pressure_v']:.1e}, "
        f"constant force error {v['darcy_constant_force']:.2e} (<= 5e-3)"
    )
    assert record(9, "Darcy exact cases", rows, detail=detail)


def test_criterion_10_mms_orders():
    t0 = time.perf_counter()
    darcy, heat, coupled = mms_darcy(), mms_heat(), mms_coupled()
    dt = time.perf_counter() - t0
    ok = darcy.min_order >= 1.9 and heat.min_order >= 1.9 and coupled.min_order >= 0.9 and dt < 300
    detail = (
        f"Darcy {darcy.min_order:.3f}, heat {heat.min_order:.3f} (>= 1.9), "
        f"coupled in time {coupled.min_order:.3f} (>= 0.9), {dt:.0f}s (< 300s)"
    )
    assert record(10, "manufactured-solution orders", [], ok, detail)


def test_criterion_11_radius_confinement():
    rows = check_confinement()
    v = {r.name: r.value for r in rows}
    detail = (
        f"R in [{v['ode_R_min']:.4f}, {v['ode_R_max']:.4f}], clamps {v['ode_clamps']:.0f}, "
        f"u in [{v['u_nonnegative']:.3g}, {v['u_max_recorded']:.4g}]"
    )
    assert record(11, "radius confinement", rows, detail=detail)


def test_criterion_12_determinism(tmp_path):
    config = json.loads((ROOT / "configs" / "example.json").read_text())
    path = tmp_path / "example.json"
    path.write_text(json.dumps(config))
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        cmd = [sys.executable, "-m", "porecell", "--cache-dir", str(tmp_path / f"cache{k}"), "solve", str(path), "--output", str(out)]
        r = subprocess.run(cmd, capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        outs.append({f.name: f.read_bytes() for f in sorted(out.iterdir())})
    same = outs[0].keys() == outs[1].keys() and all(outs[0][k] == outs[1][k] for k in outs[0])
    detail = f"{len(outs[0])} files, {'bit-identical' if same else 'DIFFERENT'} across two solves"
    assert record(12, "determinism", [], same and len(outs[0]) > 0, detail)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

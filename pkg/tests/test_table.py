import numpy as np
import pytest

from porecell.cell_problems import (
    CoefficientTable,
    TableConfig,
    build_table,
    cache_paths,
    compute_table,
    formulation_mesh,
    interpolate,
    read_table,
    sample_radii,
    solve_diffusion_cell,
    solve_stokes_cell,
    write_table,
)
from porecell.fem.mesh import gen_cell_mesh
from porecell.geometry import porosity_of_radius

R_MIN, R_MAX = 0.1, 0.25


@pytest.fixture(scope="module")
def small_config():
    return TableConfig(R_MIN, R_MAX, n_samples=5, cell_resolution=8)


@pytest.fixture(scope="module")
def small_table(small_config):
    return compute_table(small_config)


def test_sample_radii_endpoints_and_order():
    R = sample_radii(R_MIN, R_MAX, 5)
    assert R[0] == R_MIN and R[-1] == R_MAX
    assert np.all(np.diff(R) > 0)
    # Chebyshev-Lobatto points are symmetric about the midpoint
    np.testing.assert_allclose(R + R[::-1], R_MIN + R_MAX, atol=1e-15)


def test_table_rows_and_theta(small_table):
    assert small_table.samples.shape == (5, 6)
    theta, _ = porosity_of_radius(small_table.R)
    np.testing.assert_array_equal(small_table.column("theta"), theta)
    assert small_table.monotone
    assert np.all(small_table.details["dual_gap"] <= 1e-9)


def test_write_read_round_trip(tmp_path, small_table, small_config):
    csv, meta = write_table(small_table, tmp_path / "coefficients.csv")
    assert csv.read_text().startswith("# porecell ")
    assert meta.name == "coefficients.csv.meta"
    again = read_table(csv, small_config)
    np.testing.assert_array_equal(again.samples, small_table.samples)
    for k, v in small_table.details.items():
        np.testing.assert_array_equal(again.details[k], v)
    other = TableConfig(R_MIN, R_MAX, n_samples=5, cell_resolution=10)
    with pytest.raises(ValueError):
        read_table(csv, other)


def test_cache_hit_is_bit_identical(tmp_path, small_config):
    t1, hit1 = build_table(small_config, cache_dir=tmp_path)
    csv, meta = cache_paths(small_config, tmp_path)
    before = csv.read_bytes(), meta.read_bytes()
    t2, hit2 = build_table(small_config, cache_dir=tmp_path)
    assert (hit1, hit2) == (False, True)
    np.testing.assert_array_equal(t1.samples, t2.samples)
    assert (csv.read_bytes(), meta.read_bytes()) == before


def test_corrupted_cache_is_recomputed(tmp_path, small_config):
    table, _ = build_table(small_config, cache_dir=tmp_path)
    csv, _ = cache_paths(small_config, tmp_path)
    good = csv.read_bytes()
    lines = csv.read_text().splitlines()
    fields = lines[2].split(",")
    fields[2] = repr(float(fields[2]) * 1.5)
    lines[2] = ",".join(fields)
    csv.write_text("\n".join(lines) + "\n")
    again, hit = build_table(small_config, cache_dir=tmp_path)
    assert not hit
    np.testing.assert_array_equal(again.samples, table.samples)
    assert csv.read_bytes() == good
    assert not list(tmp_path.glob("*.tmp"))


def test_truncated_cache_is_recomputed(tmp_path, small_config):
    build_table(small_config, cache_dir=tmp_path)
    csv, meta = cache_paths(small_config, tmp_path)
    meta.write_text(meta.read_text()[:40])
    _, hit = build_table(small_config, cache_dir=tmp_path)
    assert not hit
    _, hit = build_table(small_config, cache_dir=tmp_path)
    assert hit


def test_interpolation_exact_at_samples_and_monotone(small_table):
    R = small_table.R
    theta, d, k, dtheta = interpolate(small_table, R)
    np.testing.assert_allclose(d, small_table.column("dstar"), rtol=1e-14)
    np.testing.assert_allclose(k, small_table.column("kstar"), rtol=1e-14)
    np.testing.assert_array_equal(dtheta, -2 * np.pi * R)
    mid = 0.5 * (R[:-1] + R[1:])
    _, dm, km, _ = interpolate(small_table, mid)
    dcol, kcol = small_table.column("dstar"), small_table.column("kstar")
    assert np.all((dm < dcol[:-1]) & (dm > dcol[1:]))
    assert np.all((km < kcol[:-1]) & (km > kcol[1:]))


@pytest.mark.parametrize("R", [R_MIN - 1e-3, R_MAX + 1e-3, np.nan])
def test_interpolation_rejects_out_of_range(small_table, R):
    with pytest.raises(ValueError):
        interpolate(small_table, R)


@pytest.mark.slow
def test_interpolation_matches_direct_solve_off_sample():
    cfg = TableConfig(R_MIN, R_MAX, n_samples=17, cell_resolution=16)
    table = compute_table(cfg)
    R = 0.5 * (table.R[5] + table.R[6])
    t = cfg.transform(R)
    mesh = formulation_mesh(gen_cell_mesh(R_MAX, 16), t, "moving")
    d = np.trace(solve_diffusion_cell(t, mesh).Dstar) / 2
    k = np.trace(solve_stokes_cell(t, mesh).Kstar_energy) / 2
    _, di, ki, _ = interpolate(table, R)
    assert abs(di - d) / d <= 0.01
    assert abs(ki - k) / k <= 0.01


def test_two_sample_table():
    cfg = TableConfig(0.2, 0.21, n_samples=2, cell_resolution=8)
    table = compute_table(cfg)
    assert table.samples.shape == (2, 6)
    d = table.column("dstar")
    assert abs(d[0] - d[1]) / d[0] <= 0.05
    _, dm, _, _ = interpolate(table, 0.205)
    assert min(d) <= dm <= max(d)


def test_table_validation():
    with pytest.raises(ValueError):
        TableConfig(R_MIN, R_MAX, n_samples=1)
    with pytest.raises(ValueError):
        TableConfig(0.3, 0.25)
    cfg = TableConfig(R_MIN, R_MAX, n_samples=2)
    theta, _ = porosity_of_radius(np.array([R_MIN, R_MAX]))
    rows = np.array([[R_MIN, theta[0], 1, 1, 0, 0], [R_MAX, theta[1] + 1e-6, 1, 1, 0, 0]])
    with pytest.raises(ValueError):
        CoefficientTable(rows, cfg)
    with pytest.raises(ValueError):
        CoefficientTable(rows[::-1], cfg)

"""Scenario configuration: JSON schema, defaults, validation and problem assembly.

A config is a JSON object with the sections ``domain``, ``macro_mesh``, ``time``,
``microstructure``, ``physics``, ``output`` and ``seed``.  Missing entries take
the defaults of :data:`DEFAULTS`.  Physics functions are ``{"name", "params"}``
specs resolved against the registries in :mod:`porecell.physics`.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import physics as ph

DEFAULTS = {
    "domain": [0.0, 0.0, 1.0, 1.0],
    "macro_mesh": [16, 16],
    "time": {"T": 1.0, "dt": 0.01, "snapshot_every": 10},
    "microstructure": {
        "R_min": 0.1,
        "R_max": 0.25,
        "R_init": {"name": "constant", "params": {"value": 0.2}},
        "delta": 0.02,
        "table": {"n_samples": 17, "cell_resolution": 32, "formulation": "moving"},
    },
    "physics": {
        "D": [[1.0, 0.0], [0.0, 1.0]],
        "rho": 1.0,
        "f": {"name": "zero", "params": {}},
        "g": {"name": "zero", "params": {}},
        "h0": {"name": "zero", "params": {}},
        "p_b": {"name": "zero", "params": {}},
        "u_init": {"name": "zero", "params": {}},
    },
    "output": {"dir": "output", "formats": ["csv"]},
    "seed": 0,
}

_SECTIONS = set(DEFAULTS)


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violated rule."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


def _merge(base, override, path, errors):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            errors.append(f"unknown key {path}{k}")
            continue
        if isinstance(base[k], dict) and base[k] and not _is_spec(base[k]):
            if not isinstance(v, dict):
                errors.append(f"{path}{k} must be an object")
                continue
            out[k] = _merge(base[k], v, f"{path}{k}.", errors)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _is_spec(d):
    return isinstance(d, dict) and "name" in d


def _norm_spec(spec):
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict):
        return spec
    return {"name": spec.get("name"), "params": dict(spec.get("params", {}))}


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated, normalised scenario (the full dict with defaults filled in)."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)

    def hash(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def R_min(self) -> float:
        return float(self.data["microstructure"]["R_min"])

    @property
    def R_max(self) -> float:
        return float(self.data["microstructure"]["R_max"])

    def table_config(self):
        from .cell_problems import TableConfig

        m = self.data["microstructure"]
        tab = m["table"]
        return TableConfig(
            R_min=self.R_min,
            R_max=self.R_max,
            D=self.data["physics"]["D"],
            n_samples=int(tab["n_samples"]),
            cell_resolution=int(tab["cell_resolution"]),
            formulation=tab["formulation"],
        )


def config_from_dict(raw: dict) -> ScenarioConfig:
    """Merge with defaults, normalise and validate; raises :class:`ConfigError` with all problems."""
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError(["configuration must be a JSON object"])
    data = _merge(DEFAULTS, raw, "", errors)
    m, p = data["microstructure"], data["physics"]
    m["R_init"] = _norm_spec(m["R_init"])
    for k in ("f", "g", "h0", "p_b", "u_init"):
        p[k] = _norm_spec(p[k])
    _validate(data, errors)
    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(data)


def parse_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file {path} not found"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: malformed JSON ({exc})"]) from None
    return config_from_dict(raw)


def _num(errors, where, v, positive=False, integer=False):
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)
    if ok and integer:
        ok = float(v).is_integer()
    if ok and positive:
        ok = v > 0
    if not ok:
        errors.append(f"{where} must be a {'positive ' if positive else ''}{'integer' if integer else 'number'}, got {v!r}")
    return ok


def _validate(data, errors):
    dom = data["domain"]
    if not (isinstance(dom, list) and len(dom) == 4 and all(_num([], "", v) for v in dom)):
        errors.append("domain must be [ax, ay, bx, by]")
    elif not (dom[2] > dom[0] and dom[3] > dom[1]):
        errors.append("domain must satisfy bx > ax and by > ay")
    mm = data["macro_mesh"]
    if not (isinstance(mm, list) and len(mm) == 2 and all(_num([], "", v, integer=True) for v in mm) and min(mm) >= 2):
        errors.append("macro_mesh must be [nx, ny] with nx, ny >= 2")

    tm = data["time"]
    T_ok = _num(errors, "time.T", tm["T"], positive=True)
    dt_ok = _num(errors, "time.dt", tm["dt"], positive=True)
    _num(errors, "time.snapshot_every", tm["snapshot_every"], positive=True, integer=True)
    if T_ok and dt_ok:
        n = tm["T"] / tm["dt"]
        if abs(n - round(n)) > 1e-9 * n:
            errors.append("time.T must be an integer multiple of time.dt")

    m = data["microstructure"]
    lo, hi = m["R_min"], m["R_max"]
    radii_ok = _num(errors, "microstructure.R_min", lo) & _num(errors, "microstructure.R_max", hi)
    if radii_ok and not (0 < lo < hi < 0.5):
        errors.append(f"need 0 < R_min < R_max < 1/2, got R_min={lo}, R_max={hi}")
        radii_ok = False
    delta_ok = _num(errors, "microstructure.delta", m["delta"], positive=True)
    tab = m["table"]
    for k in ("n_samples", "cell_resolution"):
        if k not in tab:
            errors.append(f"microstructure.table.{k} missing")
    if "n_samples" in tab and _num(errors, "microstructure.table.n_samples", tab["n_samples"], integer=True):
        if tab["n_samples"] < 2:
            errors.append("microstructure.table.n_samples must be >= 2")
    if "cell_resolution" in tab and _num(errors, "microstructure.table.cell_resolution", tab["cell_resolution"], integer=True):
        if tab["cell_resolution"] < 4 or tab["cell_resolution"] % 2:
            errors.append("microstructure.table.cell_resolution must be an even integer >= 4")
    if tab.get("formulation") not in ("fixed", "moving"):
        errors.append("microstructure.table.formulation must be 'fixed' or 'moving'")

    p = data["physics"]
    D = np.asarray(p["D"], dtype=float) if _is_matrix(p["D"]) else None
    if D is None or not np.allclose(D, D.T) or np.linalg.eigvalsh(D).min() <= 0:
        errors.append("physics.D must be a symmetric positive definite 2x2 matrix")
    _num(errors, "physics.rho", p["rho"])

    built = {}
    for key, builder in (("f", ph.build_f), ("h0", ph.build_vector), ("p_b", ph.build_scalar), ("u_init", ph.build_scalar)):
        try:
            built[key] = builder(p[key])
        except (ValueError, TypeError, AttributeError) as exc:
            errors.append(f"physics.{key}: {exc}")
    try:
        R_init = ph.build_scalar(m["R_init"])
    except (ValueError, TypeError, AttributeError) as exc:
        errors.append(f"microstructure.R_init: {exc}")
        R_init = None
    if radii_ok and delta_ok:
        try:
            g = ph.build_g(p["g"], lo, hi)
        except (ValueError, TypeError, AttributeError) as exc:
            errors.append(f"physics.g: {exc}")
            g = None
        if g is not None:
            bad = ph.g_sign_violations(g, lo, hi, m["delta"])
            if bad:
                u, R, val = bad[0]
                errors.append(
                    f"physics.g violates the sign condition (g >= 0 near R_min, g <= 0 near R_max) "
                    f"at {len(bad)} sample points, e.g. g(u={u:.3g}, R={R:.4g}) = {val:.3g}"
                )
            if dt_ok and g.C_g > 0 and tm["dt"] > m["delta"] / g.C_g:
                errors.append(
                    f"time.dt = {tm['dt']} exceeds delta / C_g = {m['delta'] / g.C_g:.4g}; "
                    "the radius update could overshoot [R_min, R_max]"
                )
        if R_init is not None and dom and len(dom) == 4 and not any("domain" in e for e in errors):
            xs = np.stack(np.meshgrid(np.linspace(dom[0], dom[2], 21), np.linspace(dom[1], dom[3], 21)), -1).reshape(-1, 2)
            R0 = R_init(0.0, xs)
            if np.any(R0 < lo) or np.any(R0 > hi):
                errors.append(f"microstructure.R_init leaves [R_min, R_max]: range [{R0.min():.4g}, {R0.max():.4g}]")
    if "u_init" in built and dom and len(dom) == 4 and not any("domain" in e for e in errors):
        xs = np.stack(np.meshgrid(np.linspace(dom[0], dom[2], 21), np.linspace(dom[1], dom[3], 21)), -1).reshape(-1, 2)
        if np.any(built["u_init"](0.0, xs) < 0):
            errors.append("physics.u_init must be non-negative")

    out = data["output"]
    if not isinstance(out.get("dir"), str):
        errors.append("output.dir must be a string")
    fm = out.get("formats")
    if not isinstance(fm, list) or not set(fm) <= {"csv", "vtk"}:
        errors.append("output.formats must be a list drawn from ['csv', 'vtk']")
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        errors.append("seed must be an integer")


def _is_matrix(v):
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        return False
    return a.shape == (2, 2) and np.all(np.isfinite(a))


def build_physics(config: ScenarioConfig) -> ph.PhysicsFunctions:
    p = config["physics"]
    return ph.PhysicsFunctions(
        f=ph.build_f(p["f"]),
        g=ph.build_g(p["g"], config.R_min, config.R_max),
        h0=ph.build_vector(p["h0"]),
        p_b=ph.build_scalar(p["p_b"]),
        rho=float(p["rho"]),
        D=np.asarray(p["D"], dtype=float),
    )


PECLET_LIMIT = 2.0


def check_peclet(problem, limit=PECLET_LIMIT) -> float:
    """Reject scenarios whose initial element Peclet number exceeds ``limit``.

    The transport step uses unstabilised Galerkin advection, which oscillates
    for ``Pe_h > 2``; refine ``macro_mesh`` or reduce the forcing.
    """
    from .macro_solver import initial_peclet

    pe = initial_peclet(problem)
    if pe > limit:
        raise ConfigError([f"initial element Peclet number {pe:.3g} exceeds {limit}; refine macro_mesh"])
    return pe


def build_problem(config: ScenarioConfig, table=None, cache_dir=None):
    """Macro mesh, physics and coefficient table for a scenario."""
    from .cell_problems import build_table
    from .fem.mesh import gen_macro_mesh
    from .macro_solver import MacroProblem, TableCoefficients

    if table is None:
        table, _ = build_table(config.table_config(), cache_dir=cache_dir)
    nx, ny = config["macro_mesh"]
    tm = config["time"]
    return MacroProblem(
        mesh=gen_macro_mesh(config["domain"], int(nx), int(ny)),
        physics=build_physics(config),
        coeffs=TableCoefficients(table),
        R_min=config.R_min,
        R_max=config.R_max,
        T=float(tm["T"]),
        dt=float(tm["dt"]),
        u_init=ph.build_scalar(config["physics"]["u_init"]),
        R_init=ph.build_scalar(config["microstructure"]["R_init"]),
        snapshot_every=int(tm["snapshot_every"]),
    )

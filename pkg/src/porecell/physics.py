"""Physics functions of the macroscopic model and the closed registry that builds them.

Every function is selected by a ``{"name": ..., "params": {...}}`` spec.  Field
functions take ``(t, x)`` with ``x`` of shape ``(N, 2)``; the reaction rate
``f(u)`` and the surface rate ``g(u, R)`` are vectorised over nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import smooth_step


@dataclass(frozen=True)
class SurfaceRate:
    """``g(u, R)`` with its bound ``C_g`` and Lipschitz constant ``L_g`` on the admissible range."""

    fn: object
    C_g: float
    L_g: float
    name: str = ""

    def __call__(self, u, R):
        return self.fn(np.asarray(u, dtype=float), np.asarray(R, dtype=float))


@dataclass(frozen=True)
class PhysicsFunctions:
    """Data of the macroscopic model.

    ``f`` reaction rate, ``g`` surface rate, ``h0`` body force ``(t, x) -> (N, 2)``,
    ``p_b`` boundary pressure ``(t, x) -> (N,)``, ``rho`` solid density factor,
    ``D`` molecular diffusion matrix.
    """

    f: object
    g: SurfaceRate
    h0: object
    p_b: object
    rho: float = 1.0
    D: np.ndarray = field(default_factory=lambda: np.eye(2))


# ---------------------------------------------------------------------------
# reaction rates f(u)


def _f_constant(value=0.0):
    return lambda u: np.full(np.shape(u), float(value))


def _f_linear(a=0.0, b=0.0):
    return lambda u: a + b * np.asarray(u, dtype=float)


F_REGISTRY = {"zero": lambda: _f_constant(0.0), "constant": _f_constant, "linear": _f_linear}


# ---------------------------------------------------------------------------
# surface rates g(u, R)


def _g_constant(R_min, R_max, value=0.0):
    c = float(value)
    return SurfaceRate(lambda u, R: np.full(np.broadcast(u, R).shape, c), abs(c), 0.0, "constant")


def _g_linear(R_min, R_max, a=0.0, b=0.0, c=0.0, u_max=1.0):
    """``a + b u + c R``; bounds are reported on ``u in [0, u_max]``, ``R`` in range."""
    corners = [a + b * u + c * R for u in (0.0, u_max) for R in (R_min, R_max)]
    return SurfaceRate(lambda u, R: a + b * u + c * R, max(abs(v) for v in corners), abs(b) + abs(c), "linear")


def taper_growth(R, R_max, delta):
    """1 for ``R <= R_max - 2 delta``, 0 for ``R >= R_max - delta``, smooth in between."""
    return smooth_step((np.asarray(R, dtype=float) - (R_max - 2 * delta)) / delta)


def taper_dissolution(R, R_min, delta):
    """1 for ``R >= R_min + 2 delta``, 0 for ``R <= R_min + delta``, smooth in between."""
    return smooth_step(((R_min + 2 * delta) - np.asarray(R, dtype=float)) / delta)


def _tapered(rate, R, R_min, R_max, delta):
    return np.where(rate > 0, rate * taper_growth(R, R_max, delta), rate * taper_dissolution(R, R_min, delta))


def _check_delta(R_min, R_max, delta):
    if not 0 < delta <= 0.25 * (R_max - R_min):
        raise ValueError("taper width delta must lie in (0, (R_max - R_min)/4]")


def _g_tapered(R_min, R_max, k_p=1.0, k_d=0.0, delta=0.02, u_cap=10.0):
    """Precipitation/dissolution rate ``k_p min(u+, u_cap) - k_d`` with tapers near the endpoints.

    Growth is switched off smoothly over ``[R_max - 2 delta, R_max - delta]`` and
    dissolution over ``[R_min + delta, R_min + 2 delta]``, so ``g >= 0`` for
    ``R <= R_min + delta`` and ``g <= 0`` for ``R >= R_max - delta`` by construction.
    An explicit step of length at most ``delta`` then cannot leave ``[R_min, R_max]``.
    """
    _check_delta(R_min, R_max, delta)

    def fn(u, R):
        return _tapered(k_p * np.clip(u, 0.0, u_cap) - k_d, R, R_min, R_max, delta)

    C_g = max(abs(k_p * u_cap - k_d), abs(k_d))
    # the tapers have slope at most 2/delta
    L_g = abs(k_p) + 2.0 * C_g / delta
    return SurfaceRate(fn, C_g, L_g, "tapered-reaction")


def _g_relaxation(R_min, R_max, kappa=1.0, R_mid=None):
    """``kappa (R_mid - R)``: relaxes every radius to ``R_mid``."""
    R_mid = 0.5 * (R_min + R_max) if R_mid is None else float(R_mid)
    C_g = abs(kappa) * max(R_mid - R_min, R_max - R_mid)
    return SurfaceRate(lambda u, R: kappa * (R_mid - R) + 0.0 * u, C_g, abs(kappa), "relaxation")


def _g_mms(R_min, R_max, c=0.05, delta=0.02, u_cap=10.0):
    """``c min(u, u_cap)``, tapered like the reaction rate (linear in ``u`` on the plateau)."""
    _check_delta(R_min, R_max, delta)

    def fn(u, R):
        return _tapered(c * np.clip(u, -u_cap, u_cap), R, R_min, R_max, delta)

    C_g = abs(c) * u_cap
    return SurfaceRate(fn, C_g, abs(c) + 2 * C_g / delta, "mms-linear")


G_REGISTRY = {
    "zero": lambda R_min, R_max: _g_constant(R_min, R_max, 0.0),
    "constant": _g_constant,
    "linear": _g_linear,
    "tapered-reaction": _g_tapered,
    "relaxation": _g_relaxation,
    "mms-linear": _g_mms,
}


# ---------------------------------------------------------------------------
# scalar and vector fields of (t, x)


def _s_constant(value=0.0):
    return lambda t, x: np.full(len(x), float(value))


def _s_linear(a=0.0, bx=0.0, by=0.0):
    return lambda t, x: a + bx * x[:, 0] + by * x[:, 1]


def _s_trig(amplitude=1.0, kx=1, ky=1, offset=0.0, decay=0.0, domain=(0.0, 0.0, 1.0, 1.0)):
    """``offset + amplitude e^(-decay t) sin(kx pi X) sin(ky pi Y)`` in domain-relative coordinates."""
    ax, ay, bx, by = domain

    def fn(t, x):
        X = (x[:, 0] - ax) / (bx - ax)
        Y = (x[:, 1] - ay) / (by - ay)
        return offset + amplitude * np.exp(-decay * t) * np.sin(kx * np.pi * X) * np.sin(ky * np.pi * Y)

    return fn


SCALAR_REGISTRY = {
    "zero": lambda: _s_constant(0.0),
    "constant": _s_constant,
    "linear": _s_linear,
    "trig": _s_trig,
}


def _v_constant(value=(0.0, 0.0)):
    v = np.asarray(value, dtype=float)
    return lambda t, x: np.broadcast_to(v, (len(x), 2)).copy()


def _v_trig(amplitude=(1.0, 1.0), k=1):
    a = np.asarray(amplitude, dtype=float)

    def fn(t, x):
        s = np.stack([np.sin(k * np.pi * x[:, 1]), np.sin(k * np.pi * x[:, 0])], axis=1)
        return a * s

    return fn


VECTOR_REGISTRY = {"zero": lambda: _v_constant((0.0, 0.0)), "constant": _v_constant, "trig": _v_trig}


def _build(registry, spec, *args, kind="function"):
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name")
    if name not in registry:
        raise ValueError(f"unknown {kind} {name!r}; choose from {sorted(registry)}")
    params = dict(spec.get("params", {}))
    try:
        return registry[name](*args, **params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {kind} {name!r}: {exc}") from exc


def build_f(spec):
    return _build(F_REGISTRY, spec, kind="reaction rate f")


def build_g(spec, R_min, R_max) -> SurfaceRate:
    return _build(G_REGISTRY, spec, R_min, R_max, kind="surface rate g")


def build_scalar(spec):
    return _build(SCALAR_REGISTRY, spec, kind="scalar field")


def build_vector(spec):
    return _build(VECTOR_REGISTRY, spec, kind="vector field")


# ---------------------------------------------------------------------------
# sign checks


def g_sign_violations(g: SurfaceRate, R_min, R_max, delta=0.02, u_range=(0.0, 10.0), n=41):
    """Sample points breaking ``g >= 0`` on ``R <= R_min + delta`` or ``g <= 0`` on ``R >= R_max - delta``.

    Bands extend ``delta`` beyond the endpoints as well.  Returns a list of ``(u, R, g)``.
    """
    u = np.linspace(*u_range, n)
    bad = []
    low = np.linspace(R_min - delta, R_min + delta, n)
    high = np.linspace(R_max - delta, R_max + delta, n)
    for Rs, sign in ((low, 1.0), (high, -1.0)):
        U, R = np.meshgrid(u, Rs)
        vals = g(U, R)
        mask = sign * vals < 0
        bad += [(float(a), float(b), float(c)) for a, b, c in zip(U[mask], R[mask], vals[mask])]
    return bad


def nonnegativity_violations(f, g: SurfaceRate, R_min, R_max, n=41, u_min=-10.0):
    """Samples with ``u < 0`` breaking ``f(u) u^- <= |u^-|^2`` or ``g(u, R) u^- >= 0``."""
    u = np.linspace(u_min, -1e-8, n)
    um = np.minimum(u, 0.0)
    out = [("f", float(a)) for a in u[f(u) * um > um**2 + 1e-14]]
    U, R = np.meshgrid(u, np.linspace(R_min, R_max, n))
    gv = g(U, R) * np.minimum(U, 0.0)
    out += [("g", float(a), float(b)) for a, b in zip(U[gv < -1e-14], R[gv < -1e-14])]
    return out

"""Radius-parameterised cell transformation and its Jacobian tensors.

The reference cell is the unit square minus the closed ball of radius
``R_max`` around the midpoint ``m``.  ``psi(R; .)`` shrinks that ball to
radius ``R`` by a radial displacement that is cut off smoothly before the
cell boundary, so the map is the identity near the periodic faces.

All functions are vectorised over a trailing coordinate axis: points have
shape ``(..., n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_CENTER = (0.5, 0.5)


def _bump_phi(t):
    """exp(-1/t) for t > 0, else 0 (vectorised, no warnings)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(tau):
    """C-infinity step: 1 for tau <= 0, 0 for tau >= 1, strictly decreasing between."""
    tau = np.asarray(tau, dtype=float)
    p = _bump_phi(1.0 - tau)
    q = _bump_phi(tau)
    return p / (p + q)


def smooth_step_derivative(tau):
    tau = np.asarray(tau, dtype=float)
    out = np.zeros_like(tau)
    inside = (tau > 0) & (tau < 1)
    t = tau[inside]
    p = np.exp(-1.0 / (1.0 - t))
    q = np.exp(-1.0 / t)
    out[inside] = -p * q * (1.0 / (1.0 - t) ** 2 + 1.0 / t**2) / (p + q) ** 2
    return out


@dataclass(frozen=True)
class CutoffProfile:
    """Smooth radial cutoff: 1 on ``[0, a]``, 0 on ``[b, inf)``."""

    a: float
    b: float
    kind: str = "smooth-bump"

    def __post_init__(self):
        if not (0.0 < self.a < self.b < 0.5):
            raise ValueError(f"cutoff needs 0 < a < b < 0.5, got a={self.a}, b={self.b}")

    @classmethod
    def for_radius(cls, r_max: float) -> "CutoffProfile":
        return cls(a=r_max, b=0.5 * (r_max + 0.5))

    @property
    def width(self) -> float:
        return self.b - self.a

    def __call__(self, s):
        return smooth_step((np.asarray(s, dtype=float) - self.a) / self.width)

    def derivative(self, s):
        return smooth_step_derivative((np.asarray(s, dtype=float) - self.a) / self.width) / self.width


def cutoff_eval(profile: CutoffProfile, s):
    return profile(s)


@dataclass(frozen=True)
class TensorSample:
    """Jacobian ``F``, determinant ``J``, adjugate ``A = J F^-1`` and ``D0 = J F^-1 D F^-T``."""

    F: np.ndarray
    J: np.ndarray
    A: np.ndarray
    D0: np.ndarray


@dataclass(frozen=True)
class CellTransform:
    """The diffeomorphism taking the reference perforated cell onto the cell with hole radius ``R``.

    Parameters
    ----------
    R : float
        Target obstacle radius.
    R_min, R_max : float
        Admissible radius range; the reference hole has radius ``R_max``.
    center : tuple
        Obstacle midpoint, the cell centre by default.
    diffusion : array_like
        Symmetric positive definite molecular diffusion matrix.
    """

    R: float
    R_min: float
    R_max: float
    center: tuple = _CENTER
    diffusion: np.ndarray = field(default_factory=lambda: np.eye(2))
    cutoff: CutoffProfile | None = None

    def __post_init__(self):
        if not (0.0 < self.R_min <= self.R <= self.R_max < 0.5):
            raise ValueError(
                f"need 0 < R_min <= R <= R_max < 0.5, got {self.R_min}, {self.R}, {self.R_max}"
            )
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        D = np.array(self.diffusion, dtype=float)
        if D.shape != (len(self.center),) * 2 or not np.allclose(D, D.T):
            raise ValueError("diffusion must be a symmetric square matrix matching the dimension")
        if np.linalg.eigvalsh(D).min() <= 0:
            raise ValueError("diffusion must be positive definite")
        D.setflags(write=False)
        object.__setattr__(self, "diffusion", D)
        if self.cutoff is None:
            object.__setattr__(self, "cutoff", CutoffProfile.for_radius(self.R_max))
        elif not np.isclose(self.cutoff.a, self.R_max):
            raise ValueError("cutoff plateau must end at R_max")

    def with_radius(self, R: float) -> "CellTransform":
        return CellTransform(R, self.R_min, self.R_max, self.center, self.diffusion, self.cutoff)

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def shift(self) -> float:
        """``R - R_max`` (non-positive)."""
        return self.R - self.R_max

    # radial profile r -> alpha(r) and its derivative
    def alpha(self, r):
        r = np.asarray(r, dtype=float)
        return r + self.shift * self.cutoff(r)

    def alpha_prime(self, r):
        r = np.asarray(r, dtype=float)
        return 1.0 + self.shift * self.cutoff.derivative(r)

    def _polar(self, y):
        y = np.asarray(y, dtype=float)
        d = y - np.asarray(self.center)
        r = np.sqrt(np.sum(d * d, axis=-1))
        return d, r


def _check_outside(t: CellTransform, r, radius, tol, what):
    if np.any(r < radius - tol):
        raise ValueError(f"{what} lies inside the obstacle of radius {radius}")


def psi(t: CellTransform, y, tol: float = 1e-12):
    """Map reference points ``y`` (outside the ball of radius ``R_max``) to the cell of radius ``R``."""
    d, r = t._polar(y)
    _check_outside(t, r, t.R_max, tol, "point")
    return _psi_unchecked(t, d, r)


def _psi_unchecked(t, d, r):
    scale = np.ones_like(r)
    nz = r > 0
    scale[nz] = t.alpha(r[nz]) / r[nz]
    return np.asarray(t.center) + d * scale[..., None]


def psi_raw(t: CellTransform, y):
    """``psi`` without the domain check; valid for any ``y != m`` where ``alpha > 0``."""
    d, r = t._polar(y)
    return _psi_unchecked(t, d, r)


def _alpha_inverse(t: CellTransform, rho, tol=1e-14, max_iter=200):
    """Solve ``alpha(r) = rho`` for ``r >= R_max`` by safeguarded Newton (bisection fallback)."""
    rho = np.asarray(rho, dtype=float)
    out = rho.copy()
    active = rho < t.cutoff.b
    if not np.any(active):
        return out
    target = rho[active]
    lo = np.full_like(target, t.R_max)
    hi = np.full_like(target, t.cutoff.b)
    x = np.clip(target - t.shift, lo, hi)
    for _ in range(max_iter):
        f = t.alpha(x) - target
        done = np.abs(f) <= tol * max(1.0, float(np.max(np.abs(target))))
        if np.all(done):
            break
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        step = x - f / t.alpha_prime(x)
        bad = (step <= lo) | (step >= hi) | ~np.isfinite(step)
        x = np.where(done, x, np.where(bad, 0.5 * (lo + hi), step))
    out[active] = x
    return out


def psi_inverse(t: CellTransform, z, tol: float = 1e-12):
    """Inverse of :func:`psi`; ``z`` must lie outside the ball of radius ``R``."""
    d, rho = t._polar(z)
    _check_outside(t, rho, t.R, tol, "point")
    r = _alpha_inverse(t, np.maximum(rho, t.R))
    scale = np.ones_like(rho)
    nz = rho > 0
    scale[nz] = r[nz] / rho[nz]
    return np.asarray(t.center) + d * scale[..., None]


def tensors_at(t: CellTransform, y) -> TensorSample:
    """Closed-form ``F, J, A, D0`` at points ``y`` (``y != m``).

    ``F = alpha'(r) e(x)e + (alpha(r)/r)(I - e(x)e)`` with ``e`` the radial unit vector.
    Points slightly inside the reference ball (quadrature points on a polygonal
    hole) are accepted; the radial formula extends smoothly there.
    """
    d, r = t._polar(y)
    if np.any(r <= 0):
        raise ValueError("tensors are undefined at the obstacle centre")
    n = d.shape[-1]
    e = d / r[..., None]
    a = t.alpha(r)
    ap = t.alpha_prime(r)
    tang = a / r
    P = e[..., :, None] * e[..., None, :]
    eye = np.eye(n)
    F = ap[..., None, None] * P + tang[..., None, None] * (eye - P)
    J = ap * tang ** (n - 1)
    Finv = (1.0 / ap)[..., None, None] * P + (1.0 / tang)[..., None, None] * (eye - P)
    A = J[..., None, None] * Finv
    D0 = J[..., None, None] * (Finv @ t.diffusion @ np.swapaxes(Finv, -1, -2))
    return TensorSample(F=F, J=J, A=A, D0=D0)


def radial_determinant(t: CellTransform, y):
    """``alpha'(r) (alpha(r)/r)^(n-1)``, the closed-form Jacobian determinant."""
    _, r = t._polar(y)
    n = np.asarray(y).shape[-1]
    return t.alpha_prime(r) * (t.alpha(r) / r) ** (n - 1)


def _adjugate(t, y, perturbation=0.0):
    A = tensors_at(t, y).A
    if perturbation:
        # test hook: a non-solenoidal disturbance A + eps * diag(y1, y2)
        y = np.asarray(y, dtype=float)
        A = A + perturbation * (y[..., :, None] * np.eye(y.shape[-1]))
    return A


def piola_residual(t: CellTransform, y, h: float = 1e-5, perturbation: float = 0.0):
    """Central-difference divergence of the columns of ``A``: ``sum_j d_j A_ji``.

    ``perturbation`` adds ``eps * diag(y)`` to ``A`` and exists to check that the
    residual actually detects a broken adjugate.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    res = np.zeros(y.shape)
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        dA = (_adjugate(t, y + step, perturbation) - _adjugate(t, y - step, perturbation)) / (2 * h)
        res += dA[..., j, :]
    return res


def rhs_identity_residual(t: CellTransform, y, xi, h: float = 1e-5):
    """``J xi - A^T grad((psi(y) - y).xi) - A^T xi`` with the gradient by central differences."""
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    n = y.shape[-1]
    grad = np.zeros(y.shape)
    for j in range(n):
        step = np.zeros(n)
        step[j] = h
        fp = np.sum((psi_raw(t, y + step) - (y + step)) * xi, axis=-1)
        fm = np.sum((psi_raw(t, y - step) - (y - step)) * xi, axis=-1)
        grad[..., j] = (fp - fm) / (2 * h)
    ts = tensors_at(t, y)
    AT = np.swapaxes(ts.A, -1, -2)
    return ts.J[..., None] * xi - np.einsum("...ij,...j->...i", AT, grad + xi)


def porosity(t: CellTransform):
    """Fluid volume fraction, its radius derivative, and the obstacle perimeter (2D)."""
    if t.dim != 2:
        raise NotImplementedError("porosity is implemented for n = 2")
    R = t.R
    surface = 2.0 * np.pi * R
    return 1.0 - np.pi * R**2, -surface, surface


def porosity_of_radius(R):
    """Vectorised ``(theta, dtheta/dR)`` for 2D cells."""
    R = np.asarray(R, dtype=float)
    return 1.0 - np.pi * R**2, -2.0 * np.pi * R

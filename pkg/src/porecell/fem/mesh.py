"""Triangulations of the perforated periodic cell and of rectangular macro domains."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np


class EdgeTag(IntEnum):
    OBSTACLE = 0
    OUTER = 1
    PERIODIC_MASTER = 2
    PERIODIC_SLAVE = 3


@dataclass(frozen=True)
class PeriodicMesh:
    """Triangle mesh with tagged boundary edges and optional periodic identification.

    ``periodic_pairs`` holds ``(slave, master)`` rows whose coordinates differ by a
    single lattice vector; corner chains are resolved by :meth:`periodic_map`.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    periodic_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    hole_radius: float | None = None
    center: tuple = (0.5, 0.5)
    h: float = float("nan")

    def __post_init__(self):
        for name in ("nodes", "elements", "boundary_edges", "boundary_tags", "periodic_pairs"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self) -> float:
        return float(self.signed_areas().sum())

    def tagged_nodes(self, *tags: EdgeTag) -> np.ndarray:
        mask = np.isin(self.boundary_tags, [int(t) for t in tags])
        return np.unique(self.boundary_edges[mask])

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def periodic_map(self) -> np.ndarray:
        """Index array sending every node to its ultimate master node."""
        target = np.arange(self.n_nodes)
        if len(self.periodic_pairs):
            target[self.periodic_pairs[:, 0]] = self.periodic_pairs[:, 1]
            for _ in range(4):
                target = target[target]
        return target

    def quality(self) -> np.ndarray:
        """Shape quality ``4 sqrt(3) area / sum(edge^2)`` (1 for equilateral)."""
        p = self.nodes[self.elements]
        e2 = sum(np.sum((p[:, (i + 1) % 3] - p[:, i]) ** 2, axis=1) for i in range(3))
        return 4.0 * np.sqrt(3.0) * self.signed_areas() / e2

    def max_edge(self) -> float:
        p = self.nodes[self.elements]
        return float(max(np.linalg.norm(p[:, (i + 1) % 3] - p[:, i], axis=1).max() for i in range(3)))


def _structured_quads(n_ang: int, n_rad: int, start: int = 0):
    """Quads of a (periodic in angle) O-grid indexed ``k * n_ang + j``."""
    j = np.arange(n_ang)
    jn = (j + 1) % n_ang
    quads = []
    for k in range(n_rad):
        quads.append(np.stack([k * n_ang + j, k * n_ang + jn, (k + 1) * n_ang + jn, (k + 1) * n_ang + j], 1))
    return np.concatenate(quads) + start


def gen_cell_mesh(hole_radius: float, resolution: int, center=(0.5, 0.5)) -> PeriodicMesh:
    """O-grid triangulation of the unit cell minus a disc of radius ``hole_radius``.

    ``resolution`` is the number of angular segments per cell side (``h ~ 1/resolution``).
    Rays run from the hole to the square boundary at equal angles; radial layers
    are log-spaced so elements near the hole are close to square before splitting.
    """
    n = int(resolution)
    if not 0.0 < hole_radius < 0.5:
        raise ValueError("hole_radius must lie in (0, 0.5)")
    if n < 2 or n % 2:
        raise ValueError("resolution must be an even integer >= 2")
    h = 1.0 / n
    if 0.5 - hole_radius < 2 * h:
        raise ValueError(
            f"resolution {n} too coarse for the annulus gap 0.5 - {hole_radius} (< 2h = {2 * h:.4g})"
        )
    m = np.asarray(center, dtype=float)
    n_ang = 4 * n
    dtheta = 2 * np.pi / n_ang
    theta = -0.25 * np.pi + dtheta * np.arange(n_ang)
    c, s = np.cos(theta), np.sin(theta)
    reach = 0.5 / np.maximum(np.abs(c), np.abs(s))
    n_rad = max(2, int(np.ceil(np.log(0.5 / hole_radius) / dtheta)))
    tau = np.arange(n_rad + 1) / n_rad
    radii = hole_radius * (reach[None, :] / hole_radius) ** tau[:, None]
    xy = np.stack([radii * c[None, :], radii * s[None, :]], axis=-1) + m

    # outer ring exactly on the square, snapped so opposite sides coincide
    outer = xy[-1]
    outer = np.where(np.abs(outer - 0.0) < 1e-12, 0.0, outer)
    outer = np.where(np.abs(outer - 1.0) < 1e-12, 1.0, outer)
    # hole ring exactly on the circle
    xy[0] = m + hole_radius * np.stack([c, s], 1)
    # pair sides: by symmetry of the ray angles, side points match up to round-off
    on_left = np.isclose(outer[:, 0], 0.0)
    on_right = np.isclose(outer[:, 0], 1.0)
    on_bottom = np.isclose(outer[:, 1], 0.0)
    on_top = np.isclose(outer[:, 1], 1.0)
    outer[on_left, 0] = 0.0
    outer[on_right, 0] = 1.0
    outer[on_bottom, 1] = 0.0
    outer[on_top, 1] = 1.0
    xy[-1] = outer
    nodes = xy.reshape(-1, 2).copy()
    outer_ids = n_rad * n_ang + np.arange(n_ang)

    pairs = []
    # the (1, 1) corner is paired once, through the right side
    for slave_mask, master_mask, axis in ((on_right, on_left, 1), (on_top & ~on_right, on_bottom, 0)):
        slaves = outer_ids[slave_mask]
        masters = outer_ids[master_mask]
        key_m = {round(float(nodes[i, axis]), 9): i for i in masters}
        for i in slaves:
            j = key_m[round(float(nodes[i, axis]), 9)]
            nodes[i, axis] = nodes[j, axis]
            pairs.append((i, j))
    pairs = np.array(pairs, dtype=int)

    quads = _structured_quads(n_ang, n_rad)
    # Quads facing the x-sides and the y-sides are split along mirrored diagonals.
    # A rotation-invariant split would make the discrete D* and K* isotropic by
    # construction and hide the discretisation error of the isotropy property.
    flip = np.tile((np.arange(n_ang) // n) % 2 == 1, n_rad)
    tris = np.concatenate(
        [
            np.where(flip[:, None], quads[:, [0, 3, 1]], quads[:, [0, 2, 1]]),
            np.where(flip[:, None], quads[:, [1, 3, 2]], quads[:, [0, 3, 2]]),
        ]
    )

    j = np.arange(n_ang)
    hole_edges = np.stack([(j + 1) % n_ang, j], 1)
    out_edges = np.stack([outer_ids[j], outer_ids[(j + 1) % n_ang]], 1)
    mid = 0.5 * (nodes[out_edges[:, 0]] + nodes[out_edges[:, 1]])
    slave_edge = np.isclose(mid[:, 0], 1.0) | np.isclose(mid[:, 1], 1.0)
    tags = np.concatenate(
        [
            np.full(n_ang, EdgeTag.OBSTACLE),
            np.where(slave_edge, EdgeTag.PERIODIC_SLAVE, EdgeTag.PERIODIC_MASTER),
        ]
    )
    mesh = PeriodicMesh(
        nodes=nodes,
        elements=tris,
        boundary_edges=np.concatenate([hole_edges, out_edges]),
        boundary_tags=tags.astype(int),
        periodic_pairs=pairs,
        hole_radius=float(hole_radius),
        center=tuple(float(v) for v in m),
        h=h,
    )
    if np.any(mesh.signed_areas() <= 0):
        raise RuntimeError("generated cell mesh has inverted elements")
    return mesh


def gen_full_cell_mesh(resolution: int) -> PeriodicMesh:
    """Unperforated periodic unit square (structured, alternating diagonals)."""
    mesh = gen_macro_mesh((0.0, 0.0, 1.0, 1.0), resolution, resolution)
    n = resolution
    idx = lambda i, j: j * (n + 1) + i  # noqa: E731
    pairs = [(idx(n, j), idx(0, j)) for j in range(n + 1)]
    pairs += [(idx(i, n), idx(i, 0)) for i in range(n)]
    mid = mesh.nodes[mesh.boundary_edges].mean(axis=1)
    slave = np.isclose(mid[:, 0], 1.0) | np.isclose(mid[:, 1], 1.0)
    tags = np.where(slave, EdgeTag.PERIODIC_SLAVE, EdgeTag.PERIODIC_MASTER).astype(int)
    return replace(mesh, boundary_tags=tags, periodic_pairs=np.array(pairs, dtype=int))


def gen_macro_mesh(domain, nx: int, ny: int) -> PeriodicMesh:
    """Structured triangulation of ``(ax, ay, bx, by)`` with alternating diagonals.

    Each of the ``nx * ny`` rectangles is split into two triangles; the diagonal
    direction alternates in a checkerboard so the pattern has no preferred direction.
    """
    if nx < 2 or ny < 2:
        raise ValueError("nx and ny must be >= 2")
    ax, ay, bx, by = map(float, domain)
    if not (bx > ax and by > ay):
        raise ValueError("degenerate rectangle")
    xs = np.linspace(ax, bx, nx + 1)
    ys = np.linspace(ay, by, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.stack([X.ravel(), Y.ravel()], 1)
    idx = lambda i, j: j * (nx + 1) + i  # noqa: E731
    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    edges = [(idx(i, 0), idx(i + 1, 0)) for i in range(nx)]
    edges += [(idx(nx, j), idx(nx, j + 1)) for j in range(ny)]
    edges += [(idx(i + 1, ny), idx(i, ny)) for i in range(nx)]
    edges += [(idx(0, j + 1), idx(0, j)) for j in range(ny)]
    return PeriodicMesh(
        nodes=nodes,
        elements=np.array(tris, dtype=int),
        boundary_edges=np.array(edges, dtype=int),
        boundary_tags=np.full(len(edges), int(EdgeTag.OUTER)),
        hole_radius=None,
        center=(0.5 * (ax + bx), 0.5 * (ay + by)),
        h=max((bx - ax) / nx, (by - ay) / ny),
    )


def map_mesh(mesh: PeriodicMesh, transform) -> PeriodicMesh:
    """Push the reference cell mesh forward by ``psi(R; .)``."""
    from ..geometry import psi

    if mesh.hole_radius is None or not np.isclose(mesh.hole_radius, transform.R_max):
        raise ValueError("map_mesh needs the reference mesh with hole radius R_max")
    if transform.R == transform.R_max:
        return mesh
    nodes = psi(transform, mesh.nodes, tol=1e-9)
    obstacle = mesh.tagged_nodes(EdgeTag.OBSTACLE)
    d = nodes[obstacle] - np.asarray(mesh.center)
    nodes[obstacle] = np.asarray(mesh.center) + transform.R * d / np.linalg.norm(d, axis=1)[:, None]
    mapped = replace(mesh, nodes=nodes, hole_radius=float(transform.R))
    if np.any(mapped.signed_areas() <= 0):
        raise RuntimeError("mapping produced a non-positive element area")
    return mapped


def save_mesh(mesh: PeriodicMesh, path) -> None:
    """Plain-text export: ``nodes N elements M``, node lines ``x y``, element lines ``i j k tag``.

    The element tag is 1 when the element touches the obstacle and 0 otherwise.
    """
    touching = np.zeros(mesh.n_elements, dtype=int)
    if mesh.hole_radius is not None:
        obst = np.zeros(mesh.n_nodes, dtype=bool)
        obst[mesh.tagged_nodes(EdgeTag.OBSTACLE)] = True
        touching = obst[mesh.elements].any(axis=1).astype(int)
    with open(path, "w") as fh:
        fh.write(f"nodes {mesh.n_nodes} elements {mesh.n_elements}\n")
        for x, y in mesh.nodes:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for (i, j, k), tag in zip(mesh.elements, touching):
            fh.write(f"{i} {j} {k} {tag}\n")


def load_mesh(path):
    """Read the plain-text format back as ``(nodes, elements, tags)``."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "nodes" or head[2] != "elements":
            raise ValueError(f"{path}: bad mesh header")
        n, m = int(head[1]), int(head[3])
        nodes = np.array([list(map(float, fh.readline().split())) for _ in range(n)])
        rows = np.array([list(map(int, fh.readline().split())) for _ in range(m)], dtype=int)
    return nodes, rows[:, :3], rows[:, 3]

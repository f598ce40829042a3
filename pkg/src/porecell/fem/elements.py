"""Reference-triangle quadrature, Lagrange P1/P2 bases and per-element geometry."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mesh import EdgeTag, PeriodicMesh

# Degree-4 six-point rule on the reference triangle (weights sum to its area 1/2).
_A1, _W1 = 0.445948490915965, 0.223381589678011
_A2, _W2 = 0.091576213509771, 0.109951743655322
QUAD_POINTS = np.array(
    [
        [_A1, _A1],
        [1 - 2 * _A1, _A1],
        [_A1, 1 - 2 * _A1],
        [_A2, _A2],
        [1 - 2 * _A2, _A2],
        [_A2, 1 - 2 * _A2],
    ]
)
QUAD_WEIGHTS = 0.5 * np.array([_W1, _W1, _W1, _W2, _W2, _W2])

# P2 local numbering: vertices 0..2, then edges (0,1), (1,2), (2,0)
P2_EDGES = ((0, 1), (1, 2), (2, 0))


def _bary(xi):
    xi = np.atleast_2d(xi)
    return np.stack([1.0 - xi[:, 0] - xi[:, 1], xi[:, 0], xi[:, 1]], axis=1)


_BARY_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p1_values(xi):
    return _bary(xi)


def p1_ref_gradients():
    return _BARY_GRAD.copy()


def p2_values(xi):
    lam = _bary(xi)
    vals = [lam[:, i] * (2 * lam[:, i] - 1) for i in range(3)]
    vals += [4 * lam[:, i] * lam[:, j] for i, j in P2_EDGES]
    return np.stack(vals, axis=1)


def p2_ref_gradients(xi):
    """Gradients of the P2 basis at ``xi``, shape ``(nq, 6, 2)``."""
    lam = _bary(xi)
    G = _BARY_GRAD
    grads = [(4 * lam[:, i] - 1)[:, None] * G[i] for i in range(3)]
    grads += [4 * (lam[:, j][:, None] * G[i] + lam[:, i][:, None] * G[j]) for i, j in P2_EDGES]
    return np.stack(grads, axis=1)


@dataclass(frozen=True)
class ElementGeometry:
    """Affine maps of all elements plus physical quadrature points and weights."""

    mesh: PeriodicMesh

    @cached_property
    def jac(self):
        p = self.mesh.nodes[self.mesh.elements]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)

    @cached_property
    def det(self):
        B = self.jac
        return B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]

    @cached_property
    def inv_t(self):
        B = self.jac
        d = self.det
        inv = np.empty_like(B)
        inv[:, 0, 0] = B[:, 1, 1] / d
        inv[:, 1, 1] = B[:, 0, 0] / d
        inv[:, 0, 1] = -B[:, 0, 1] / d
        inv[:, 1, 0] = -B[:, 1, 0] / d
        return np.swapaxes(inv, 1, 2)

    @cached_property
    def points(self):
        p0 = self.mesh.nodes[self.mesh.elements[:, 0]]
        return p0[:, None, :] + np.einsum("mij,qj->mqi", self.jac, QUAD_POINTS)

    @cached_property
    def weights(self):
        return np.abs(self.det)[:, None] * QUAD_WEIGHTS[None, :]

    @cached_property
    def p1_gradients(self):
        """Physical P1 gradients, shape ``(M, 3, 2)``."""
        return np.einsum("mij,kj->mki", self.inv_t, _BARY_GRAD)

    @cached_property
    def p2_gradients(self):
        """Physical P2 gradients at quadrature points, shape ``(M, nq, 6, 2)``."""
        return np.einsum("mij,qkj->mqki", self.inv_t, p2_ref_gradients(QUAD_POINTS))

    @cached_property
    def centroids(self):
        return self.mesh.nodes[self.mesh.elements].mean(axis=1)


@dataclass(frozen=True)
class P2Space:
    """Continuous piecewise-quadratic nodes: vertices followed by edge midpoints."""

    mesh: PeriodicMesh
    points: np.ndarray
    cells: np.ndarray
    edges: np.ndarray

    @property
    def n(self) -> int:
        return len(self.points)

    def obstacle_dofs(self) -> np.ndarray:
        mesh = self.mesh
        bedges = mesh.boundary_edges[mesh.boundary_tags == int(EdgeTag.OBSTACLE)]
        if len(bedges) == 0:
            return np.zeros(0, dtype=int)
        key = {tuple(sorted(e)): i for i, e in enumerate(map(tuple, self.edges))}
        mids = [mesh.n_nodes + key[tuple(sorted(e))] for e in map(tuple, bedges)]
        return np.unique(np.concatenate([bedges.ravel(), np.array(mids, dtype=int)]))

    def boundary_dofs(self) -> np.ndarray:
        mesh = self.mesh
        key = {tuple(sorted(e)): i for i, e in enumerate(map(tuple, self.edges))}
        mids = [mesh.n_nodes + key[tuple(sorted(e))] for e in map(tuple, mesh.boundary_edges)]
        return np.unique(np.concatenate([mesh.boundary_edges.ravel(), np.array(mids, dtype=int)]))


def p2_space(mesh: PeriodicMesh) -> P2Space:
    el = mesh.elements
    local = np.concatenate([el[:, [i, j]] for i, j in P2_EDGES])
    srt = np.sort(local, axis=1)
    edges, inv = np.unique(srt, axis=0, return_inverse=True)
    inv = inv.reshape(3, -1).T
    cells = np.concatenate([el, mesh.n_nodes + inv], axis=1)
    mids = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    return P2Space(mesh=mesh, points=np.concatenate([mesh.nodes, mids]), cells=cells, edges=edges)

"""Reference quadrature rules on segments and triangles."""
from __future__ import annotations

import numpy as np

from .mesh import Mesh

_G2 = 0.5 / np.sqrt(3.0)

# barycentric points and weights (weights sum to 1)
_RULES = {
    (1, 1): (np.array([[0.5, 0.5]]), np.array([1.0])),
    (1, 3): (np.array([[0.5 + _G2, 0.5 - _G2], [0.5 - _G2, 0.5 + _G2]]), np.array([0.5, 0.5])),
    (2, 2): (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
             np.full(3, 1 / 3)),
}


def reference_rule(dim: int, degree: int):
    if dim == 1:
        return _RULES[(1, 1) if degree <= 1 else (1, 3)]
    if degree > 2:
        raise ValueError("triangle rules above degree 2 are not provided")
    return _RULES[(2, 2)]


def cell_quadrature(mesh: Mesh, degree: int = 2):
    """Physical points (C, Q, n), weights (C, Q) and hat values (Q, n+1)."""
    bary, w = reference_rule(mesh.dim, degree)
    p = mesh.vertices[mesh.cells]                      # (C, n+1, n)
    pts = np.einsum("qk,ckd->cqd", bary, p)
    weights = mesh.cell_measures[:, None] * w[None, :]
    return pts, weights, bary


def boundary_quadrature(mesh: Mesh):
    """Boundary points (F, Q, n), weights (F, Q) and facet hat values (Q, n).

    In 1D the boundary is a set of points with counting measure.
    """
    if mesh.dim == 1:
        pts = mesh.vertices[mesh.boundary_facets]       # (F, 1, 1)
        return pts, np.ones((len(pts), 1)), np.ones((1, 1))
    bary, w = _RULES[(1, 3)]
    p = mesh.vertices[mesh.boundary_facets]            # (F, 2, 2)
    pts = np.einsum("qk,fkd->fqd", bary, p)
    weights = mesh.facet_measures[:, None] * w[None, :]
    return pts, weights, bary

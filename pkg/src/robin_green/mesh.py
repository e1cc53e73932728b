"""Simplicial meshes of intervals and polygons with tagged boundary facets.

Meshes are P1 carriers: vertices, cells (segments or triangles) and the
boundary facets (points or edges), each facet carrying an integer patch
label.  All constructors are structured and deterministic.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist


@dataclass(frozen=True)
class Mesh:
    dim: int
    vertices: np.ndarray          # (N, dim)
    cells: np.ndarray             # (C, dim+1)
    boundary_facets: np.ndarray   # (F, dim)
    boundary_patches: np.ndarray  # (F,)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("vertices", "cells", "boundary_facets", "boundary_patches"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != self.dim:
            raise ValueError("vertex array does not match dimension")
        if self.cells.shape[1] != self.dim + 1:
            raise ValueError("cells must have dim+1 vertices")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def cell_measures(self) -> np.ndarray:
        if "measures" not in self._cache:
            self._cache["measures"] = _signed_measures(self.vertices, self.cells)
        return self._cache["measures"]

    @property
    def facet_measures(self) -> np.ndarray:
        if self.dim == 1:
            return np.ones(len(self.boundary_facets))
        p = self.vertices[self.boundary_facets]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    @property
    def measure(self) -> float:
        return float(math.fsum(self.cell_measures))

    @property
    def boundary_measure(self) -> float:
        return float(math.fsum(self.facet_measures))

    @property
    def diam(self) -> float:
        """Largest distance between two boundary vertices (the hull is spanned by them)."""
        if "diam" not in self._cache:
            idx = np.unique(self.boundary_facets)
            pts = self.vertices[idx]
            self._cache["diam"] = float(pdist(pts).max()) if len(pts) > 1 else 0.0
        return self._cache["diam"]

    @property
    def h(self) -> float:
        """Characteristic cell size: cell length in 1D, leg of an equal-area right triangle in 2D."""
        meas = self.cell_measures
        if self.dim == 1:
            return float(meas.max())
        return float(math.sqrt(2.0 * meas.max()))

    @property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_facets)

    def barycentric_gradients(self) -> np.ndarray:
        """Constant gradients of the P1 hat functions per cell, shape (C, dim+1, dim)."""
        if "grads" not in self._cache:
            p = self.vertices[self.cells]
            jac = (p[:, 1:, :] - p[:, :1, :]).transpose(0, 2, 1)  # (C, dim, dim)
            inv = np.linalg.inv(jac)                              # rows: d lambda_k / dx
            g = np.empty((self.n_cells, self.dim + 1, self.dim))
            g[:, 1:, :] = inv
            g[:, 0, :] = -inv.sum(axis=1)
            self._cache["grads"] = g
        return self._cache["grads"]

    def locate(self, x) -> tuple[int, np.ndarray]:
        """Return (cell index, barycentric coordinates) of a point in the closed domain."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        p = self.vertices[self.cells]
        if self.dim == 1:
            lo = np.minimum(p[:, 0, 0], p[:, 1, 0])
            hi = np.maximum(p[:, 0, 0], p[:, 1, 0])
            inside = np.nonzero((lo - 1e-12 <= x[0]) & (x[0] <= hi + 1e-12))[0]
            if len(inside) == 0:
                raise ValueError(f"point {x} outside the mesh")
            c = int(inside[0])
            s = (x[0] - p[c, 0, 0]) / (p[c, 1, 0] - p[c, 0, 0])
            return c, np.array([1.0 - s, s])
        jac = (p[:, 1:, :] - p[:, :1, :]).transpose(0, 2, 1)
        rhs = x[None, :] - p[:, 0, :]
        lam = np.linalg.solve(jac, rhs[..., None])[..., 0]
        bary = np.column_stack([1.0 - lam.sum(axis=1), lam])
        inside = np.nonzero(bary.min(axis=1) >= -1e-10)[0]
        if len(inside) == 0:
            raise ValueError(f"point {x} outside the mesh")
        c = int(inside[0])
        return c, bary[c]

    def point_basis(self, x) -> np.ndarray:
        """Vector of hat-function values at x (length N)."""
        c, bary = self.locate(x)
        v = np.zeros(self.n_vertices)
        np.add.at(v, self.cells[c], bary)
        return v

    def nearest_vertex(self, x) -> int:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return int(np.argmin(np.linalg.norm(self.vertices - x[None, :], axis=1)))

    def to_dict(self) -> dict:
        return {
            "dimension": self.dim,
            "vertices": self.vertices.tolist(),
            "cells": self.cells.tolist(),
            "boundary_facets": [
                {"vertices": f.tolist(), "patch": int(p)}
                for f, p in zip(self.boundary_facets, self.boundary_patches)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mesh":
        dim = int(doc["dimension"])
        facets = doc["boundary_facets"]
        return make_mesh(
            dim,
            np.asarray(doc["vertices"], dtype=float).reshape(-1, dim),
            np.asarray(doc["cells"], dtype=np.int64),
            np.asarray([f["vertices"] for f in facets], dtype=np.int64).reshape(-1, dim),
            np.asarray([f["patch"] for f in facets], dtype=np.int64),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mesh":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _signed_measures(vertices, cells):
    p = vertices[cells]
    if vertices.shape[1] == 1:
        return p[:, 1, 0] - p[:, 0, 0]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def make_mesh(dim, vertices, cells, facets, patches) -> Mesh:
    """Validate raw arrays, orient cells positively and check the boundary cover."""
    vertices = np.ascontiguousarray(vertices, dtype=float)
    cells = np.array(cells, dtype=np.int64)
    meas = _signed_measures(vertices, cells)
    if np.any(meas == 0.0):
        raise ValueError("degenerate cell with zero measure")
    flip = meas < 0
    if np.any(flip):
        cells[flip, :2] = cells[flip, 1::-1]
    facets = np.array(facets, dtype=np.int64).reshape(-1, dim)
    patches = np.array(patches, dtype=np.int64)
    if len(facets) != len(patches):
        raise ValueError("each boundary facet needs a patch label")
    expected = _topological_boundary(dim, cells)
    given = {tuple(sorted(f)) for f in facets.tolist()}
    if given != expected or len(given) != len(facets):
        raise ValueError("boundary facets do not match the topological boundary")
    return Mesh(dim, vertices, cells, facets, patches)


def _topological_boundary(dim, cells) -> set:
    counts: dict[tuple, int] = {}
    for cell in cells.tolist():
        for k in range(dim + 1):
            f = tuple(sorted(cell[:k] + cell[k + 1:]))
            counts[f] = counts.get(f, 0) + 1
    if any(c > 2 for c in counts.values()):
        raise ValueError("non-manifold mesh: facet shared by more than two cells")
    return {f for f, c in counts.items() if c == 1}


def build_interval_mesh(a: float, b: float, n_cells: int) -> Mesh:
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("interval bounds must be finite")
    if not a < b:
        raise ValueError("need a < b")
    if n_cells < 1:
        raise ValueError("n_cells must be at least 1")
    x = np.linspace(a, b, n_cells + 1)
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    return make_mesh(1, x[:, None], cells, [[0], [n_cells]], [0, 1])


def _grid_triangles(keep, nx, ny):
    """Split kept grid squares of an (nx+1) x (ny+1) vertex lattice into two triangles."""
    def vid(i, j):
        return j * (nx + 1) + i
    tris = []
    for j in range(ny):
        for i in range(nx):
            if not keep(i, j):
                continue
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    return np.array(tris, dtype=np.int64)


def _label_boundary(vertices, cells, label_of):
    facets = sorted(_topological_boundary(2, cells))
    facets = np.array(facets, dtype=np.int64)
    mid = vertices[facets].mean(axis=1)
    patches = np.array([label_of(p) for p in mid], dtype=np.int64)
    return facets, patches


def _compress(vertices, cells):
    used = np.unique(cells)
    remap = -np.ones(len(vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[cells]


def build_rectangle_mesh(w: float, h: float, nx: int, ny: int) -> Mesh:
    if not (w > 0 and h > 0 and math.isfinite(w) and math.isfinite(h)):
        raise ValueError("rectangle sides must be positive and finite")
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    xs, ys = np.linspace(0.0, w, nx + 1), np.linspace(0.0, h, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    cells = _grid_triangles(lambda i, j: True, nx, ny)
    tol = 1e-12 * max(w, h)

    def label(p):
        # bottom, right, top, left
        if abs(p[1]) < tol:
            return 0
        if abs(p[0] - w) < tol:
            return 1
        if abs(p[1] - h) < tol:
            return 2
        return 3

    facets, patches = _label_boundary(vertices, cells, label)
    return make_mesh(2, vertices, cells, facets, patches)


def build_lshape_mesh(n: int) -> Mesh:
    """[0,1]^2 minus (0.5,1]^2 on a grid of spacing 1/(2n)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    k = 2 * n
    xs = np.linspace(0.0, 1.0, k + 1)
    X, Y = np.meshgrid(xs, xs)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    cells = _grid_triangles(lambda i, j: not (i >= n and j >= n), k, k)
    vertices, cells = _compress(vertices, cells)
    tol = 1e-12

    def label(p):
        x, y = p
        if abs(y) < tol:
            return 0
        if abs(x - 1.0) < tol:
            return 1
        if abs(y - 0.5) < tol and x > 0.5 - tol:
            return 2
        if abs(x - 0.5) < tol and y > 0.5 - tol:
            return 3
        if abs(y - 1.0) < tol:
            return 4
        return 5

    facets, patches = _label_boundary(vertices, cells, label)
    return make_mesh(2, vertices, cells, facets, patches)


def refine(mesh: Mesh) -> Mesh:
    """Uniform refinement: bisection in 1D, red refinement (1 -> 4) in 2D."""
    if mesh.dim == 1:
        return _refine_1d(mesh)
    return _refine_2d(mesh)


def _refine_1d(mesh):
    v = mesh.vertices
    nv = len(v)
    mids = 0.5 * (v[mesh.cells[:, 0]] + v[mesh.cells[:, 1]])
    new_ids = nv + np.arange(mesh.n_cells)
    vertices = np.vstack([v, mids])
    cells = np.vstack([
        np.column_stack([mesh.cells[:, 0], new_ids]),
        np.column_stack([new_ids, mesh.cells[:, 1]]),
    ])
    # keep cells ordered left to right within each parent
    order = np.argsort(np.concatenate([2 * np.arange(mesh.n_cells), 2 * np.arange(mesh.n_cells) + 1]),
                       kind="stable")
    cells = cells[order]
    return make_mesh(1, vertices, cells, mesh.boundary_facets.copy(), mesh.boundary_patches.copy())


def _refine_2d(mesh):
    v = mesh.vertices
    edge_id: dict[tuple, int] = {}
    new_pts = []

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in edge_id:
            edge_id[key] = len(v) + len(new_pts)
            new_pts.append(0.5 * (v[a] + v[b]))
        return edge_id[key]

    cells = []
    for a, b, c in mesh.cells.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        cells += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    facets, patches = [], []
    for (a, b), p in zip(mesh.boundary_facets.tolist(), mesh.boundary_patches.tolist()):
        m = edge_id[(a, b) if a < b else (b, a)]
        facets += [(a, m), (m, b)]
        patches += [p, p]
    vertices = np.vstack([v, np.array(new_pts)])
    return make_mesh(2, vertices, np.array(cells), np.array(facets), np.array(patches))


def parabolic_distance(x, t, y, s) -> float:
    """max(|x - y|, sqrt|t - s|)."""
    dx = float(np.linalg.norm(np.atleast_1d(np.asarray(x, float)) - np.atleast_1d(np.asarray(y, float))))
    return max(dx, math.sqrt(abs(t - s)))

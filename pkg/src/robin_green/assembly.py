"""P1 assembly of mass, stiffness, Robin and load forms for m-component fields.

Degrees of freedom are ordered component-major: the value of component i
at vertex p sits at index i * N + p.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeff import CoefficientField, RobinOperator
from .mesh import Mesh
from .quadrature import boundary_quadrature, cell_quadrature


class SolverError(RuntimeError):
    """A linear solve failed to reach its tolerance."""


@dataclass(frozen=True)
class NodalField:
    mesh: Mesh
    m: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.m * self.mesh.n_vertices,):
            raise ValueError("nodal vector length does not match mesh and m")

    def component(self, i: int) -> np.ndarray:
        N = self.mesh.n_vertices
        return self.values[i * N:(i + 1) * N]

    def at(self, x) -> np.ndarray:
        """Interpolated m-vector at a point."""
        phi = self.mesh.point_basis(x)
        return self.values.reshape(self.m, -1) @ phi


def dof(i: int, p: int, N: int) -> int:
    return i * N + p


class RobinMatrix:
    """Boundary form B = S + U V^T: a sparse multiplier part plus a finite-rank part."""

    def __init__(self, sparse, U: Optional[np.ndarray] = None, V: Optional[np.ndarray] = None):
        self.sparse = sp.csr_matrix(sparse)
        self.U = U
        self.V = V

    @property
    def shape(self):
        return self.sparse.shape

    @property
    def rank(self) -> int:
        return 0 if self.U is None else self.U.shape[1]

    def __matmul__(self, x):
        y = self.sparse @ x
        if self.U is not None:
            y = y + self.U @ (self.V.T @ x)
        return y

    def quad(self, u) -> float:
        return float(u @ (self @ u))

    @property
    def T(self) -> "RobinMatrix":
        if self.U is None:
            return RobinMatrix(self.sparse.T)
        return RobinMatrix(self.sparse.T, self.V, self.U)

    def toarray(self) -> np.ndarray:
        out = self.sparse.toarray()
        if self.U is not None:
            out += self.U @ self.V.T
        return out

    def sym(self) -> np.ndarray:
        A = self.toarray()
        return 0.5 * (A + A.T)

    def scaled(self, c: float) -> "RobinMatrix":
        if self.U is None:
            return RobinMatrix(c * self.sparse)
        return RobinMatrix(c * self.sparse, c * self.U, self.V)


def _scatter(rows, cols, vals, size):
    A = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(size, size))
    return A.tocsr()


def _block_index(verts, m, N):
    """Global dofs for local vertex tuples: (E, m, k)."""
    return np.arange(m)[None, :, None] * N + verts[:, None, :]


def assemble_mass(mesh: Mesh, m: int = 1, lumped: bool = False) -> sp.csr_matrix:
    n, N = mesh.dim, mesh.n_vertices
    k = n + 1
    local = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
    Me = mesh.cell_measures[:, None, None] * local[None]
    scalar = _scatter(np.repeat(mesh.cells[:, :, None], k, 2), np.repeat(mesh.cells[:, None, :], k, 1),
                      Me, N)
    if lumped:
        scalar = sp.diags(np.asarray(scalar.sum(axis=1)).ravel()).tocsr()
    return sp.kron(sp.identity(m), scalar, format="csr")


def assemble_stiffness(mesh: Mesh, field: CoefficientField, t: float = 0.0) -> sp.csr_matrix:
    """Matrix of a(u, v) = int A^{ab} D_b u . D_a v; row = test dof, column = trial dof."""
    if field.n != mesh.dim:
        raise ValueError("coefficient dimension does not match mesh")
    n, m, N, C = mesh.dim, field.m, mesh.n_vertices, mesh.n_cells
    pts, w, _ = cell_quadrature(mesh, degree=1 if n == 1 else 2)
    try:
        A = field(pts.reshape(-1, n), t).reshape(C, -1, n, n, m, m)
    except ValueError:
        raise
    except Exception as exc:
        raise RuntimeError(f"coefficient evaluation failed at t={t}") from exc
    Abar = np.einsum("cq,cqabij->cabij", w, A)
    G = mesh.barycentric_gradients()
    Ke = np.einsum("cabij,cpa,cqb->cipjq", Abar, G, G)
    idx = _block_index(mesh.cells, m, N)           # (C, m, k)
    rows = np.broadcast_to(idx[:, :, :, None, None], Ke.shape)
    cols = np.broadcast_to(idx[:, None, None, :, :], Ke.shape)
    return _scatter(rows, cols, Ke, m * N)


def assemble_unit_stiffness(mesh: Mesh, m: int = 1) -> sp.csr_matrix:
    """Stiffness of the identity tensor: u^T K u = ||Du||^2."""
    G = mesh.barycentric_gradients()
    Ke = mesh.cell_measures[:, None, None] * np.einsum("cpa,cqa->cpq", G, G)
    k = mesh.dim + 1
    scalar = _scatter(np.repeat(mesh.cells[:, :, None], k, 2), np.repeat(mesh.cells[:, None, :], k, 1),
                      Ke, mesh.n_vertices)
    return sp.kron(sp.identity(m), scalar, format="csr")


def boundary_weights(mesh: Mesh, profile: np.ndarray, m: int) -> np.ndarray:
    """Vectors w_k with w_k . u = int profile_k . u dS; profile has shape (F, Q, r, m)."""
    _, w, hat = boundary_quadrature(mesh)
    N = mesh.n_vertices
    r = profile.shape[2]
    out = np.zeros((m * N, r))
    contrib = np.einsum("fq,fqki,qa->fiak", w, profile, hat)    # (F, m, nv, r)
    idx = _block_index(mesh.boundary_facets, m, N)              # (F, m, nv)
    for k in range(r):
        np.add.at(out[:, k], idx.ravel(), contrib[..., k].ravel())
    return out


def assemble_robin(mesh: Mesh, theta: RobinOperator, t: float = 0.0) -> RobinMatrix:
    if len(mesh.boundary_facets) == 0:
        raise ValueError("mesh has no boundary")
    m, N = theta.m, mesh.n_vertices
    pts, w, hat = boundary_quadrature(mesh)
    F, Q = w.shape
    flat = pts.reshape(-1, mesh.dim)
    if theta.kind == "multiplier":
        th = theta.evaluate(flat, t).reshape(F, Q, m, m)
        Be = np.einsum("fq,fqij,qa,qb->fiajb", w, th, hat, hat)
        idx = _block_index(mesh.boundary_facets, m, N)
        rows = np.broadcast_to(idx[:, :, :, None, None], Be.shape)
        cols = np.broadcast_to(idx[:, None, None, :, :], Be.shape)
        return RobinMatrix(_scatter(rows, cols, Be, m * N))
    phi, psi = theta.profiles(flat, t)
    r = theta.rank
    Phi = boundary_weights(mesh, phi.reshape(F, Q, r, m), m)
    Psi = boundary_weights(mesh, psi.reshape(F, Q, r, m), m)
    # v^T B u = sum_kl c_kl (Phi_k . u)(Psi_l . v)  =>  B = Psi c^T Phi^T
    return RobinMatrix(sp.csr_matrix((m * N, m * N)), Psi @ theta.coupling.T, Phi)


def assemble_load(mesh: Mesh, f: Optional[Callable], t: float, m: int) -> np.ndarray:
    """Vector of int f(., t) . phi_(i,p) dx; f maps (P, n) points to (P, m) values."""
    N = mesh.n_vertices
    if f is None:
        return np.zeros(m * N)
    pts, w, hat = cell_quadrature(mesh, degree=3 if mesh.dim == 1 else 2)
    C, Q = w.shape
    try:
        vals = np.asarray(f(pts.reshape(-1, mesh.dim), t), dtype=float).reshape(C, Q, m)
    except Exception as exc:
        raise RuntimeError(f"load evaluation failed at t={t}") from exc
    Fe = np.einsum("cq,cqi,qa->cia", w, vals, hat)
    out = np.zeros(m * N)
    np.add.at(out, _block_index(mesh.cells, m, N).ravel(), Fe.ravel())
    return out


def is_symmetric(A, tol: float = 1e-12) -> bool:
    A = sp.csr_matrix(A)
    scale = abs(A).max() if A.nnz else 0.0
    diff = A - A.T
    return (abs(diff).max() if diff.nnz else 0.0) <= tol * max(scale, 1e-300)


def solve_spd(A, b, tol: float = 1e-10, maxiter: int = 10_000) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients with a relative residual target."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} vs {b.shape}")
    if not np.any(b):
        return np.zeros_like(b)
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("non-positive diagonal: matrix is not SPD")
    precond = spla.LinearOperator(A.shape, matvec=lambda x: x / d)
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=precond)
    if info != 0 or np.linalg.norm(A @ x - b) > tol * np.linalg.norm(b) * (1 + 1e-6):
        raise SolverError(f"CG did not converge (info={info})")
    return x


class ShiftedSolver:
    """Factorised solver for (M + c (K + B)) x = rhs, with B = S + U V^T."""

    def __init__(self, M, K, B: RobinMatrix, c: float):
        A0 = (M + c * (K + B.sparse)).tocsc()
        self.matrix = A0
        self.lowrank = B.U is not None
        try:
            self._lu = spla.splu(A0)
        except RuntimeError as exc:
            raise SolverError(f"step matrix is singular: {exc}") from exc
        if self.lowrank:
            self._Z = self._lu.solve(c * B.U)
            self._V = B.V
            self._cap = np.eye(B.U.shape[1]) + B.V.T @ self._Z
            self._U = c * B.U

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        y = self._lu.solve(rhs)
        if self.lowrank:
            y = y - self._Z @ np.linalg.solve(self._cap, self._V.T @ y)
        if not np.all(np.isfinite(y)):
            raise SolverError("non-finite solution: step matrix lost positivity")
        return y

    def residual(self, x, rhs) -> float:
        r = self.matrix @ x - rhs
        if self.lowrank:
            r = r + self._U @ (self._V.T @ x)
        return float(np.linalg.norm(r))


def export_coo(A, path) -> None:
    """Write one 'row col value' line per stored entry."""
    A = sp.coo_matrix(A.toarray() if isinstance(A, RobinMatrix) else A)
    order = np.lexsort((A.col, A.row))
    with Path(path).open("w") as fh:
        for r, c, v in zip(A.row[order], A.col[order], A.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")

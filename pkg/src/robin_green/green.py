"""Green's functions built from the Galerkin time stepper.

Columns of the parabolic Green's function are forward solves with a
discrete delta (M^-1 applied to point evaluation) or with the normalised
indicator load of a backward cylinder.  The elliptic Green's function is
the time integral of heat-kernel columns.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .assembly import NodalField, ShiftedSolver
from .coercivity import check_h1
from .parabolic import (RobinProblem, TimeGrid, Trajectory, _checked_solve, _load_sequence,
                        solve_backward_adjoint, solve_forward)


@dataclass
class GreenColumn:
    """Column k of the Green's function with source (y, s)."""
    y: np.ndarray
    s: float
    k: int
    epsilon: float
    trajectory: Trajectory = field(repr=False)
    loads: Optional[np.ndarray] = field(default=None, repr=False)

    def value(self, x, t: float) -> np.ndarray:
        if t < self.s:
            return np.zeros(self.trajectory.problem.m)
        return self.trajectory.at(x, t)

    def snapshots_before(self, t: float) -> np.ndarray:
        times, snaps = self.trajectory.chronological()
        return snaps[times < t]


@dataclass
class KernelMatrixSample:
    x: np.ndarray
    t: float
    y: np.ndarray
    s: float
    value: np.ndarray
    source: str = "fem"

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        self.value = np.atleast_2d(np.asarray(self.value, dtype=float))
        if not np.all(np.isfinite(self.value)):
            raise ValueError("kernel sample has non-finite entries")

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.x - self.y))

    @property
    def lag(self) -> float:
        return self.t - self.s


def _composite_rule(dim: int, sub: int):
    """Barycentric points and weights (summing to 1) of a composite rule on the reference cell."""
    g = 0.5 / math.sqrt(3.0)
    if dim == 1:
        left = (np.arange(sub)[:, None] + np.array([0.5 - g, 0.5 + g])[None, :]) / sub
        x = left.ravel()
        return np.stack([1.0 - x, x], axis=1), np.full(x.size, 1.0 / x.size)
    pts = []
    loc = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    for i in range(sub):
        for j in range(sub - i):
            corners = [np.array([i, j]), np.array([i + 1, j]), np.array([i, j + 1])]
            tris = [corners]
            if i + j < sub - 1:
                tris.append([np.array([i + 1, j]), np.array([i + 1, j + 1]), np.array([i, j + 1])])
            for tri in tris:
                c = np.array(tri, dtype=float) / sub
                pts.extend(loc @ c)
    xy = np.array(pts)
    bary = np.column_stack([1.0 - xy.sum(axis=1), xy])
    return bary, np.full(len(xy), 1.0 / len(xy))


def ball_load(problem: RobinProblem, y, epsilon: float, k: int = 0, sub: int = 8):
    """Load vector of the indicator of B_eps(y) in component k, and the ball measure seen by quadrature."""
    mesh = problem.mesh
    bary, w = _composite_rule(mesh.dim, sub)
    corners = mesh.vertices[mesh.cells]                       # (C, n+1, n)
    pts = np.einsum("qa,cad->cqd", bary, corners)
    inside = np.linalg.norm(pts - np.asarray(y, dtype=float), axis=2) < epsilon
    wq = mesh.cell_measures[:, None] * w[None, :] * inside
    N = mesh.n_vertices
    out = np.zeros(problem.size)
    np.add.at(out, (k * N + mesh.cells).ravel(), np.einsum("cq,qa->ca", wq, bary).ravel())
    return out, float(wq.sum())


def averaged_green(problem: RobinProblem, y, s: float, epsilon: float, k: int, grid: TimeGrid) -> GreenColumn:
    """Forward response to the normalised indicator of B_eps(y) x (s - eps^2, s) in component k."""
    if grid.scheme != "implicit_euler":
        raise ValueError("averaged columns are built with implicit Euler")
    if not (grid.t0 <= s - epsilon ** 2 and s <= grid.t1):
        raise ValueError("backward cylinder leaves the time window")
    if epsilon < problem.mesh.h:
        raise ValueError(f"epsilon={epsilon} is below the mesh resolution h={problem.mesh.h}")
    space, measure = ball_load(problem, y, epsilon, k)
    if measure == 0.0:
        raise ValueError("indicator is invisible to quadrature")
    times, dt = grid.times, grid.dt
    lo, hi = s - epsilon ** 2, s
    overlap = np.clip(np.minimum(times[1:], hi) - np.maximum(times[:-1], lo), 0.0, None)
    loads = np.zeros((grid.steps + 1, problem.size))
    loads[1:] = (overlap / dt)[:, None] * space[None, :]
    total = dt * math.fsum(loads[1:].sum(axis=1))
    loads /= total
    traj = solve_forward(problem, np.zeros(problem.size), grid, loads=loads)
    return GreenColumn(np.atleast_1d(np.asarray(y, float)), s, k, epsilon, traj, loads)


def load_mass(column: GreenColumn) -> float:
    """Space-time integral of the column's right-hand side (rectangle rule in time)."""
    return column.trajectory.dt * math.fsum(column.loads[1:].sum(axis=1))


def averaged_duality_probe(problem: RobinProblem, column: GreenColumn, f: Callable,
                           grid: TimeGrid) -> tuple[float, float]:
    """(int G^eps . f dX, average of the adjoint solution over the cylinder).

    The adjoint solution v solves the backward problem with load f and zero
    terminal data; the step that ends at t_k pairs v(t_{k-1}) with the load at t_k.
    """
    load = _load_sequence(problem, grid, f, None)
    F = np.array([load(k) for k in range(grid.steps + 1)])
    u = column.trajectory.snapshots
    lhs = grid.dt * math.fsum(np.einsum("ki,ki->k", F[1:], u[1:]))
    back = solve_backward_adjoint(problem, np.zeros(problem.size), grid, loads=F)
    v = back.snapshots[::-1]                      # chronological
    rhs = grid.dt * math.fsum(np.einsum("ki,ki->k", column.loads[1:], v[:-1]))
    return lhs, rhs


def heat_kernel_column(problem: RobinProblem, y: int, k: int, grid: TimeGrid) -> GreenColumn:
    """K(., y, t) e_k for t on the grid, started from the discrete delta at vertex y."""
    if not problem.time_independent:
        raise ValueError("heat kernel needs time-independent data; use green_eval with explicit s")
    traj = solve_forward(problem, problem.delta_vertex(y, k), grid)
    return GreenColumn(problem.mesh.vertices[y].copy(), grid.t0, k, 0.0, traj)


def green_columns(problem: RobinProblem, y, grid: TimeGrid) -> list[Trajectory]:
    """All m delta columns with source (y, grid.t0)."""
    return [solve_forward(problem, problem.delta(y, k), grid) for k in range(problem.m)]


def green_eval(problem: RobinProblem, x, t: float, y, s: float, steps: int = 64,
               scheme: str = "implicit_euler") -> KernelMatrixSample:
    """G(x, t; y, s) as an m x m matrix; exact zeros for t < s."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m = problem.m
    if t < s:
        return KernelMatrixSample(x, t, y, s, np.zeros((m, m)))
    if t == s:
        if np.array_equal(x, y):
            raise ValueError("the Green's function is singular at X = Y")
        phi = problem.mesh.point_basis(x)
        N = problem.mesh.n_vertices
        val = np.column_stack([problem.delta(y, k).reshape(m, N) @ phi for k in range(m)])
        return KernelMatrixSample(x, t, y, s, val)
    grid = TimeGrid(s, t, steps, scheme)
    cols = green_columns(problem, y, grid)
    val = np.column_stack([c.at(x, t) for c in cols])
    return KernelMatrixSample(x, t, y, s, val)


def adjoint_green_eval(problem: RobinProblem, y, s: float, x, t: float, steps: int = 64,
                       scheme: str = "implicit_euler", independent: bool = False) -> KernelMatrixSample:
    """Adjoint Green's function with source (x, t), read at (y, s < t).

    By default the backward march reuses the transposed forward matrices.
    With ``independent=True`` the adjoint coefficients are assembled afresh
    and the backward equation is marched forward in the reversed time
    t - tau, so operators are sampled at the earlier end of each step.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m = problem.m
    if not s < t:
        raise ValueError("adjoint evaluation needs s < t")
    N = problem.mesh.n_vertices
    phi = problem.mesh.point_basis(y)
    val = np.empty((m, m))
    if independent:
        rev = problem.adjoint().time_reversed(t)
        grid = TimeGrid(0.0, t - s, steps, scheme)
        for k in range(m):
            traj = solve_forward(rev, rev.delta(x, k), grid)
            val[:, k] = traj.snapshots[-1].reshape(m, N) @ phi
    else:
        grid = TimeGrid(s, t, steps, scheme)
        for k in range(m):
            traj = solve_backward_adjoint(problem, problem.delta(x, k), grid)
            val[:, k] = traj.snapshots[-1].reshape(m, N) @ phi
    return KernelMatrixSample(y, s, x, t, val, source="adjoint")


def kernel_samples(problem: RobinProblem, y, grid: TimeGrid, xs: Sequence, ts: Sequence) -> list:
    """Samples G(x, t; y, grid.t0) for every x in xs and grid time t in ts, from one set of columns."""
    cols = green_columns(problem, y, grid)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    out = []
    for t in ts:
        for x in xs:
            val = np.column_stack([c.at(x, t) for c in cols])
            out.append(KernelMatrixSample(x, t, y, grid.t0, val))
    return out


@dataclass
class EllipticGreen:
    """G(., y): columns[k] is the nodal vector of column k."""
    mesh: object = field(repr=False)
    m: int
    y: int
    columns: np.ndarray = field(repr=False)    # (m, m N)
    T: float
    steps: int
    tail_bound: float
    theta0: float

    def nodal(self, k: int) -> NodalField:
        return NodalField(self.mesh, self.m, self.columns[k])

    def block(self, p: int) -> np.ndarray:
        """m x m matrix G_{jk}(x_p, y)."""
        N = self.mesh.n_vertices
        return self.columns[:, p::N].T.copy()

    def at(self, x) -> np.ndarray:
        phi = self.mesh.point_basis(x)
        return np.column_stack([c.reshape(self.m, -1) @ phi for c in self.columns])


def _mass_norm(problem, u) -> float:
    return math.sqrt(max(float(u @ (problem.mass @ u)), 0.0))


def elliptic_green(problem: RobinProblem, y: int, tol: float = 1e-4, theta0: Optional[float] = None,
                   dt0: Optional[float] = None, double_every: int = 16,
                   max_steps: int = 100_000) -> EllipticGreen:
    """G(., y) = int_0^inf K(., y, t) dt on a geometric time grid.

    Right-endpoint sums of implicit Euler snapshots; stops once the decay
    bound ||K(T)|| / theta0 on the remaining tail falls below tol times the
    accumulated integral.
    """
    if not problem.time_independent:
        raise ValueError("elliptic Green's function needs time-independent data")
    if theta0 is None:
        theta0 = check_h1(problem.mesh, problem.field, problem.theta, problem.lambda_tilde).theta0
    if not theta0 > 1e-12:
        raise ValueError(f"theta0={theta0} is not positive; the time integral may diverge")
    dt = (problem.mesh.h / 2) ** 2 if dt0 is None else dt0
    cols = np.empty((problem.m, problem.size))
    T, n_steps, tail = 0.0, 0, 0.0
    for k in range(problem.m):
        u = problem.delta_vertex(y, k)
        acc = np.zeros(problem.size)
        t, h, n = 0.0, dt, 0
        while True:
            u = _checked_solve(problem.solver(0.0, h), problem.mass @ u)
            acc += h * u
            t += h
            n += 1
            ratio = _mass_norm(problem, u) / theta0 / max(_mass_norm(problem, acc), 1e-300)
            if ratio <= tol:
                break
            if n >= max_steps:
                raise RuntimeError("time integration did not reach the truncation tolerance")
            if n % double_every == 0:
                h *= 2.0
        cols[k] = acc
        T, n_steps, tail = max(T, t), max(n_steps, n), max(tail, ratio)
    return EllipticGreen(problem.mesh, problem.m, y, cols, T, n_steps, tail, float(theta0))


def steady_green(problem: RobinProblem, y: int, t: float = 0.0) -> np.ndarray:
    """Direct solve of (K + B) g = e_(y, k) for every k; returns (m, m N)."""
    zero = sp.csr_matrix(problem.mass.shape)
    solver = ShiftedSolver(zero, problem.stiffness(t), problem.robin(t), 1.0)
    N = problem.mesh.n_vertices
    out = np.empty((problem.m, problem.size))
    for k in range(problem.m):
        e = np.zeros(problem.size)
        e[k * N + y] = 1.0
        out[k] = _checked_solve(solver, e)
    return out


@dataclass
class Representation:
    superposed: np.ndarray       # (steps + 1, m N), chronological
    direct: Trajectory = field(repr=False)

    @property
    def rel_diff(self) -> float:
        d = self.direct.snapshots
        return float(np.linalg.norm(self.superposed - d) / max(np.linalg.norm(d), 1e-300))


def _kernel_blocks(problem: RobinProblem, grid: TimeGrid, start: int) -> np.ndarray:
    """Z[j] = discrete kernel matrix from source time t_start to t_{start + j}, j >= 1."""
    times, dt = grid.times, grid.dt
    Z = problem.mass_solve(np.eye(problem.size))
    out = np.empty((grid.steps - start + 1, problem.size, problem.size))
    out[0] = Z
    for j, k in enumerate(range(start + 1, grid.steps + 1), start=1):
        Z = _checked_solve(problem.solver(times[k], dt), problem.mass @ Z)
        out[j] = Z
    return out


def represent_solution(problem: RobinProblem, grid: TimeGrid, f: Optional[Callable] = None,
                       loads: Optional[np.ndarray] = None) -> Representation:
    """Superpose delta-column responses against the load and compare with one direct solve.

    u(t_n) = sum_{k <= n} dt G(t_n; ., t_{k-1}) F(t_k); the columns of G are
    the kernel matrices of every source node.
    """
    if grid.scheme != "implicit_euler":
        raise ValueError("the representation is assembled for implicit Euler")
    load = _load_sequence(problem, grid, f, loads)
    F = np.array([np.zeros(problem.size) if load(k) is None else load(k)
                  for k in range(grid.steps + 1)])
    direct = solve_forward(problem, np.zeros(problem.size), grid, loads=F)
    sup = np.zeros((grid.steps + 1, problem.size))
    dt = grid.dt
    if problem.time_independent:
        Z = _kernel_blocks(problem, grid, 0)
        for n in range(1, grid.steps + 1):
            for k in range(1, n + 1):
                if F[k].any():
                    sup[n] += Z[n - k + 1] @ (dt * F[k])
    else:
        for k in range(1, grid.steps + 1):
            if not F[k].any():
                continue
            Z = _kernel_blocks(problem, grid, k - 1)
            for n in range(k, grid.steps + 1):
                sup[n] += Z[n - k + 1] @ (dt * F[k])
    return Representation(sup, direct)


# sample files: x..., t, y..., s, g00, g01, ..., source

def write_samples(path, samples: Iterable[KernelMatrixSample]) -> None:
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to write")
    n, m = samples[0].x.size, samples[0].value.shape[0]
    header = ([f"x{i}" for i in range(n)] + ["t"] + [f"y{i}" for i in range(n)] + ["s"]
              + [f"g{i}{j}" for i in range(m) for j in range(m)] + ["source"])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for smp in samples:
            nums = list(smp.x) + [smp.t] + list(smp.y) + [smp.s] + list(smp.value.ravel())
            w.writerow([f"{float(v):.17g}" for v in nums] + [smp.source])


def read_samples(path) -> list[KernelMatrixSample]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(1 for h in header if h.startswith("x"))
    mm = sum(1 for h in header if h.startswith("g"))
    m = int(round(math.sqrt(mm)))
    if m * m != mm or len(header) != 2 * n + 2 + mm + 1:
        raise ValueError(f"unrecognised sample header in {path}")
    out = []
    for r in body:
        v = [float(a) for a in r[:-1]]
        out.append(KernelMatrixSample(v[:n], v[n], v[n + 1:2 * n + 1], v[2 * n + 1],
                                      np.array(v[2 * n + 2:]).reshape(m, m), r[-1]))
    return out

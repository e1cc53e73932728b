"""Galerkin time stepping for the forward Robin problem and its backward adjoint.

The semi-discrete system is M u' + (K(t) + B(t)) u = F(t) with the P1 nodal
basis as Galerkin basis.  Implicit Euler samples operators and loads at the
later time level of every step, in both marching directions, so the forward
and backward propagators are exact matrix transposes of each other.
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import (NodalField, ShiftedSolver, SolverError, assemble_load, assemble_mass,
                       assemble_robin, assemble_stiffness, assemble_unit_stiffness)
from .coeff import CoefficientField, RobinOperator
from .mesh import Mesh
from .quadrature import cell_quadrature

SCHEMES = ("implicit_euler", "crank_nicolson")


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    steps: int
    scheme: str = "implicit_euler"

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ValueError("time window must satisfy t0 < t1")
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def index_of(self, t: float) -> int:
        k = (t - self.t0) / self.dt
        kr = int(round(k))
        if abs(k - kr) > 1e-9 or not 0 <= kr <= self.steps:
            raise ValueError(f"time {t} is not a grid time")
        return kr


class RobinProblem:
    """Mesh, coefficients and Robin data with cached assembled operators."""

    MAX_SOLVERS = 6

    def __init__(self, mesh: Mesh, field: CoefficientField, theta: RobinOperator,
                 lambda_tilde: Optional[float] = None, lumped: bool = False):
        if field.n != mesh.dim:
            raise ValueError("coefficient dimension does not match mesh")
        if theta.m != field.m:
            raise ValueError("Robin operator and coefficients disagree on m")
        self.mesh = mesh
        self.field = field
        self.theta = theta
        self.m = field.m
        self.lambda_tilde = field.lam / 2 if lambda_tilde is None else lambda_tilde
        self.lumped = lumped
        self.mass = assemble_mass(mesh, self.m, lumped)
        self.consistent_mass = self.mass if not lumped else assemble_mass(mesh, self.m)
        self.unit_stiffness = assemble_unit_stiffness(mesh, self.m)
        self._K: dict = {}
        self._B: dict = {}
        self._solvers: dict = {}
        self._lock = threading.RLock()

    @property
    def size(self) -> int:
        return self.m * self.mesh.n_vertices

    @property
    def time_independent(self) -> bool:
        return self.field.time_independent and self.theta.time_independent

    def stiffness(self, t: float):
        key = None if self.field.time_independent else float(t)
        with self._lock:
            if key not in self._K:
                if key is not None and len(self._K) > 8:
                    self._K.clear()
                self._K[key] = assemble_stiffness(self.mesh, self.field, t)
            return self._K[key]

    def robin(self, t: float):
        key = None if self.theta.time_independent else float(t)
        with self._lock:
            if key not in self._B:
                if key is not None and len(self._B) > 8:
                    self._B.clear()
                self._B[key] = assemble_robin(self.mesh, self.theta, t)
            return self._B[key]

    def apply(self, t: float, x: np.ndarray, transpose: bool = False) -> np.ndarray:
        K, B = self.stiffness(t), self.robin(t)
        if transpose:
            return K.T @ x + B.T @ x
        return K @ x + B @ x

    def solver(self, t: float, c: float, transpose: bool = False) -> ShiftedSolver:
        key = (None if self.time_independent else float(t), float(c), transpose)
        with self._lock:
            if key not in self._solvers:
                steps = [k for k in self._solvers if k != "mass"]
                if key[0] is not None:
                    # time-dependent data: keep only the current level
                    stale = [k for k in steps if k[0] is not None]
                else:
                    stale = steps[:-(self.MAX_SOLVERS - 1)] if len(steps) >= self.MAX_SOLVERS else []
                for k in stale:
                    del self._solvers[k]
                K, B = self.stiffness(t), self.robin(t)
                if transpose:
                    K, B = K.T.tocsr(), B.T
                self._solvers[key] = ShiftedSolver(self.mass, K, B, c)
            return self._solvers[key]

    def load(self, f: Optional[Callable], t: float) -> np.ndarray:
        return assemble_load(self.mesh, f, t, self.m)

    def energy(self, u: np.ndarray, t: float) -> tuple[float, float, float]:
        """(||u||_M^2, lambda_tilde ||Du||^2, <Theta u, u>)."""
        return (float(u @ (self.mass @ u)),
                float(self.lambda_tilde * (u @ (self.unit_stiffness @ u))),
                self.robin(t).quad(u))

    def adjoint(self) -> "RobinProblem":
        """Problem for the adjoint coefficients A^{ba T} and the transposed Robin operator."""
        return RobinProblem(self.mesh, self.field.adjoint(), self.theta.transpose(),
                            self.lambda_tilde, self.lumped)

    def time_reversed(self, pivot: float) -> "RobinProblem":
        """Same data read at pivot - t, for marching a backward equation forward."""
        fld = replace(self.field, evaluator=_reverse(self.field.evaluator, pivot))
        th = self.theta
        if th.kind == "multiplier":
            th = replace(th, theta=_reverse(th.theta, pivot))
        else:
            th = replace(th, phi=_reverse(th.phi, pivot),
                         psi=None if th.psi is None else _reverse(th.psi, pivot))
        return RobinProblem(self.mesh, fld, th, self.lambda_tilde, self.lumped)

    def delta(self, x, k: int = 0) -> np.ndarray:
        """L2-dual of point evaluation of component k at x: M^{-1} (phi(x) e_k)."""
        e = np.zeros(self.size)
        N = self.mesh.n_vertices
        e[k * N:(k + 1) * N] = self.mesh.point_basis(x)
        return self.mass_solve(e)

    def delta_vertex(self, p: int, k: int = 0) -> np.ndarray:
        e = np.zeros(self.size)
        e[k * self.mesh.n_vertices + p] = 1.0
        return self.mass_solve(e)

    def mass_solve(self, b: np.ndarray) -> np.ndarray:
        with self._lock:
            if "mass" not in self._solvers:
                self._solvers["mass"] = spla.splu(self.mass.tocsc())
            lu = self._solvers["mass"]
        return lu.solve(b)


def _reverse(fn, pivot):
    return lambda x, t: fn(x, pivot - t)


@dataclass
class Trajectory:
    problem: RobinProblem = field(repr=False)
    grid: TimeGrid
    times: np.ndarray             # in marching order
    snapshots: np.ndarray         # (steps + 1, m N), in marching order
    direction: str
    energy_log: np.ndarray        # (steps + 1, 3)

    @property
    def dt(self) -> float:
        return self.grid.dt

    def nodal(self, k: int) -> NodalField:
        return NodalField(self.problem.mesh, self.problem.m, self.snapshots[k])

    def chronological(self) -> tuple[np.ndarray, np.ndarray]:
        if self.direction == "forward":
            return self.times, self.snapshots
        return self.times[::-1], self.snapshots[::-1]

    def at(self, x, t: float) -> np.ndarray:
        """Interpolated m-vector at a space point and grid time."""
        times, snaps = self.chronological()
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the trajectory grid")
        phi = self.problem.mesh.point_basis(x)
        return snaps[k].reshape(self.problem.m, -1) @ phi

    def to_csv(self, path) -> None:
        path = Path(path)
        N = self.snapshots.shape[1]
        header = "step,t," + ",".join(f"u{j}" for j in range(N))
        with path.open("w") as fh:
            fh.write(header + "\n")
            for k, (t, u) in enumerate(zip(self.times, self.snapshots)):
                fh.write(f"{k},{t:.17g}," + ",".join(f"{v:.17g}" for v in u) + "\n")
        side = path.with_suffix(".energy.json")
        side.write_text(json.dumps({
            "direction": self.direction,
            "lambda_tilde": self.problem.lambda_tilde,
            "columns": ["mass_norm_sq", "lambda_tilde_grad_sq", "robin_form"],
            "energy_log": self.energy_log.tolist(),
        }))


def _as_vector(u, size) -> np.ndarray:
    if isinstance(u, NodalField):
        u = u.values
    u = np.asarray(u, dtype=float)
    if u.shape != (size,):
        raise ValueError(f"expected a nodal vector of length {size}")
    return u


def step(problem: RobinProblem, u, t: float, dt: float, load_new=None, load_old=None,
         scheme: str = "implicit_euler") -> np.ndarray:
    """One Galerkin step from t to t + dt.

    Implicit Euler:  (M + dt L(t+dt)) u+ = M u + dt F(t+dt)
    Crank-Nicolson:  (M + dt/2 L(t+dt)) u+ = (M - dt/2 L(t)) u + dt/2 (F(t) + F(t+dt))
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = _as_vector(u, problem.size)
    M = problem.mass
    if scheme == "implicit_euler":
        rhs = M @ u
        if load_new is not None:
            rhs = rhs + dt * load_new
        solver = problem.solver(t + dt, dt)
    elif scheme == "crank_nicolson":
        rhs = M @ u - 0.5 * dt * problem.apply(t, u)
        for ld in (load_old, load_new):
            if ld is not None:
                rhs = rhs + 0.5 * dt * ld
        solver = problem.solver(t + dt, 0.5 * dt)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return _checked_solve(solver, rhs)


def _checked_solve(solver: ShiftedSolver, rhs: np.ndarray) -> np.ndarray:
    x = solver.solve(rhs)
    scale = np.linalg.norm(rhs)
    if scale > 0 and solver.residual(x, rhs) > 1e-10 * scale:
        raise SolverError("step solve missed the 1e-10 relative residual target")
    return x


def _load_sequence(problem, grid, f, loads):
    """Callable k -> load vector at grid time k (None when there is no forcing)."""
    if loads is not None:
        loads = np.asarray(loads, dtype=float)
        if loads.shape != (grid.steps + 1, problem.size):
            raise ValueError("loads must have shape (steps + 1, m N)")
        return lambda k: loads[k]
    if f is None:
        return lambda k: None
    times = grid.times
    return lambda k: problem.load(f, times[k])


def solve_forward(problem: RobinProblem, psi0, grid: TimeGrid, f: Optional[Callable] = None,
                  loads: Optional[np.ndarray] = None) -> Trajectory:
    """March the forward problem from grid.t0 with initial data psi0.

    ``f`` is a callable (points, t) -> (P, m); alternatively ``loads`` gives
    the assembled load vector at every grid time.
    """
    u = _as_vector(psi0, problem.size).copy()
    times = grid.times
    load = _load_sequence(problem, grid, f, loads)
    snaps = np.empty((grid.steps + 1, problem.size))
    log = np.empty((grid.steps + 1, 3))
    snaps[0] = u
    log[0] = problem.energy(u, times[0])
    prev = load(0) if grid.scheme == "crank_nicolson" else None
    for k in range(1, grid.steps + 1):
        new = load(k)
        u = step(problem, u, times[k - 1], grid.dt, new, prev, grid.scheme)
        prev = new
        snaps[k] = u
        log[k] = problem.energy(u, times[k])
    return Trajectory(problem, grid, times, snaps, "forward", log)


def solve_backward_adjoint(problem: RobinProblem, psiT, grid: TimeGrid,
                           f: Optional[Callable] = None, loads: Optional[np.ndarray] = None) -> Trajectory:
    """March the adjoint problem from grid.t1 down to grid.t0 with terminal data psiT.

    Operators and loads are sampled at the later time of every step, so the
    backward propagator is the exact transpose of the forward one.  For
    Crank-Nicolson this costs one extra mass solve per step:
    v- = M^-1 (M - c L(t-)^T) (M + c L(t+)^T)^-1 (M v+ + c (F+ + F-)).
    """
    v = _as_vector(psiT, problem.size).copy()
    times = grid.times
    dt = grid.dt
    load = _load_sequence(problem, grid, f, loads)
    M = problem.mass
    snaps = np.empty((grid.steps + 1, problem.size))
    log = np.empty((grid.steps + 1, 3))
    snaps[0] = v
    log[0] = problem.energy(v, times[-1])
    for j, k in enumerate(range(grid.steps, 0, -1), start=1):
        # step from times[k] to times[k - 1]
        rhs = M @ v
        if grid.scheme == "implicit_euler":
            ld = load(k)
            if ld is not None:
                rhs = rhs + dt * ld
            v = _checked_solve(problem.solver(times[k], dt, transpose=True), rhs)
        else:
            for ld in (load(k), load(k - 1)):
                if ld is not None:
                    rhs = rhs + 0.5 * dt * ld
            y = _checked_solve(problem.solver(times[k], 0.5 * dt, transpose=True), rhs)
            v = problem.mass_solve(M @ y - 0.5 * dt * problem.apply(times[k - 1], y, transpose=True))
        snaps[j] = v
        log[j] = problem.energy(v, times[k - 1])
    return Trajectory(problem, grid, times[::-1].copy(), snaps, "backward", log)


def tri_norm(traj: Trajectory, lambda_tilde: Optional[float] = None) -> float:
    """sqrt(max_t ||u||^2 + sum_t dt (lambda_tilde ||Du||^2 + <Theta u, u>)), rectangle rule."""
    log = traj.energy_log
    grad = log[1:, 1]
    if lambda_tilde is not None:
        grad = grad * (lambda_tilde / traj.problem.lambda_tilde)
    total = log[:, 0].max() + traj.dt * float(np.sum(grad + log[1:, 2]))
    return math.sqrt(max(total, 0.0))


def lp_norm_spacetime(problem: RobinProblem, f: Optional[Callable], grid: TimeGrid, p: float) -> float:
    """||f||_{L^p(Q)} with cell quadrature in space and the right-endpoint rule in time."""
    if f is None:
        return 0.0
    mesh = problem.mesh
    pts, w, _ = cell_quadrature(mesh, degree=3 if mesh.dim == 1 else 2)
    flat, wf = pts.reshape(-1, mesh.dim), w.ravel()
    acc = 0.0
    for t in grid.times[1:]:
        vals = np.asarray(f(flat, t), dtype=float).reshape(len(flat), problem.m)
        acc += grid.dt * float(wf @ np.linalg.norm(vals, axis=1) ** p)
    return acc ** (1.0 / p)


def energy_ratio(traj: Trajectory, f: Optional[Callable], psi0) -> float:
    """Tri-norm of the trajectory over ||f||_{L^{2(n+2)/(n+4)}} + ||psi0||_{L^2}."""
    problem = traj.problem
    n = problem.mesh.dim
    u0 = _as_vector(psi0, problem.size)
    denom = lp_norm_spacetime(problem, f, traj.grid, 2.0 * (n + 2) / (n + 4))
    denom += math.sqrt(max(float(u0 @ (problem.consistent_mass @ u0)), 0.0))
    num = tri_norm(traj)
    if denom == 0.0:
        if num == 0.0:
            return 0.0
        raise ZeroDivisionError("zero data produced a nonzero trajectory")
    return num / denom


def decay_rate(traj: Trajectory) -> float:
    """Half the negated least-squares slope of log ||u(t)||_M^2 over the second half of the window."""
    I = traj.energy_log[:, 0]
    times = traj.times
    half = len(I) // 2
    I, times = I[half:], times[half:]
    if np.any(I <= 0.0) or not np.all(np.isfinite(np.log(I))):
        raise FloatingPointError("||u||^2 underflowed on the fit window; shrink the window")
    slope = np.polyfit(times, np.log(I), 1)[0]
    return float(-0.5 * slope)


def energy_identity_residuals(traj: Trajectory, loads: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-step defect of the implicit Euler energy identity, relative to its largest term.

    ||u+||^2 - ||u||^2 + ||u+ - u||^2 + 2 dt u+^T L u+ = 2 dt F^T u+   (norms in M)
    """
    if traj.grid.scheme != "implicit_euler" or traj.direction != "forward":
        raise ValueError("the identity is stated for forward implicit Euler runs")
    P, M, dt = traj.problem, traj.problem.mass, traj.dt
    out = np.empty(traj.grid.steps)
    for k in range(1, traj.grid.steps + 1):
        u, up = traj.snapshots[k - 1], traj.snapshots[k]
        d = up - u
        terms = [up @ (M @ up), -(u @ (M @ u)), d @ (M @ d), 2 * dt * (up @ P.apply(traj.times[k], up))]
        if loads is not None:
            terms.append(-2 * dt * (loads[k] @ up))
        scale = max(abs(x) for x in terms)
        out[k - 1] = abs(math.fsum(terms)) / scale if scale > 0 else 0.0
    return out

"""Discrete coercivity constant of the Robin energy.

The best constant theta0 in

    theta0 (||u||^2 + ||Du||^2) <= lambda_tilde ||Du||^2 + <Theta u, u>

over the P1 space is the smallest eigenvalue of the symmetric pencil
(lambda_tilde K + B_sym, M + K), found here by shifted inverse iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import (RobinMatrix, ShiftedSolver, assemble_mass, assemble_robin,
                       assemble_unit_stiffness)
from .coeff import CoefficientField, RobinOperator, validate_theta
from .mesh import Mesh


class CoercivityError(RuntimeError):
    pass


@dataclass
class CoercivityReport:
    theta0: float
    lambda_tilde: float
    eigvec: np.ndarray = field(repr=False)
    iterations: int
    converged: bool
    residual: float
    t_worst: Optional[float] = None
    delta: Optional[float] = None
    hypothesis_ok: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "theta0": self.theta0,
            "lambda_tilde": self.lambda_tilde,
            "converged": self.converged,
            "iterations": self.iterations,
            "t_worst": self.t_worst,
            "residual": self.residual,
            "delta": self.delta,
            "hypothesis_ok": self.hypothesis_ok,
        }


def _symmetric_part(B) -> RobinMatrix:
    if isinstance(B, RobinMatrix):
        S = 0.5 * (B.sparse + B.sparse.T)
        if B.U is None:
            return RobinMatrix(S)
        # (U V^T + V U^T) / 2 = [U, V] [V, U]^T / 2
        return RobinMatrix(S, 0.5 * np.hstack([B.U, B.V]), np.hstack([B.V, B.U]))
    B = sp.csr_matrix(B)
    return RobinMatrix(0.5 * (B + B.T))


def estimate_theta0(M, K_unit, B, lambda_tilde: float, tol: float = 1e-10, *,
                    lam: Optional[float] = None, shift: float = 1e-3,
                    maxiter: int = 10_000, seed: int = 0, block: int = 4) -> CoercivityReport:
    """Smallest eigenvalue of (lambda_tilde K + B_sym) x = mu (M + K) x.

    Block inverse iteration with a Rayleigh-Ritz step.  The solves use
    N + shift * D so that pure-Neumann pencils, whose numerator is singular,
    stay factorable.
    """
    if not lambda_tilde > 0 or (lam is not None and not lambda_tilde < lam):
        raise CoercivityError(f"lambda_tilde={lambda_tilde} outside (0, lambda)")
    Bs = _symmetric_part(B)
    K_unit = sp.csr_matrix(K_unit)
    D = (sp.csr_matrix(M) + K_unit).tocsr()
    Nsp = (lambda_tilde * K_unit + Bs.sparse).tocsr()

    def apply_N(x):
        y = Nsp @ x
        if Bs.U is not None:
            y = y + Bs.U @ (Bs.V.T @ x)
        return y

    solver = ShiftedSolver(shift * D, Nsp, RobinMatrix(sp.csr_matrix(D.shape), Bs.U, Bs.V), 1.0)
    size = D.shape[0]
    # a block keeps clustered bottom eigenvalues from stalling the iteration
    b = min(block, size)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((size, b))
    rho, res, x = np.inf, np.inf, X[:, 0]
    for it in range(1, maxiter + 1):
        X = solver.solve(D @ X)
        NX = np.column_stack([apply_N(X[:, j]) for j in range(b)])
        Dn, Nn = X.T @ (D @ X), X.T @ NX
        mu, W = sla.eigh(0.5 * (Nn + Nn.T), 0.5 * (Dn + Dn.T))
        X, NX = X @ W, NX @ W
        x = X[:, 0]
        Dx = D @ x
        rho = float(mu[0])
        res = float(np.linalg.norm(NX[:, 0] - rho * Dx) / np.linalg.norm(Dx))
        if res <= tol:
            return CoercivityReport(rho, lambda_tilde, x, it, True, res)
    return CoercivityReport(rho, lambda_tilde, x, maxiter, False, res)


def check_h1(mesh: Mesh, field: CoefficientField, theta: RobinOperator,
             lambda_tilde: Optional[float] = None, t_samples: Sequence[float] = (0.0,),
             tol: float = 1e-10) -> CoercivityReport:
    """Worst discrete coercivity constant over sampled times.

    The report also carries delta, the smallest eigenvalue of the symmetrised
    boundary integral of theta; hypothesis_ok is False when delta vanishes.
    """
    if lambda_tilde is None:
        lambda_tilde = field.lam / 2
    m = field.m
    M = assemble_mass(mesh, m)
    K = assemble_unit_stiffness(mesh, m)
    times = list(t_samples)[:1] if theta.time_independent else list(t_samples)
    reports = []
    for t in times:
        rep = estimate_theta0(M, K, assemble_robin(mesh, theta, t), lambda_tilde, tol, lam=field.lam)
        rep.t_worst = float(t)
        reports.append(rep)
    worst = min(reports, key=lambda r: r.theta0)
    worst.converged = all(r.converged for r in reports)
    th = validate_theta(theta, mesh, t_samples)
    worst.delta = th.delta
    worst.hypothesis_ok = bool(th.delta > 1e-12)
    return worst


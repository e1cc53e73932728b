"""Reference solutions that share no assembly or solver code with the FEM path.

* eigenfunction series for the 1D heat kernel with constant Robin ends,
* free-space and method-of-images short-time kernels,
* a vertex-centred finite-difference solver with half-cell Robin closure,
* a dense generalized eigensolver for coercivity pencils.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq


class BracketError(RuntimeError):
    pass


@dataclass(frozen=True)
class RobinEigenbasis1D:
    """Eigenpairs of -u'' on (0, 1) with u'(0) = tl u(0), -u'(1) = tr u(1)."""
    theta_left: float
    theta_right: float
    k: np.ndarray          # wavenumbers, eigenvalue = k^2
    norms: np.ndarray      # sqrt of int_0^1 phi^2 for the unnormalised profiles

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.k ** 2

    def _raw(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        k = self.k
        if self.theta_left == 0.0:
            return np.cos(k * x)
        # cos kx + (tl/k) sin kx satisfies the left condition
        return np.cos(k * x) + (self.theta_left / k) * np.sin(k * x)

    def __call__(self, x) -> np.ndarray:
        """Orthonormal eigenfunctions at x, shape x.shape + (n_terms,)."""
        return self._raw(x) / self.norms

    def matching_residual(self) -> np.ndarray:
        return _matching(self.k, self.theta_left, self.theta_right)


def _matching(k, tl, tr):
    """(tl + tr) cos k + (tl tr / k - k) sin k, whose positive zeros are the wavenumbers."""
    k = np.asarray(k, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = (tl + tr) * np.cos(k) + (tl * tr / k - k) * np.sin(k)
    return np.where(k == 0.0, tl + tr + tl * tr, val)


def robin_eigenbasis(theta_left: float, theta_right: float, n_terms: int) -> RobinEigenbasis1D:
    """First n_terms Robin eigenpairs; the j-th wavenumber lies in ((j-1) pi, j pi)."""
    if theta_left < 0 or theta_right < 0:
        raise ValueError("the bracket argument needs theta >= 0")
    tl, tr = float(theta_left), float(theta_right)
    if tl == 0.0 and tr == 0.0:
        k = math.pi * np.arange(n_terms, dtype=float)
    else:
        k = np.empty(n_terms)
        for j in range(1, n_terms + 1):
            lo, hi = (j - 1) * math.pi, j * math.pi
            g = lambda s: float(_matching(s, tl, tr))
            glo, ghi = g(lo), g(hi)
            if glo == 0.0:
                k[j - 1] = lo
                continue
            if glo * ghi > 0:
                raise BracketError(f"no sign change on ({lo}, {hi})")
            k[j - 1] = brentq(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    norms = np.sqrt(_norm_sq(k, tl))
    return RobinEigenbasis1D(tl, tr, k, norms)


def _norm_sq(k, tl):
    out = np.empty_like(k)
    zero = k == 0.0
    out[zero] = 1.0
    kk = k[~zero]
    a = tl / kk
    s2 = np.sin(2 * kk) / (4 * kk)
    out[~zero] = 0.5 + s2 + a * a * (0.5 - s2) + a * np.sin(kk) ** 2 / kk
    return out


def series_tail_bound(n_terms: int, t: float) -> float:
    """Bound on sum_{j > n} exp(-mu_j t) max|phi_j|^2 using mu_j >= ((j-1) pi)^2, max|phi_j|^2 <= 4."""
    lead = math.exp(-(n_terms * math.pi) ** 2 * t)
    ratio = math.exp(-(2 * n_terms + 1) * math.pi ** 2 * t)
    return 4.0 * lead / (1.0 - ratio)


def terms_needed(t: float, tol: float = 1e-12) -> int:
    n = 1
    while series_tail_bound(n, t) > tol:
        n += 1
    return n


def series_heat_kernel_1d(theta_left: float, theta_right: float, x, y, t: float,
                          n_terms: Optional[int] = None, length: float = 1.0,
                          tol: float = 1e-12) -> np.ndarray:
    """Robin heat kernel on (0, length): sum_j exp(-mu_j t) phi_j(x) phi_j(y)."""
    if not t > 0:
        raise ValueError("the series needs t > 0")
    # rescale to the unit interval
    ts = t / length ** 2
    tl, tr = theta_left * length, theta_right * length
    n = terms_needed(ts, tol) if n_terms is None else n_terms
    basis = robin_eigenbasis(tl, tr, n)
    xs = np.asarray(x, dtype=float) / length
    ys = np.asarray(y, dtype=float) / length
    w = np.exp(-basis.eigenvalues * ts)
    return np.sum(w * basis(xs) * basis(ys), axis=-1) / length


def series_mass_1d(theta_left: float, theta_right: float, y, t: float, n_terms: Optional[int] = None):
    """int_0^1 K(x, y, t) dx evaluated term by term."""
    n = terms_needed(t) if n_terms is None else n_terms
    b = robin_eigenbasis(theta_left, theta_right, n)
    k, tl = b.k, b.theta_left
    ints = np.empty_like(k)
    zero = k == 0.0
    ints[zero] = 1.0
    kk = k[~zero]
    ints[~zero] = np.sin(kk) / kk + (tl / kk) * (1.0 - np.cos(kk)) / kk
    ints /= b.norms
    return float(np.sum(np.exp(-b.eigenvalues * t) * ints * b(np.asarray(y, float))))


def free_heat_kernel(x, y, t: float, n: int = 1) -> np.ndarray:
    """(4 pi t)^(-n/2) exp(-|x - y|^2 / 4t); x, y of shape (..., n) or scalars when n = 1."""
    if not t > 0:
        raise ValueError("the kernel needs t > 0")
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    r2 = (x - y) ** 2 if n == 1 else np.sum((x - y) ** 2, axis=-1)
    return (4 * math.pi * t) ** (-n / 2) * np.exp(-r2 / (4 * t))


def neumann_images_1d(x, y, t: float, length: float = 1.0, tol: float = 1e-14) -> np.ndarray:
    """Neumann heat kernel on (0, length) as a sum of reflected Gaussians.

    Images sit at 2 j L +- y; terms are added in pairs of shells until a shell
    contributes less than tol relative to the total.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    total = free_heat_kernel(x, y, t) + free_heat_kernel(x, -y, t)
    j = 1
    while True:
        shell = sum(free_heat_kernel(x, sgn * y + 2 * j * length * side, t)
                    for sgn in (1, -1) for side in (1, -1))
        total = total + shell
        if np.all(shell <= tol * total):
            return total
        j += 1


@dataclass
class FDSolution:
    x: np.ndarray
    times: np.ndarray
    values: np.ndarray    # (steps + 1, fine_n + 1)

    def at(self, x, k: int) -> np.ndarray:
        return np.interp(x, self.x, self.values[k])


def dense_reference_solve(a: Callable[[np.ndarray], np.ndarray], theta_left: float,
                          theta_right: float, psi0: Callable[[np.ndarray], np.ndarray],
                          t0: float, t1: float, steps: int, fine_n: int,
                          f: Optional[Callable] = None, interval=(0.0, 1.0)) -> FDSolution:
    """Implicit Euler with second-order finite differences for u_t = (a u_x)_x + f.

    Robin ends  -a u_x + tl u = 0 at the left, a u_x + tr u = 0 at the right,
    closed with half-cell balances.  a maps points to scalar diffusivities.
    """
    lo, hi = interval
    h = (hi - lo) / fine_n
    x = lo + h * np.arange(fine_n + 1)
    amid = np.asarray(a(0.5 * (x[1:] + x[:-1])), dtype=float)
    cell = np.full(fine_n + 1, h)
    cell[0] = cell[-1] = 0.5 * h
    # flux operator A (positive semidefinite), tridiagonal
    diag = np.zeros(fine_n + 1)
    diag[:-1] += amid / h
    diag[1:] += amid / h
    diag[0] += theta_left
    diag[-1] += theta_right
    off = -amid / h
    dt = (t1 - t0) / steps
    ab = np.zeros((3, fine_n + 1))
    ab[0, 1:] = dt * off
    ab[1] = cell + dt * diag
    ab[2, :-1] = dt * off
    times = t0 + dt * np.arange(steps + 1)
    out = np.empty((steps + 1, fine_n + 1))
    u = np.asarray(psi0(x), dtype=float)
    out[0] = u
    for k in range(1, steps + 1):
        rhs = cell * u
        if f is not None:
            rhs = rhs + dt * cell * np.asarray(f(x, times[k]), dtype=float)
        u = sla.solve_banded((1, 1), ab, rhs)
        out[k] = u
    return FDSolution(x, times, out)


DENSE_CAP = 2000


def dense_generalized_eig(M, K, B, lambda_tilde: float) -> np.ndarray:
    """Sorted eigenvalues of (lambda_tilde K + sym B) x = mu (M + K) x by a dense solve."""
    def dense(A):
        return A.toarray() if hasattr(A, "toarray") else np.asarray(A, dtype=float)

    Md, Kd, Bd = dense(M), dense(K), dense(B)
    if Md.shape[0] > DENSE_CAP:
        raise ValueError(f"dense oracle capped at {DENSE_CAP} unknowns")
    num = lambda_tilde * Kd + 0.5 * (Bd + Bd.T)
    return np.sort(sla.eigh(num, Md + Kd, eigvals_only=True))

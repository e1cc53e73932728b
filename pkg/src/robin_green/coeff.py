"""Coefficient tensors A^{ab}_{ij}(x, t) and Robin boundary operators.

A CoefficientField evaluates the full tensor at a batch of points and
returns an array of shape (P, n, n, m, m) indexed [p, alpha, beta, i, j].
A RobinOperator is either a pointwise m x m multiplier theta(x, t) on the
boundary or a finite-rank nonlocal form

    <Theta u, v> = sum_{k,l} c_kl (int phi_k . u dS) (int psi_l . v dS).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .mesh import Mesh
from .quadrature import boundary_quadrature, cell_quadrature

TensorEvaluator = Callable[[np.ndarray, float], np.ndarray]


class CatalogError(KeyError):
    """Unknown catalog name or malformed parameter list."""

    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True)
class CoefficientField:
    m: int
    n: int
    evaluator: TensorEvaluator
    lam: float
    time_independent: bool = True
    name: str = "custom"

    def __call__(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        A = np.asarray(self.evaluator(x, t), dtype=float)
        if A.shape != (len(x), self.n, self.n, self.m, self.m):
            raise ValueError(f"coefficient evaluator returned shape {A.shape}")
        return A

    def adjoint(self) -> "CoefficientField":
        """Coefficients of the adjoint operator: A*^{ab} = (A^{ba})^T."""
        ev = self.evaluator

        def adj(x, t):
            return np.swapaxes(np.swapaxes(ev(x, t), 1, 2), 3, 4)

        return replace(self, evaluator=adj, name=f"adjoint({self.name})")

    def scaled(self, c: float) -> "CoefficientField":
        ev = self.evaluator
        return replace(self, evaluator=lambda x, t: c * ev(x, t), name=f"{c}*{self.name}")


@dataclass(frozen=True)
class RobinOperator:
    kind: str                        # "multiplier" or "finite_rank_nonlocal"
    m: int
    theta: Optional[Callable] = None         # (P, n), t -> (P, m, m)
    phi: Optional[Callable] = None           # (P, n), t -> (P, r, m)
    psi: Optional[Callable] = None
    coupling: Optional[np.ndarray] = None    # (r, r)
    time_independent: bool = True
    claimed_nonneg: bool = True
    name: str = "custom"

    def __post_init__(self):
        if self.kind not in ("multiplier", "finite_rank_nonlocal"):
            raise ValueError(f"unknown Robin operator kind {self.kind!r}")
        if self.kind == "multiplier" and self.theta is None:
            raise ValueError("multiplier kind needs theta")
        if self.kind == "finite_rank_nonlocal" and (self.phi is None or self.coupling is None):
            raise ValueError("finite-rank kind needs phi and coupling")

    @property
    def rank(self) -> int:
        return 0 if self.coupling is None else self.coupling.shape[0]

    def evaluate(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        th = np.asarray(self.theta(x, t), dtype=float)
        if th.shape != (len(x), self.m, self.m):
            raise ValueError(f"theta evaluator returned shape {th.shape}")
        return th

    def profiles(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        phi = np.asarray(self.phi(x, t), dtype=float)
        psi = phi if self.psi is None else np.asarray(self.psi(x, t), dtype=float)
        return phi, psi

    def transpose(self) -> "RobinOperator":
        """The adjoint boundary operator."""
        if self.kind == "multiplier":
            th = self.theta
            return replace(self, theta=lambda x, t: np.swapaxes(th(x, t), 1, 2),
                           name=f"adjoint({self.name})")
        psi = self.phi if self.psi is None else self.psi
        return replace(self, phi=psi, psi=self.phi, coupling=self.coupling.T.copy(),
                       name=f"adjoint({self.name})")

    def scaled(self, c: float) -> "RobinOperator":
        if self.kind == "multiplier":
            th = self.theta
            return replace(self, theta=lambda x, t: c * th(x, t))
        return replace(self, coupling=c * self.coupling)


@dataclass
class EllipticityReport:
    lambda_lower: float
    lambda_upper_ok: bool
    worst_point: tuple
    upper_norm: float


@dataclass
class ThetaReport:
    delta: float
    nonneg_ok: bool
    t_worst: float


def _tensor_as_matrix(A):
    """(P, n, n, m, m) -> (P, n*m, n*m) with row (alpha, i), column (beta, j)."""
    P, n, _, m, _ = A.shape
    return A.transpose(0, 1, 3, 2, 4).reshape(P, n * m, n * m)


def validate_ellipticity(field: CoefficientField, mesh: Mesh, t_samples=(0.0,),
                         dir_samples: int = 64, seed: int = 0) -> EllipticityReport:
    """Sample both inequalities of the strong ellipticity condition.

    The quadratic form is probed at every cell quadrature point with
    ``dir_samples`` seeded random unit directions; the eigenvectors of the
    symmetric part are added to the probe set so the sampled minimum is the
    exact pointwise minimum.
    """
    if dir_samples < 1:
        raise ValueError("dir_samples must be at least 1")
    if field.n != mesh.dim:
        raise ValueError("coefficient dimension does not match mesh")
    rng = np.random.default_rng(seed)
    pts, _, _ = cell_quadrature(mesh)
    pts = pts.reshape(-1, mesh.dim)
    d = field.n * field.m
    xi = rng.standard_normal((dir_samples, d))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    eta = rng.standard_normal((dir_samples, d))
    eta /= np.linalg.norm(eta, axis=1, keepdims=True)
    best = (np.inf, None)
    upper = 0.0
    for t in t_samples:
        try:
            A = _tensor_as_matrix(field(pts, t))
        except Exception as exc:
            raise RuntimeError(f"coefficient evaluation failed at t={t}") from exc
        sym = 0.5 * (A + A.transpose(0, 2, 1))
        _, vecs = np.linalg.eigh(sym)
        probes = np.concatenate([np.broadcast_to(xi, (len(A), dir_samples, d)),
                                 vecs.transpose(0, 2, 1)], axis=1)
        q = np.einsum("pkr,prs,pks->pk", probes, A, probes)
        p_idx, k_idx = np.unravel_index(np.argmin(q), q.shape)
        if q[p_idx, k_idx] < best[0]:
            best = (float(q[p_idx, k_idx]), (tuple(float(v) for v in pts[p_idx]), float(t)))
        bil = np.abs(np.einsum("kr,prs,ks->pk", eta, A, xi)).max()
        upper = max(upper, float(bil), float(np.linalg.norm(A, ord=2, axis=(1, 2)).max()))
    return EllipticityReport(
        lambda_lower=best[0],
        lambda_upper_ok=bool(upper <= 1.0 / field.lam + 1e-12),
        worst_point=best[1],
        upper_norm=upper,
    )


def theta_integral(theta: RobinOperator, mesh: Mesh, t: float) -> np.ndarray:
    """The m x m matrix whose quadratic form is <Theta e, e> for constant vectors e."""
    pts, w, _ = boundary_quadrature(mesh)
    flat = pts.reshape(-1, mesh.dim)
    wf = w.ravel()
    if theta.kind == "multiplier":
        return np.einsum("p,pij->ij", wf, theta.evaluate(flat, t))
    phi, psi = theta.profiles(flat, t)
    a = np.einsum("p,pkm->km", wf, phi)   # int phi_k dS
    b = np.einsum("p,pkm->km", wf, psi)
    # <Theta e, e> = sum c_kl (a_k . e)(b_l . e)
    return np.einsum("kl,ki,lj->ij", theta.coupling, a, b)


def validate_theta(theta: RobinOperator, mesh: Mesh, t_samples=(0.0,)) -> ThetaReport:
    """Smallest eigenvalue of the symmetrised boundary integral of theta, worst over t."""
    if len(mesh.boundary_facets) == 0:
        raise ValueError("mesh has an empty boundary")
    delta, t_worst, nonneg = np.inf, None, True
    pts, _, _ = boundary_quadrature(mesh)
    flat = pts.reshape(-1, mesh.dim)
    for t in t_samples:
        S = theta_integral(theta, mesh, t)
        ev = float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])
        if ev < delta:
            delta, t_worst = ev, float(t)
        if theta.kind == "multiplier":
            th = theta.evaluate(flat, t)
            pointwise = np.linalg.eigvalsh(0.5 * (th + th.transpose(0, 2, 1)))[:, 0]
            nonneg &= bool(pointwise.min() >= -1e-10)
        else:
            c = theta.coupling
            nonneg &= bool(np.linalg.eigvalsh(0.5 * (c + c.T))[0] >= -1e-10)
            phi, psi = theta.profiles(flat, t)
            nonneg &= bool(np.allclose(phi, psi, rtol=0, atol=1e-14))
    return ThetaReport(delta=delta, nonneg_ok=nonneg, t_worst=t_worst)


# ---------------------------------------------------------------------------
# catalog

_CALL = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def parse_call(spec: str) -> tuple[str, list[float]]:
    """Split "name(a, b)" into ("name", [a, b])."""
    mt = _CALL.match(spec)
    if not mt:
        raise CatalogError(f"malformed catalog entry {spec!r}")
    name, args = mt.group(1), mt.group(2)
    if args is None or not args.strip():
        return name, []
    try:
        return name, [float(a) for a in args.split(",")]
    except ValueError:
        raise CatalogError(f"non-numeric parameters in {spec!r}") from None


def _identity_tensor(n, m):
    return np.einsum("ab,ij->abij", np.eye(n), np.eye(m))


def _const_field(T, lam, name):
    n, m = T.shape[0], T.shape[2]

    def ev(x, t):
        return np.broadcast_to(T, (len(x),) + T.shape).copy()

    return CoefficientField(m=m, n=n, evaluator=ev, lam=lam, name=name)


def coefficient(spec: str, n: int, m: int = 1) -> CoefficientField:
    """Build a catalog coefficient field.

    laplace                 A^{ab} = delta_ab I_m
    diag(a1,..,an)          scalar, A = diag(a)
    system2_skew(eps)       m = 2, A^{ab} = delta_ab (I + eps J), J skew
    checkerboard(a,b)       scalar, a or b on a checkerboard of 0.25-cells
    skew2d(eps)             scalar 2D, [[1, eps], [-eps, 1]]
    skew2d_t(eps,rate)      scalar 2D, (1 + rate t) I + eps J  (time dependent)
    smooth(a)               scalar, (1 + a sin(2 pi x_1)) I, a < 1
    """
    name, p = parse_call(spec)
    if name == "laplace":
        return _const_field(_identity_tensor(n, m), 1.0, spec)
    if name == "diag":
        if m != 1 or len(p) != n:
            raise CatalogError(f"diag needs m=1 and {n} entries")
        T = np.diag(p)[:, :, None, None]
        lam = min(min(p), 1.0 / max(p))
        return _const_field(T, lam, spec)
    if name == "system2_skew":
        if m != 2 or len(p) != 1:
            raise CatalogError("system2_skew(eps) needs m=2")
        eps = p[0]
        J = np.array([[0.0, 1.0], [-1.0, 0.0]])
        T = np.einsum("ab,ij->abij", np.eye(n), np.eye(2) + eps * J)
        return _const_field(T, 1.0 / np.hypot(1.0, eps), spec)
    if name == "checkerboard":
        if m != 1 or len(p) != 2:
            raise CatalogError("checkerboard(a,b) is scalar")
        a, b = p

        def ev(x, t):
            parity = np.floor(4.0 * x).astype(int).sum(axis=1) % 2
            val = np.where(parity == 0, a, b)
            return val[:, None, None, None, None] * np.eye(n)[None, :, :, None, None]

        return CoefficientField(1, n, ev, min(a, b, 1.0 / max(a, b)), True, spec)
    if name in ("skew2d", "skew2d_t"):
        if n != 2 or m != 1:
            raise CatalogError(f"{name} is scalar two-dimensional")
        eps = p[0]
        rate = p[1] if name == "skew2d_t" else 0.0
        J = np.array([[0.0, 1.0], [-1.0, 0.0]])

        def ev(x, t):
            T = (1.0 + rate * t) * np.eye(2) + eps * J
            return np.broadcast_to(T[:, :, None, None], (len(x), 2, 2, 1, 1)).copy()

        lam = 1.0 / np.hypot(1.0 + abs(rate), eps)
        return CoefficientField(1, 2, ev, lam, rate == 0.0, spec)
    if name == "smooth":
        if m != 1 or len(p) != 1 or not abs(p[0]) < 1:
            raise CatalogError("smooth(a) is scalar with |a| < 1")
        a = p[0]

        def ev(x, t):
            val = 1.0 + a * np.sin(2 * np.pi * x[:, 0])
            return val[:, None, None, None, None] * np.eye(n)[None, :, :, None, None]

        # 1 - |a| <= 1 / (1 + |a|), so the lower bound is binding
        return CoefficientField(1, n, ev, 1.0 - abs(a), True, spec)
    raise CatalogError(f"unknown coefficient {name!r}")


def robin(spec: str, m: int = 1) -> RobinOperator:
    """Build a catalog Robin operator.

    theta_const(c)          c I_m
    theta_matrix(a11,...)   constant m x m matrix, row-major
    theta_sides(cl,cr)      1D: c_l at x = 0 (left end), c_r elsewhere; scalar
    theta_growing(c)        c (1 + t) I_m
    theta_rank1(c)          finite rank: phi = psi = (1,...,1), coupling c
    """
    name, p = parse_call(spec)
    if name == "theta_const":
        if len(p) != 1:
            raise CatalogError("theta_const(c)")
        c = p[0]
        return RobinOperator("multiplier", m, theta=_const_theta(c * np.eye(m)),
                             claimed_nonneg=c >= 0, name=spec)
    if name == "theta_matrix":
        if len(p) != m * m:
            raise CatalogError(f"theta_matrix needs {m * m} entries")
        T = np.array(p).reshape(m, m)
        nonneg = bool(np.linalg.eigvalsh(0.5 * (T + T.T))[0] >= -1e-12)
        return RobinOperator("multiplier", m, theta=_const_theta(T), claimed_nonneg=nonneg, name=spec)
    if name == "theta_sides":
        if m != 1 or len(p) != 2:
            raise CatalogError("theta_sides(cl,cr) is scalar")
        cl, cr = p

        def th(x, t):
            return np.where(x[:, 0] < 1e-12, cl, cr)[:, None, None].astype(float)

        return RobinOperator("multiplier", 1, theta=th, claimed_nonneg=min(cl, cr) >= 0, name=spec)
    if name == "theta_growing":
        c = p[0]

        def th(x, t):
            return np.broadcast_to(c * (1.0 + t) * np.eye(m), (len(x), m, m)).copy()

        return RobinOperator("multiplier", m, theta=th, time_independent=False,
                             claimed_nonneg=c >= 0, name=spec)
    if name == "theta_rank1":
        c = p[0]

        def prof(x, t):
            return np.ones((len(x), 1, m))

        return RobinOperator("finite_rank_nonlocal", m, phi=prof, coupling=np.array([[c]]),
                             claimed_nonneg=c >= 0, name=spec)
    raise CatalogError(f"unknown Robin operator {name!r}")


def _const_theta(T):
    def th(x, t):
        return np.broadcast_to(T, (len(x),) + T.shape).copy()
    return th

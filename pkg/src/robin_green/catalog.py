"""Named test problems and seeded random data for sweeps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .coeff import coefficient, robin
from .mesh import Mesh, build_interval_mesh, build_lshape_mesh, build_rectangle_mesh, refine
from .parabolic import RobinProblem


def build_domain(kind: str, params=()) -> Mesh:
    """interval(a, b, n) | rectangle(w, h, nx, ny) | lshape(n)."""
    p = list(params)
    if kind == "interval":
        a, b, n = p if p else (0.0, 1.0, 16)
        return build_interval_mesh(float(a), float(b), int(n))
    if kind == "rectangle":
        w, h, nx, ny = p if p else (1.0, 1.0, 8, 8)
        return build_rectangle_mesh(float(w), float(h), int(nx), int(ny))
    if kind == "lshape":
        (n,) = p if p else (4,)
        return build_lshape_mesh(int(n))
    raise KeyError(f"unknown domain kind {kind!r}")


@dataclass(frozen=True)
class CatalogEntry:
    domain: str
    coefficient: str
    theta: str
    m: int = 1

    def mesh(self, level: int = 0) -> Mesh:
        mesh = build_domain(self.domain)
        for _ in range(level):
            mesh = refine(mesh)
        return mesh

    def problem(self, level: int = 0, lumped: bool = False) -> RobinProblem:
        mesh = self.mesh(level)
        return RobinProblem(mesh, coefficient(self.coefficient, mesh.dim, self.m),
                            robin(self.theta, self.m), lumped=lumped)


SCALAR_1D = (
    CatalogEntry("interval", "laplace", "theta_const(1)"),
    CatalogEntry("interval", "checkerboard(1,3)", "theta_const(0.5)"),
    CatalogEntry("interval", "smooth(0.5)", "theta_sides(0,2)"),
    CatalogEntry("interval", "laplace", "theta_const(0)"),
    CatalogEntry("interval", "diag(2)", "theta_const(4)"),
)

MIXED = SCALAR_1D + (
    CatalogEntry("rectangle", "laplace", "theta_const(1)"),
    CatalogEntry("rectangle", "skew2d(0.3)", "theta_rank1(1)"),
    CatalogEntry("lshape", "checkerboard(1,2)", "theta_const(0.5)"),
    CatalogEntry("interval", "system2_skew(0.5)", "theta_matrix(1,0.2,0.2,1)", 2),
    CatalogEntry("rectangle", "skew2d_t(0.3,2)", "theta_growing(1)"),
)


@dataclass(frozen=True)
class SeededCase:
    entry: CatalogEntry
    seed: int
    psi0: Callable          # (P, n) -> (P, m)
    f: Callable             # (P, n), t -> (P, m)

    def initial_vector(self, problem: RobinProblem) -> np.ndarray:
        """Nodal interpolant of psi0, component-major."""
        return np.asarray(self.psi0(problem.mesh.vertices)).T.ravel().copy()


def smooth_random(rng: np.random.Generator, n: int, m: int, modes: int = 3, time_dependent=False):
    """Random trigonometric function of x (and optionally t) with m components."""
    k = rng.integers(0, 4, size=(modes, n))
    ph = rng.uniform(0, 2 * np.pi, size=(modes, n))
    amp = rng.standard_normal((modes, m))
    rate = rng.uniform(-2.0, 2.0, size=modes) if time_dependent else np.zeros(modes)

    def fn(x, t=0.0):
        x = np.atleast_2d(x)
        waves = np.prod(np.cos(np.pi * k[None] * x[:, None, :] + ph[None]), axis=2)   # (P, modes)
        return (waves * np.cos(rate * t)[None]) @ amp

    return fn


def seeded_cases(count: int, seed: int = 0, entries=MIXED) -> list[SeededCase]:
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        entry = entries[i % len(entries)]
        n = 1 if entry.domain == "interval" else 2
        out.append(SeededCase(entry, i, smooth_random(rng, n, entry.m),
                              smooth_random(rng, n, entry.m, time_dependent=True)))
    return out

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from robin_green.assembly import (NodalField, SolverError, ShiftedSolver, assemble_load, assemble_mass,
                                  assemble_robin, assemble_stiffness, assemble_unit_stiffness,
                                  export_coo, is_symmetric, solve_spd)
from robin_green.coeff import coefficient, robin
from robin_green.mesh import build_interval_mesh, build_lshape_mesh, build_rectangle_mesh

MESHES = [build_interval_mesh(0, 1, 7), build_rectangle_mesh(1, 2, 3, 2), build_lshape_mesh(2)]


def test_single_element_mass():
    m = build_interval_mesh(0, 1, 1)
    assert np.allclose(assemble_mass(m).toarray(), [[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    assert np.allclose(assemble_mass(m, lumped=True).toarray(), np.diag([0.5, 0.5]))


@pytest.mark.parametrize("mesh", MESHES)
@pytest.mark.parametrize("m", [1, 2])
def test_mass_partition_of_unity(mesh, m):
    M = assemble_mass(mesh, m)
    one = np.ones(M.shape[0])
    assert one @ M @ one == pytest.approx(m * mesh.measure, rel=1e-12)
    L = assemble_mass(mesh, m, lumped=True)
    assert np.allclose(L @ one, M @ one, rtol=1e-14)
    assert is_symmetric(M)
    assert np.linalg.eigvalsh(M.toarray()).min() > 0


def test_single_element_stiffness():
    K = assemble_stiffness(build_interval_mesh(0, 1, 1), coefficient("laplace", 1))
    assert np.allclose(K.toarray(), [[1, -1], [-1, 1]])


@pytest.mark.parametrize("mesh", MESHES)
@pytest.mark.parametrize("name", ["laplace", "checkerboard(1,3)", "smooth(0.5)"])
def test_constants_in_kernel(mesh, name):
    K = assemble_stiffness(mesh, coefficient(name, mesh.dim))
    assert np.abs(K @ np.ones(K.shape[0])).max() < 1e-12


def test_linear_field_energy():
    mesh = build_rectangle_mesh(1, 1, 5, 3)
    K = assemble_stiffness(mesh, coefficient("laplace", 2).scaled(2.0))
    u = mesh.vertices[:, 0]
    assert u @ K @ u == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("mesh", MESHES[1:])
@pytest.mark.parametrize("name", ["skew2d(0.3)", "smooth(0.5)"])
def test_adjoint_coefficients_give_transpose(mesh, name):
    f = coefficient(name, 2)
    K, Ks = assemble_stiffness(mesh, f), assemble_stiffness(mesh, f.adjoint())
    assert abs(K.T - Ks).max() == 0.0


def test_system_adjoint_transpose():
    mesh = build_interval_mesh(0, 1, 6)
    f = coefficient("system2_skew(0.4)", 1, 2)
    K, Ks = assemble_stiffness(mesh, f), assemble_stiffness(mesh, f.adjoint())
    assert abs(K.T - Ks).max() == 0.0
    assert not is_symmetric(K)


def test_robin_multiplier_transpose():
    mesh = build_rectangle_mesh(1, 1, 3, 3)
    th = robin("theta_matrix(1,0.4,-0.2,2)", 2)
    B, Bt = assemble_robin(mesh, th), assemble_robin(mesh, th.transpose())
    assert np.array_equal(B.toarray().T, Bt.toarray())


@given(st.floats(0.1, 10.0))
def test_linear_scaling(c):
    mesh = build_rectangle_mesh(1, 1, 3, 2)
    f = coefficient("checkerboard(1,2)", 2)
    K, Kc = assemble_stiffness(mesh, f), assemble_stiffness(mesh, f.scaled(c))
    assert abs(Kc - c * K).max() <= 1e-14 * c * abs(K).max()
    th = robin("theta_const(1)")
    B, Bc = assemble_robin(mesh, th), assemble_robin(mesh, th.scaled(c))
    assert np.abs(Bc.toarray() - c * B.toarray()).max() <= 1e-14 * c


def test_robin_interval_endpoints():
    B = assemble_robin(build_interval_mesh(0, 1, 4), robin("theta_const(1)")).toarray()
    assert np.array_equal(B, np.diag([1.0, 0, 0, 0, 1.0]))


def test_robin_square_perimeter():
    mesh = build_rectangle_mesh(1, 1, 4, 4)
    B = assemble_robin(mesh, robin("theta_const(2.5)"))
    one = np.ones(mesh.n_vertices)
    assert B.quad(one) == pytest.approx(4 * 2.5, rel=1e-12)
    interior = np.setdiff1d(np.arange(mesh.n_vertices), mesh.boundary_vertices)
    assert abs(B.sparse[interior]).max() == 0.0


def test_robin_rank_one_interval(rng):
    mesh = build_interval_mesh(0, 1, 5)
    B = assemble_robin(mesh, robin("theta_rank1(1)"))
    assert B.rank == 1
    u = rng.standard_normal(mesh.n_vertices)
    assert B.quad(u) == pytest.approx((u[0] + u[-1]) ** 2, rel=1e-12)


def test_robin_psd_when_claimed(rng):
    mesh = build_lshape_mesh(2)
    for name in ["theta_const(1)", "theta_rank1(2)"]:
        ev = np.linalg.eigvalsh(assemble_robin(mesh, robin(name)).sym())
        assert ev.min() > -1e-12


def test_load_partition_of_unity():
    mesh = build_interval_mesh(0, 1, 9)
    F = assemble_load(mesh, lambda x, t: np.ones((len(x), 1)), 0.0, 1)
    assert F.sum() == pytest.approx(1.0, rel=1e-14)
    assert not assemble_load(mesh, lambda x, t: np.zeros((len(x), 1)), 0.0, 1).any()
    assert not assemble_load(mesh, None, 0.0, 1).any()


def test_load_cell_indicator():
    mesh = build_rectangle_mesh(1, 1, 4, 4)
    c = 5
    area = mesh.cell_measures[c]

    def f(x, t):
        cell = np.array([mesh.locate(p)[0] for p in x])
        return ((cell == c) / area)[:, None]

    # the indicator is constant on each cell, so cell quadrature is exact
    assert assemble_load(mesh, f, 0.0, 1).sum() == pytest.approx(1.0, rel=1e-12)


def test_unit_stiffness_gradient_norm():
    mesh = build_lshape_mesh(2)
    K = assemble_unit_stiffness(mesh, 2)
    u = np.concatenate([mesh.vertices[:, 0], 3 * mesh.vertices[:, 1]])
    assert u @ K @ u == pytest.approx(10 * mesh.measure, rel=1e-12)


def test_nodal_field_checks():
    mesh = build_interval_mesh(0, 1, 2)
    with pytest.raises(ValueError):
        NodalField(mesh, 2, np.zeros(3))
    f = NodalField(mesh, 2, np.arange(6.0))
    assert np.array_equal(f.component(1), [3.0, 4.0, 5.0])
    assert np.allclose(f.at([0.25]), [0.5, 3.5])


def test_solve_spd_examples(rng):
    b = rng.standard_normal(5)
    assert np.allclose(solve_spd(sp.identity(5), b), b)
    assert np.allclose(solve_spd(sp.diags([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])
    Q = rng.standard_normal((50, 50))
    A = Q @ Q.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    x = solve_spd(A, b, tol=1e-10)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert np.array_equal(x, solve_spd(A, b, tol=1e-10))


def test_solve_spd_errors():
    with pytest.raises(ValueError):
        solve_spd(sp.identity(3), np.ones(4))
    with pytest.raises(ValueError):
        solve_spd(sp.identity(3), np.ones(3), tol=0)
    with pytest.raises(SolverError):
        solve_spd(sp.diags([1.0, -1.0]), np.ones(2))


def test_shifted_solver_lowrank(rng):
    mesh = build_interval_mesh(0, 1, 8)
    M = assemble_mass(mesh)
    K = assemble_stiffness(mesh, coefficient("laplace", 1))
    B = assemble_robin(mesh, robin("theta_rank1(2)"))
    S = ShiftedSolver(M, K, B, 0.3)
    rhs = rng.standard_normal(mesh.n_vertices)
    x = S.solve(rhs)
    dense = M.toarray() + 0.3 * (K.toarray() + B.toarray())
    assert np.allclose(dense @ x, rhs, atol=1e-12)
    assert S.residual(x, rhs) < 1e-12


def test_export_coo(tmp_path):
    p = tmp_path / "k.txt"
    export_coo(assemble_stiffness(build_interval_mesh(0, 1, 1), coefficient("laplace", 1)), p)
    rows = [line.split() for line in p.read_text().splitlines()]
    assert rows[0] == ["0", "0", "1"]
    assert len(rows) == 4

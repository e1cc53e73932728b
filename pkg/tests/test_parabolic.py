import json

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from robin_green.catalog import MIXED, SCALAR_1D, seeded_cases
from robin_green.coeff import coefficient, robin
from robin_green.mesh import build_interval_mesh
from robin_green.parabolic import (RobinProblem, TimeGrid, decay_rate, energy_identity_residuals,
                                   energy_ratio, lp_norm_spacetime, solve_backward_adjoint,
                                   solve_forward, step, tri_norm)


def interval_problem(n=32, coeff="laplace", theta="theta_const(1)", lumped=False):
    mesh = build_interval_mesh(0, 1, n)
    return RobinProblem(mesh, coefficient(coeff, 1), robin(theta), lumped=lumped)


def lowest_mode(problem):
    L = problem.stiffness(0).toarray() + problem.robin(0).toarray()
    mu, V = sla.eigh(L, problem.mass.toarray())
    return mu[0], V[:, 0]


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 4, "rk4")
    g = TimeGrid(0.0, 1.0, 4)
    assert g.index_of(0.75) == 3
    with pytest.raises(ValueError):
        g.index_of(0.3)


def test_zero_step_stays_zero():
    P = interval_problem()
    for scheme in ("implicit_euler", "crank_nicolson"):
        assert not step(P, np.zeros(P.size), 0.0, 0.1, scheme=scheme).any()
    with pytest.raises(ValueError):
        step(P, np.zeros(P.size), 0.0, 0.0)
    with pytest.raises(ValueError):
        step(P, np.zeros(P.size + 1), 0.0, 0.1)


def test_eigenmode_step():
    P = interval_problem()
    mu, v = lowest_mode(P)
    dt = 0.05
    assert np.allclose(step(P, v, 0.0, dt), v / (1 + dt * mu), atol=1e-12)
    cn = (1 - 0.5 * dt * mu) / (1 + 0.5 * dt * mu)
    assert np.allclose(step(P, v, 0.0, dt, scheme="crank_nicolson"), cn * v, atol=1e-12)


def test_scheme_orders():
    P = interval_problem()
    mu, v = lowest_mode(P)
    errs = {"implicit_euler": [], "crank_nicolson": []}
    for steps in (10, 20, 40):
        for scheme in errs:
            u = solve_forward(P, v, TimeGrid(0, 1, steps, scheme)).snapshots[-1]
            errs[scheme].append(np.abs(u - np.exp(-mu) * v).max())
    ie, cn = np.array(errs["implicit_euler"]), np.array(errs["crank_nicolson"])
    assert np.all(np.abs(np.log2(ie[:-1] / ie[1:]) - 1) < 0.1)
    assert np.all(np.abs(np.log2(cn[:-1] / cn[1:]) - 2) < 0.1)


def test_determinism(rng):
    case = seeded_cases(10)[9]
    P = case.entry.problem()
    u0 = case.initial_vector(P)
    grid = TimeGrid(0, 0.5, 10)
    a = solve_forward(P, u0, grid, case.f)
    b = solve_forward(case.entry.problem(), u0, grid, case.f)
    assert np.array_equal(a.snapshots, b.snapshots)


def test_mass_norm_nonincreasing(rng):
    for entry in SCALAR_1D:
        P = entry.problem(level=1)
        traj = solve_forward(P, rng.standard_normal(P.size), TimeGrid(0, 1, 40))
        mass = traj.energy_log[:, 0]
        assert np.all(np.diff(mass) <= 1e-14 * mass[0])


def test_eigenfunction_norm_decay():
    P = interval_problem()
    mu, v = lowest_mode(P)
    traj = solve_forward(P, v, TimeGrid(0, 2, 200))
    expected = (1 + 0.01 * mu) ** (-2 * np.arange(201))
    assert np.allclose(traj.energy_log[:, 0], expected, rtol=1e-10)
    assert decay_rate(traj) == pytest.approx(np.log1p(0.01 * mu) / 0.01, rel=1e-8)


def test_neumann_constant_is_stationary():
    P = interval_problem(theta="theta_const(0)")
    traj = solve_forward(P, np.ones(P.size), TimeGrid(0, 1, 10))
    assert np.allclose(traj.snapshots, 1.0, atol=1e-13)
    assert abs(decay_rate(traj)) < 1e-10


@pytest.mark.parametrize("scheme", ["implicit_euler", "crank_nicolson"])
def test_backward_equals_forward_for_symmetric_data(rng, scheme):
    P = interval_problem(coeff="checkerboard(1,3)")
    psi = rng.standard_normal(P.size)
    grid = TimeGrid(0, 0.5, 25, scheme)
    fw = solve_forward(P, psi, grid)
    bw = solve_backward_adjoint(P, psi, grid)
    assert np.allclose(fw.snapshots, bw.snapshots, atol=1e-12)
    assert bw.times[0] == 0.5 and bw.times[-1] == 0.0


@pytest.mark.parametrize("index", range(len(MIXED)))
@pytest.mark.parametrize("scheme", ["implicit_euler", "crank_nicolson"])
def test_duality_pairing(rng, index, scheme):
    P = MIXED[index].problem()
    u0, psi = rng.standard_normal(P.size), rng.standard_normal(P.size)
    grid = TimeGrid(0, 0.4, 8, scheme)
    uN = solve_forward(P, u0, grid).snapshots[-1]
    v0 = solve_backward_adjoint(P, psi, grid).snapshots[-1]
    M = P.mass
    lhs, rhs = uN @ (M @ psi), u0 @ (M @ v0)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_tri_norm_and_ratio_of_zero_data():
    P = interval_problem()
    traj = solve_forward(P, np.zeros(P.size), TimeGrid(0, 1, 5))
    assert tri_norm(traj) == 0.0
    assert energy_ratio(traj, None, np.zeros(P.size)) == 0.0


def test_tri_norm_neumann_constant():
    P = interval_problem(theta="theta_const(0)")
    traj = solve_forward(P, 2 * np.ones(P.size), TimeGrid(0, 1, 5))
    assert tri_norm(traj) == pytest.approx(2.0, rel=1e-12)


def test_lp_norm_of_constant():
    P = interval_problem()
    grid = TimeGrid(0, 2, 4)
    one = lambda x, t: np.full((len(x), 1), 3.0)
    assert lp_norm_spacetime(P, one, grid, 1.5) == pytest.approx(3.0 * 2 ** (1 / 1.5), rel=1e-12)
    assert lp_norm_spacetime(P, None, grid, 2) == 0.0


@pytest.mark.parametrize("level", [0, 1, 2])
def test_energy_identity_on_catalog(level):
    for case in seeded_cases(20):
        P = case.entry.problem()
        grid = TimeGrid(0, 0.5, 16 * 2 ** level)
        loads = np.array([P.load(case.f, t) for t in grid.times])
        traj = solve_forward(P, case.initial_vector(P), grid, loads=loads)
        assert energy_identity_residuals(traj, loads).max() < 1e-12
        assert energy_ratio(traj, case.f, case.initial_vector(P)) <= 1.0


def test_energy_identity_rejects_cn():
    P = interval_problem()
    traj = solve_forward(P, np.ones(P.size), TimeGrid(0, 1, 4, "crank_nicolson"))
    with pytest.raises(ValueError):
        energy_identity_residuals(traj)


def test_causality():
    P = interval_problem()
    grid = TimeGrid(0, 1, 20)

    def f(x, t):
        return np.full((len(x), 1), 1.0 if t > 0.5 else 0.0)

    traj = solve_forward(P, np.zeros(P.size), grid, f)
    assert not traj.snapshots[:11].any()
    assert traj.snapshots[11:].any()


@settings(max_examples=10)
@given(st.integers(0, 2 ** 31))
def test_positivity_with_lumped_mass(seed):
    rng = np.random.default_rng(seed)
    P = interval_problem(n=16, lumped=True)
    u0 = rng.uniform(0, 1, P.size)
    traj = solve_forward(P, u0, TimeGrid(0, 0.2, 10))
    assert traj.snapshots.min() >= 0.0


def test_time_dependent_data_resampled():
    P = RobinProblem(build_interval_mesh(0, 1, 8), coefficient("laplace", 1), robin("theta_growing(1)"))
    assert not P.time_independent
    assert P.robin(0.0).toarray()[0, 0] == 1.0
    assert P.robin(1.0).toarray()[0, 0] == 2.0


def test_trajectory_io(tmp_path):
    P = interval_problem(n=4)
    traj = solve_forward(P, np.ones(P.size), TimeGrid(0, 1, 3))
    assert traj.at([0.5], 1.0)[0] == pytest.approx(traj.snapshots[-1][2])
    with pytest.raises(ValueError):
        traj.at([0.5], 0.5)
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0].split(",")[:3] == ["step", "t", "u0"]
    assert len(rows) == 5
    back = np.array([[float(v) for v in r.split(",")[2:]] for r in rows[1:]])
    assert np.array_equal(back, traj.snapshots)
    side = json.loads((tmp_path / "traj.energy.json").read_text())
    assert np.array_equal(np.array(side["energy_log"]), traj.energy_log)


def test_constant_data_mass_strictly_decreasing():
    from robin_green.oracle import dense_reference_solve
    P = interval_problem(n=64)
    grid = TimeGrid(0, 0.5, 100)
    traj = solve_forward(P, np.ones(P.size), grid)
    one = np.ones(P.size)
    mass = traj.snapshots @ (P.mass @ one)
    assert np.all(np.diff(mass) < 0)
    fd = dense_reference_solve(lambda x: np.ones_like(x), 1, 1, lambda x: np.ones_like(x), 0, 0.5, 100, 512)
    w = np.full(513, 1 / 512)
    w[0] = w[-1] = 0.5 / 512
    fd_mass = fd.values @ w
    assert np.allclose(mass, fd_mass, rtol=1e-3)


def test_eigenmode_tri_norm_closed_form():
    P = interval_problem()
    mu, v = lowest_mode(P)
    dt, steps = 0.02, 50
    traj = solve_forward(P, v, TimeGrid(0, 1, steps))
    q2 = (1 + dt * mu) ** -2.0
    e1 = P.lambda_tilde * (v @ P.unit_stiffness @ v) + P.robin(0).quad(v)
    geometric = dt * q2 * (1 - q2 ** steps) / (1 - q2)
    assert tri_norm(traj) == pytest.approx(np.sqrt(1 + e1 * geometric), rel=1e-8)
    # the infinite-horizon sum bounds every finite window
    bound = np.sqrt(1 + e1 * dt * q2 / (1 - q2))
    assert energy_ratio(traj, None, v) <= bound


@pytest.mark.parametrize("index", [0, 1, 2, 4, 5, 7])
def test_decay_rate_at_least_theta0(index):
    from robin_green.coercivity import check_h1
    P = MIXED[index].problem()
    th0 = check_h1(P.mesh, P.field, P.theta).theta0
    u0 = np.random.default_rng(index).standard_normal(P.size)
    traj = solve_forward(P, u0, TimeGrid(0, 4, 400))
    assert decay_rate(traj) >= th0 - 1e-6

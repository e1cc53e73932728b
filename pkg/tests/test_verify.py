import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robin_green.catalog import MIXED
from robin_green.coeff import coefficient, robin
from robin_green.green import KernelMatrixSample
from robin_green.mesh import build_interval_mesh, build_rectangle_mesh
from robin_green.parabolic import RobinProblem, TimeGrid, solve_forward
from robin_green.verify import (BoundReport, check_decay_vs_theta0, check_elliptic_bounds,
                                check_local_boundedness, check_offdiagonal_decay, check_symmetry,
                                duality_error, envelope_violations, fit_gaussian_bound,
                                local_bound_ratio)


def gaussian_samples(C=1.0, kappa=0.25, n=1):
    out = []
    for t in (0.01, 0.02, 0.05, 0.1):
        for d in (0.0, 0.05, 0.1, 0.2, 0.3):
            x = np.zeros(n)
            x[0] = d
            val = C * math.sqrt(t) ** (-n) * math.exp(-kappa * d * d / t)
            out.append(KernelMatrixSample(x, t, np.zeros(n), 0.0, [[val]]))
    return out


@pytest.mark.parametrize("n", [1, 2])
def test_synthetic_gaussian_recovered(n):
    fit = fit_gaussian_bound(gaussian_samples(n=n), diam=10.0)
    assert fit.kappa == pytest.approx(0.25, abs=1e-10)
    assert fit.C == pytest.approx(1.0, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.violations == 0 and fit.passed


def test_gaussian_kappa_window():
    assert not fit_gaussian_bound(gaussian_samples(kappa=0.5), diam=10.0).passed


def test_gaussian_rejects_bad_samples():
    s = gaussian_samples()
    with pytest.raises(ValueError):
        fit_gaussian_bound(s + [KernelMatrixSample([0.1], 0.0, [0.0], 0.1, [[1.0]])], 10.0)
    with pytest.raises(ValueError):
        fit_gaussian_bound(s[:5], 10.0)
    on_diag = [KernelMatrixSample([0.0], 0.01 * (i + 1), [0.0], 0.0, [[1.0]]) for i in range(10)]
    with pytest.raises(ValueError):
        fit_gaussian_bound(on_diag + s[1:3], 10.0)
    with pytest.raises(ValueError):
        fit_gaussian_bound(s, 10.0, slack=0.5)


def test_envelope_counts_outliers():
    s = gaussian_samples()
    fit = fit_gaussian_bound(s, diam=10.0)
    big = KernelMatrixSample([0.0], 0.01, [0.0], 0.0, [[100.0]])
    assert envelope_violations(s + [big], fit, 10.0) == 1


@settings(max_examples=10)
@given(st.integers(0, 2 ** 31))
def test_gaussian_fit_order_independent(seed):
    rng = np.random.default_rng(seed)
    s = gaussian_samples()
    for smp in s:
        smp.value = smp.value * math.exp(0.1 * rng.standard_normal())
    a = fit_gaussian_bound(s, 10.0)
    rng.shuffle(s)
    b = fit_gaussian_bound(s, 10.0)
    assert a.kappa == pytest.approx(b.kappa, rel=1e-12, abs=1e-15)
    assert a.C == pytest.approx(b.C, rel=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_offdiagonal_power_recovered(n):
    samples = []
    for j in range(12):
        d = 0.01 * 2 ** (j / 2)
        x = np.zeros(n)
        x[0] = d
        samples.append(KernelMatrixSample(x, 1e-8, np.zeros(n), 0.0, [[d ** (-n)]]))
    rep = check_offdiagonal_decay(samples, n, h=0.004, d_Y=0.5)
    assert rep.exponent_fitted == pytest.approx(n, abs=1e-10)
    assert rep.passed
    # d < 4h and d > d_Y / 2 are excluded
    assert rep.excluded == sum(1 for s in samples if not 0.016 <= s.distance <= 0.25)
    assert rep.n_samples + rep.excluded == len(samples)


def test_offdiagonal_ladder_too_short():
    samples = [KernelMatrixSample([d], 1e-8, [0.0], 0.0, [[1 / d]]) for d in (0.1, 0.11, 0.12)]
    with pytest.raises(ValueError):
        check_offdiagonal_decay(samples, 1, h=0.001)


def test_symmetry_cn_exact():
    P = MIXED[8].problem()
    rep = check_symmetry([P], [([0.3], 0.5, [0.7], 0.1)], [40], scheme="crank_nicolson")
    assert rep.passed
    assert rep.constants["errors"][0] <= 1e-8


def test_duality_error_orientation():
    P = MIXED[0].problem()
    a = duality_error(P, [([0.3], 0.5, [0.7], 0.1)], 40)
    b = duality_error(P, [([0.7], 0.1, [0.3], 0.5)], 40)
    assert a == b
    with pytest.raises(ValueError):
        duality_error(P, [([0.3], 0.5, [0.7], 0.5)], 40)


def test_elliptic_log_synthetic():
    mesh = build_rectangle_mesh(1, 1, 32, 32)
    y = np.array([0.5, 0.5])
    r = np.linalg.norm(mesh.vertices - y, axis=1)
    vals = np.log(1.0 / np.maximum(r, 1e-3)) / (2 * np.pi) + 0.1
    rep = check_elliptic_bounds(vals, mesh, y, 2, diam=math.sqrt(2))
    assert rep.kind == "elliptic_log" and rep.passed
    assert rep.constants["log_remainder"] == pytest.approx(0.1, abs=1e-12)


def test_elliptic_bounded_1d():
    mesh = build_interval_mesh(0, 1, 8)
    rep = check_elliptic_bounds(np.linspace(0, 1, 9), mesh, [0.5], 1, diam=1.0)
    assert rep.kind == "bounded" and rep.constants["C"] == 1.0 and rep.passed


def test_elliptic_power_3d_kind():
    # the pointwise check only needs vertices and a mesh size
    class Cloud:
        h = 0.01
        vertices = np.array([[0.05 * 2 ** (j / 2), 0.0, 0.0] for j in range(6)])

    rep = check_elliptic_bounds(1.0 / Cloud.vertices[:, 0], Cloud, [0, 0, 0], 3, diam=1.0)
    assert rep.kind == "elliptic_power" and rep.passed
    assert rep.constants["spread"] == pytest.approx(1.0)


def test_local_ratio_rescale_invariance(rng):
    P = RobinProblem(build_interval_mesh(0, 1, 64), coefficient("laplace", 1), robin("theta_const(1)"))
    traj = solve_forward(P, rng.uniform(0.5, 1.5, P.size), TimeGrid(0, 0.25, 64))
    r = local_bound_ratio(traj, [0.5], 0.5)
    traj.snapshots *= 7.5
    assert local_bound_ratio(traj, [0.5], 0.5) == pytest.approx(r, rel=1e-12)
    with pytest.raises(ValueError):
        local_bound_ratio(traj, [0.5], 1.0)


def test_local_boundedness_report(rng):
    P = RobinProblem(build_interval_mesh(0, 1, 64), coefficient("laplace", 1), robin("theta_const(1)"))
    traj = solve_forward(P, np.ones(P.size), TimeGrid(0, 0.25, 64))
    rep = check_local_boundedness([traj], [0.5], [0.25, 0.5])
    assert rep.kind == "local_bound"
    assert rep.constants["spread"] >= 1.0
    assert rep.n_samples == 2


def _decay_traj(theta, T=40.0, steps=400):
    P = RobinProblem(build_interval_mesh(0, 1, 64), coefficient("laplace", 1), robin(theta))
    return solve_forward(P, np.ones(P.size), TimeGrid(0, T, steps))


def test_decay_certified_rate_passes_and_excess_fails():
    traj = _decay_traj("theta_const(0.05)")
    theta0 = 0.0979616803957496
    assert check_decay_vs_theta0(traj, theta0).passed
    assert not check_decay_vs_theta0(traj, 1.1 * theta0).passed


def test_decay_examples():
    traj = _decay_traj("theta_const(0)", T=1.0, steps=10)
    rep = check_decay_vs_theta0(traj, 0.0)
    assert isinstance(rep, BoundReport) and rep.passed
    assert not check_decay_vs_theta0(traj, 1.0).passed


def test_series_diagonal_decay_exponent():
    from robin_green.oracle import series_heat_kernel_1d
    samples = []
    for j in range(9):
        d = 2 ** (j / 2) / 64
        val = series_heat_kernel_1d(1.0, 1.0, 0.5 + d, 0.5, d * d)
        samples.append(KernelMatrixSample([0.5 + d], d * d, [0.5], 0.0, [[val]], "oracle"))
    rep = check_offdiagonal_decay(samples, 1, h=1 / 256)
    assert 0.8 <= rep.exponent_fitted <= 1.2
    assert rep.passed


def test_local_ratio_single_mode_closed_form():
    import scipy.linalg as sla
    P = RobinProblem(build_interval_mesh(0, 1, 64), coefficient("laplace", 1), robin("theta_const(1)"))
    L = P.stiffness(0).toarray() + P.robin(0).toarray()
    mu, V = sla.eigh(L, P.mass.toarray())
    v = V[:, 0] * np.sign(V[32, 0])
    grid = TimeGrid(0, 0.25, 64)
    traj = solve_forward(P, v, grid)
    R, dt = 0.5, grid.dt
    q = 1 / (1 + dt * mu[0])
    x = P.mesh.vertices[:, 0]
    near = np.abs(x - 0.5) <= R / 2
    k_first = 48                      # t_48 = b - R^2 / 4 opens the cylinder
    sup = q ** k_first * np.abs(v[near]).max()
    l2 = np.sqrt(dt * np.sum(q ** (2 * np.arange(1, 65))))
    expected = sup / (R ** -1.5 * l2)
    assert local_bound_ratio(traj, [0.5], R) == pytest.approx(expected, rel=1e-6)

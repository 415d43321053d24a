import warnings

import numpy as np
import pytest
from sklearn.base import clone

from mfrbsde.diagnostics import obstacle_values
from mfrbsde.exceptions import NumericalError, ValidationError
from mfrbsde.forward import TimeGrid, brownian_panel, constant_coefficients
from mfrbsde.obstacle import make_affine
from mfrbsde.solver import (
    DriverSpec,
    PenalizedParticleSolver,
    Problem,
    SolverConfig,
    constant_driver,
    constant_terminal,
    linear_driver,
    positive_part_terminal,
    solve_deterministic_reduction,
    solve_penalized,
    solve_problem,
    zero_driver,
)

plain = make_affine([1.0], 0.0, [0.0])
mean_coupled = make_affine([1.0], 1.0, [1.0], -5.0)
counterexample = make_affine([1.0], 1.0, [-1.0])


def scalar_problem(c=-1.0, xi=0.0, H=plain):
    return Problem(H, constant_driver([c]), constant_terminal([xi]))


def exact_scalar_penalized(t, m, c=1.0, T=1.0):
    return -(c / m) * (1 - np.exp(-m * (T - t)))


def test_reduction_scalar_closed_form():
    y, k_pen = solve_deterministic_reduction(constant_driver([-1.0]), plain, [0.0], TimeGrid(1.0, 10_000), 100.0)
    assert y[0, 0] == pytest.approx(exact_scalar_penalized(0.0, 100.0), abs=1e-5)
    assert k_pen[-1] == 0.0 and np.all(k_pen >= 0)


def test_reduction_feasible_constant_path():
    y, k_pen = solve_deterministic_reduction(zero_driver(), plain, [2.0], TimeGrid(1.0, 50), 100.0)
    assert np.all(y == 2.0) and np.all(k_pen == 0)


def test_reduction_mean_coupled_limit():
    grid = TimeGrid(1.0, 4000)
    for m in (100.0, 1000.0):
        y, k_pen = solve_deterministic_reduction(constant_driver([-1.0]), mean_coupled, [2.5], grid, m)
        K_T = float(np.sum(k_pen[:-1]) * grid.dt)
        assert abs(y[0, 0] - 2.5) <= 1.0 / m
        assert K_T == pytest.approx(0.5, rel=2.0 / m)
    with pytest.raises(ValidationError):
        solve_deterministic_reduction(DriverSpec(lambda *a: 0, depends_on_x=True), plain, [0.0], grid, 1.0)


@pytest.mark.parametrize("H, xi", [(plain, 0.0), (mean_coupled, 2.5)])
def test_particles_match_reduction_without_noise(H, xi):
    cfg = SolverConfig(N=20, M=1000, m=50.0, basis_degree=0, picard_iters=50, picard_tol=0.0, check_assumptions=False)
    sol = solve_problem(scalar_problem(-1.0, xi, H), cfg)
    y, k_pen = solve_deterministic_reduction(constant_driver([-1.0]), H, [xi], cfg.grid, cfg.m)
    np.testing.assert_allclose(sol.Y[:, :, 0], np.broadcast_to(y, sol.Y[:, :, 0].shape), atol=1e-8, rtol=0)
    np.testing.assert_allclose(sol.k_pen[:, 0], k_pen, atol=1e-6 * cfg.m)


def test_counterexample_stays_on_the_boundary():
    cfg = SolverConfig(N=200, M=200, m=100.0, basis_degree=3)
    problem = Problem(counterexample, zero_driver(), constant_terminal([1.0]), constant_coefficients(0.0, 1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = solve_problem(problem, cfg)
    assert np.max(np.abs(sol.Y - 1.0)) <= 1e-12
    assert np.max(np.abs(sol.Z)) <= 1e-12
    assert np.all(sol.k_pen == 0)


def test_call_payoff_matches_plain_monte_carlo():
    cfg = SolverConfig(N=4000, M=20, m=1.0, basis_degree=3, seed=11)
    problem = Problem(plain, zero_driver(), positive_part_terminal(0.0), constant_coefficients(0.0, 1.0))
    sol = solve_problem(problem, cfg)
    panel = brownian_panel(cfg.seed, cfg.N, cfg.M, 1, cfg.grid.dt)
    mc = np.maximum(panel.increments.sum(axis=0)[:, 0], 0.0).mean()
    assert sol.Y[0].mean() == pytest.approx(mc, abs=5e-3)
    assert sol.Y[0].mean() == pytest.approx(np.sqrt(1 / (2 * np.pi)), abs=4 * 0.6 / np.sqrt(cfg.N))
    assert sol.K_T.mean() <= 0.01


def test_solution_invariants():
    cfg = SolverConfig(N=300, M=200, m=20.0, basis_degree=2, seed=3, check_assumptions=False)
    problem = Problem(
        mean_coupled, linear_driver([-1.0], a_y=-0.2, a_mean=0.1), constant_terminal([2.5]),
        constant_coefficients(0.0, 0.5),
    )
    sol = solve_problem(problem, cfg)
    H = obstacle_values(sol, mean_coupled)
    np.testing.assert_array_equal(sol.k_pen, cfg.m * np.maximum(0.0, -H))
    assert np.all(sol.K[0] == 0) and np.all(np.diff(sol.K, axis=0) >= 0)
    np.testing.assert_allclose(sol.K[1:], np.cumsum(sol.k_pen[:-1] * cfg.grid.dt, axis=0), rtol=1e-12)
    assert sol.Y.shape == (201, 300, 1) and sol.Z.shape == (201, 300, 1, 1)


def test_threads_do_not_change_results():
    cfg = SolverConfig(N=400, M=10, m=2.0, seed=5)
    problem = Problem(plain, zero_driver(), positive_part_terminal(0.2), constant_coefficients(0.0, 1.0))
    a, b = solve_problem(problem, cfg, threads=1), solve_problem(problem, cfg, threads=4)
    for name in ("X", "Y", "Z", "k_pen", "K", "R"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_terminal_projection_applied():
    cfg = SolverConfig(N=10, M=50, m=10.0, basis_degree=0)
    sol = solve_problem(scalar_problem(0.0, -1.0), cfg)
    assert sol.terminal_flow is not None
    assert np.all(sol.Y[-1] >= -cfg.feas_tol)


def test_warnings_for_contraction_and_z_dependence():
    with pytest.warns(UserWarning, match="raise the number of time steps"):
        solve_problem(scalar_problem(), SolverConfig(N=5, M=10, m=5.0, basis_degree=0))
    zdrv = DriverSpec(lambda t, x, y, z, lx, lyz: z[:, :, 0], depends_on_z=True)
    with pytest.warns(UserWarning, match="experimental"):
        solve_problem(Problem(plain, zdrv, constant_terminal([1.0])), SolverConfig(N=5, M=4, m=1.0, basis_degree=0))


def test_non_contraction_raises():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NumericalError, match="M"):
            solve_problem(scalar_problem(), SolverConfig(N=5, M=10, m=1e4, basis_degree=0, picard_iters=20))


def test_config_validation():
    for bad in ({"N": 0}, {"M": 0}, {"m": 0.0}, {"picard_iters": 0}, {"ridge": -1.0}, {"basis_degree": -1}, {"seed": -1}):
        with pytest.raises(ValidationError):
            SolverConfig(**bad)
    with pytest.raises(ValidationError):
        p = scalar_problem()
        solve_penalized(p.coefficients, p.driver, p.terminal, p.obstacle, SolverConfig(N=4, M=2), np.zeros((3, 1)))


def test_estimator_facade():
    problem = Problem(plain, zero_driver(), positive_part_terminal(0.0), constant_coefficients(0.0, 1.0))
    est = PenalizedParticleSolver(problem, n_particles=500, n_steps=10, penalty=1.0, seed=2)
    twin = clone(est)
    assert twin.get_params()["n_particles"] == 500 and twin.problem is not None
    est.fit()
    assert est.solution_.N == 500
    sol = est.solution_
    grid = np.array([[-1.0], [0.0], [1.0]])
    oracle = np.polyval(np.polyfit(sol.X[-1, :, 0], sol.Y[-1, :, 0], 3), grid[:, 0])
    np.testing.assert_allclose(est.predict(grid, t=1.0)[:, 0], oracle, atol=1e-6)
    assert est.predict([[0.0]], t=0.0)[0, 0] == pytest.approx(est.solution_.Y[0].mean(), abs=1e-9)
    with pytest.raises(ValidationError):
        est.predict([[0.0]], t=2.0)
    with pytest.raises(ValidationError):
        PenalizedParticleSolver().fit()

"""Penalized interacting-particle scheme for mean-field reflected BSDEs.

Backward induction on a uniform grid over a shared forward panel. At each
step the continuation value and the diagonal ``Z`` are least-squares
estimates of conditional expectations given ``X[k]``; the implicit
dependence of the driver and of the penalty ``k = m H^-(Y, mu_Y)`` on the
unknown ``Y[k]`` is resolved by Picard iteration.
"""

from __future__ import annotations

import warnings
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import root
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import NumericalError, ValidationError
from .feasibility import DEFAULT_FEAS_TOL, flow_to_feasible_point, project_terminal_particles
from .forward import (
    BrownianPanel,
    CoefficientSpec,
    TimeGrid,
    brownian_panel,
    simulate_forward,
    zero_coefficients,
)
from .obstacle import ObstacleFunctional, SampleDomain, check_assumptions, reflection_increment
from .regression import ConditionalExpectationRegressor

DriverFunc = Callable[..., np.ndarray]


# -- problem data ----------------------------------------------------------


@dataclass(frozen=True)
class DriverSpec:
    """Driver ``f(t, x, y, z, law_x, law_yz) -> (N, n)``.

    ``law_x`` is the ``(N, l)`` atom array of the forward cloud and ``law_yz``
    the ``(N, n + n d)`` atoms of the joint law of ``(Y, Z)``.
    """

    func: DriverFunc
    depends_on_x: bool = False
    depends_on_z: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, t, x, y, z, law_x, law_yz):
        return self.func(t, x, y, z, law_x, law_yz)

    def shifted(self, offset) -> "DriverSpec":
        """The driver plus a constant vector ``offset``."""
        offset = np.atleast_1d(np.asarray(offset, dtype=float))
        base = self.func

        def func(t, x, y, z, law_x, law_yz):
            return base(t, x, y, z, law_x, law_yz) + offset

        return replace(self, func=func, name=f"{self.name}+shift")


def zero_driver(n: int = 1) -> DriverSpec:
    return constant_driver(np.zeros(n), name="zero")


def constant_driver(c, name: str = "constant") -> DriverSpec:
    c = np.atleast_1d(np.asarray(c, dtype=float))

    def func(t, x, y, z, law_x, law_yz):
        return np.broadcast_to(c, y.shape).copy()

    return DriverSpec(func, name=name, params={"c": c.tolist()})


def linear_driver(c, a_y: float = 0.0, a_mean: float = 0.0) -> DriverSpec:
    """``f = c + a_y y + a_mean E[Y]`` with the mean taken under ``law_yz``."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    n = c.shape[0]

    def func(t, x, y, z, law_x, law_yz):
        return c + a_y * y + a_mean * law_yz[:, :n].mean(axis=0)

    return DriverSpec(func, name="linear", params={"c": c.tolist(), "a_y": a_y, "a_mean": a_mean})


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal map ``g(x_T, law_x_T) -> (N, n)``, optionally projected onto ``H >= 0``."""

    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    project: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, x, law_x):
        return self.func(x, law_x)

    def shifted(self, offset) -> "TerminalSpec":
        offset = np.atleast_1d(np.asarray(offset, dtype=float))
        base = self.func
        return replace(self, func=lambda x, law: base(x, law) + offset, name=f"{self.name}+shift")


def constant_terminal(c, project: bool = True) -> TerminalSpec:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return TerminalSpec(
        lambda x, law: np.broadcast_to(c, (x.shape[0], c.shape[0])).copy(),
        project,
        "constant",
        {"value": c.tolist()},
    )


def positive_part_terminal(strike: float = 0.0, weights=None, project: bool = True) -> TerminalSpec:
    """Scalar call payoff ``(w . x - strike)^+``."""

    def func(x, law):
        w = np.ones(x.shape[1]) if weights is None else np.asarray(weights, dtype=float)
        return np.maximum(x @ w - strike, 0.0)[:, None]

    return TerminalSpec(func, project, "positive_part", {"strike": strike, "weights": weights})


def square_terminal(project: bool = True) -> TerminalSpec:
    """Scalar ``|x|^2``."""
    return TerminalSpec(lambda x, law: np.sum(x * x, axis=1)[:, None], project, "square", {})


def linear_terminal(A, c=0.0, project: bool = True) -> TerminalSpec:
    """``g(x) = A x + c``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.broadcast_to(np.asarray(c, dtype=float), (A.shape[0],)).copy()
    return TerminalSpec(lambda x, law: x @ A.T + c, project, "linear", {"A": A.tolist(), "c": c.tolist()})


@dataclass(frozen=True)
class Problem:
    """Everything that defines a mean-field reflected FBSDE instance."""

    obstacle: ObstacleFunctional
    driver: DriverSpec
    terminal: TerminalSpec
    coefficients: CoefficientSpec = field(default_factory=zero_coefficients)
    x0: np.ndarray | None = None
    n: int = 1

    def initial_cloud(self, N: int) -> np.ndarray:
        """``(N, l)`` initial states: a broadcast point or a cycled atom list."""
        l = self.coefficients.state_dim
        if self.x0 is None:
            return np.zeros((N, l))
        x0 = np.asarray(self.x0, dtype=float)
        if x0.ndim <= 1:
            return np.broadcast_to(np.atleast_1d(x0), (N, l)).copy()
        return x0[np.arange(N) % x0.shape[0]].copy()

    def with_terminal(self, terminal: TerminalSpec) -> "Problem":
        return replace(self, terminal=terminal)

    def with_driver(self, driver: DriverSpec) -> "Problem":
        return replace(self, driver=driver)


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings of one penalized particle solve."""

    N: int = 1000
    M: int = 50
    T: float = 1.0
    m: float = 100.0
    picard_iters: int = 5
    picard_tol: float = 1e-10
    basis_degree: int = 3
    ridge: float = 1e-8
    seed: int = 0
    feas_tol: float = DEFAULT_FEAS_TOL
    check_assumptions: bool = True

    def __post_init__(self):
        if self.N < 1 or int(self.N) != self.N:
            raise ValidationError(f"N must be a positive integer, got {self.N}")
        if self.M < 1 or int(self.M) != self.M:
            raise ValidationError(f"M must be a positive integer, got {self.M}")
        if not self.T > 0:
            raise ValidationError("T must be positive")
        if not self.m > 0:
            raise ValidationError("penalty m must be positive")
        if self.picard_iters < 1:
            raise ValidationError("picard_iters must be >= 1")
        if self.picard_tol < 0 or self.ridge < 0 or self.feas_tol < 0:
            raise ValidationError("tolerances and ridge must be nonnegative")
        if self.basis_degree < 0:
            raise ValidationError("basis_degree must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a nonnegative 64-bit integer")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.M)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParticleSolution:
    """Arrays of one solve, indexed ``[k, i, ...]`` on the time grid.

    ``K[k] = sum_{j<k} k_pen[j] dt`` and ``R[k] = sum_{j<k} refl[j] dt``
    are cumulative forward in time, with ``K[0] = R[0] = 0``.
    """

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    k_pen: np.ndarray
    K: np.ndarray
    R: np.ndarray
    grid: TimeGrid
    config: SolverConfig
    terminal_flow: object | None = None

    @property
    def N(self) -> int:
        return self.Y.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def mean_Y(self) -> np.ndarray:
        return self.Y.mean(axis=1)

    @property
    def K_T(self) -> np.ndarray:
        return self.K[-1]


# -- scheme ----------------------------------------------------------------


def _penalty(H: ObstacleFunctional, Y: np.ndarray, m: float) -> np.ndarray:
    return m * np.maximum(0.0, -H.eval(Y, Y))


def _warn_contraction(H: ObstacleFunctional, config: SolverConfig, dt: float) -> None:
    level = config.m * dt * H.bound_M**2
    if level >= 0.5:
        warnings.warn(
            f"m * dt * bound_M^2 = {level:.3g} >= 0.5: the Picard step may not contract; "
            f"raise the number of time steps M (currently {config.M})",
            UserWarning,
            stacklevel=3,
        )


def _precheck(H: ObstacleFunctional, Y_T: np.ndarray, config: SolverConfig) -> None:
    center = Y_T.mean(axis=0)
    half = max(1.0, float(np.ptp(Y_T)))
    domain = SampleDomain.cube(Y_T.shape[1], half, center, n_atoms=(2, 8))
    report = check_assumptions(H, domain, n_samples=32, tol=1e-8, rng_seed=int(config.seed) % 2**32)
    if not report.passed:
        warnings.warn(
            f"obstacle fails sampled structural checks {report.failures()}; "
            "the reflected limit may be non-unique",
            UserWarning,
            stacklevel=3,
        )


def _picard(
    C: np.ndarray,
    step_rhs: Callable[[np.ndarray], np.ndarray],
    config: SolverConfig,
    k: int,
) -> np.ndarray:
    Yk = C.copy()
    prev = np.inf
    for _ in range(config.picard_iters):
        Ynew = C + step_rhs(Yk)
        if not np.all(np.isfinite(Ynew)):
            raise NumericalError(
                f"Y became non-finite at step {k} (penalty blow-up); reduce m * dt by raising M or lowering m"
            )
        change = float(np.max(np.abs(Ynew - Yk)))
        Yk = Ynew
        if change < config.picard_tol:
            break
        # a contraction shrinks every change; a stalled or growing change means it is not one
        if change >= prev * (1 - 1e-12) and change > 1e-12 * (1.0 + float(np.max(np.abs(Yk)))):
            raise NumericalError(
                f"Picard iteration is not contracting at step {k} (change {change:.3e} did not shrink); "
                "raise M so that m * dt * bound_M^2 < 1"
            )
        prev = change
    return Yk


def backward_sweep(
    X: np.ndarray,
    dB: np.ndarray,
    grid: TimeGrid,
    driver: DriverSpec,
    terminal: TerminalSpec,
    H: ObstacleFunctional,
    config: SolverConfig,
) -> ParticleSolution:
    """Run the penalized backward induction on given forward paths."""
    M = grid.M
    N = X.shape[1]
    d = dB.shape[2]
    dt = grid.dt
    times = grid.times
    m = config.m

    Y_T = np.asarray(terminal(X[M], X[M]), dtype=float)
    if Y_T.ndim == 1:
        Y_T = Y_T[:, None]
    n = Y_T.shape[1]
    flow = None
    if terminal.project:
        flow = project_terminal_particles(H, Y_T, feas_tol=config.feas_tol)
        Y_T = flow.endpoints

    Y = np.empty((M + 1, N, n))
    Z = np.zeros((M + 1, N, n, d))
    kp = np.zeros((M + 1, N))
    refl = np.zeros((M + 1, N, n))
    Y[M] = Y_T
    kp[M] = _penalty(H, Y_T, m)

    for k in range(M - 1, -1, -1):
        reg = ConditionalExpectationRegressor(config.basis_degree, config.ridge).fit(X[k], Y[k + 1])
        C = reg.fitted_.reshape(N, n)
        # subtracting the continuation leaves the estimand unchanged and removes its noise
        resid = Y[k + 1] - C
        z_targets = (resid[:, :, None] * dB[k][:, None, :]).reshape(N, n * d)
        Zk = reg.project(z_targets).reshape(N, n, d) / dt
        Z[k] = Zk
        t = times[k]
        Xk = X[k]
        z_flat = Zk.reshape(N, n * d)

        def rhs(Yk, t=t, Xk=Xk, Zk=Zk, z_flat=z_flat):
            kk = _penalty(H, Yk, m)
            law_yz = np.concatenate([Yk, z_flat], axis=1)
            fv = np.asarray(driver(t, Xk, Yk, Zk, Xk, law_yz), dtype=float).reshape(N, n)
            return dt * fv + dt * reflection_increment(H, Yk, Yk, kk)

        Yk = _picard(C, rhs, config, k)
        Y[k] = Yk
        kp[k] = _penalty(H, Yk, m)
        refl[k] = reflection_increment(H, Yk, Yk, kp[k])

    K = np.zeros((M + 1, N))
    R = np.zeros((M + 1, N, n))
    K[1:] = np.cumsum(kp[:-1] * dt, axis=0)
    R[1:] = np.cumsum(refl[:-1] * dt, axis=0)
    return ParticleSolution(X, Y, Z, kp, K, R, grid, config, flow)


def solve_penalized(
    coeff: CoefficientSpec,
    driver: DriverSpec,
    terminal: TerminalSpec,
    H: ObstacleFunctional,
    config: SolverConfig,
    x0_cloud=None,
    threads: int = 1,
    panel: BrownianPanel | None = None,
) -> ParticleSolution:
    """Simulate the forward cloud and solve the penalized particle system.

    ``threads`` only affects how the noise panel is generated; the result is
    bitwise identical for every value.
    """
    grid = config.grid
    N = config.N
    l, d = coeff.state_dim, coeff.noise_dim
    if x0_cloud is None:
        x0 = np.zeros((N, l))
    else:
        x0 = np.asarray(x0_cloud, dtype=float)
        if x0.ndim <= 1:
            x0 = np.broadcast_to(np.atleast_1d(x0), (N, l)).copy()
    if x0.shape != (N, l):
        raise ValidationError(f"x0 cloud must have shape ({N}, {l}), got {x0.shape}")
    if driver.depends_on_z:
        warnings.warn("z-dependent drivers are experimental for the particle system", UserWarning, stacklevel=2)
    _warn_contraction(H, config, grid.dt)
    if panel is None:
        panel = brownian_panel(config.seed, N, grid.M, d, grid.dt, threads=threads)
    X = simulate_forward(coeff, x0, grid, panel)
    if config.check_assumptions:
        Y_T = np.asarray(terminal(X[-1], X[-1]), dtype=float).reshape(N, -1)
        _precheck(H, Y_T, config)
    return backward_sweep(X, panel.increments, grid, driver, terminal, H, config)


def solve_problem(problem: Problem, config: SolverConfig, threads: int = 1, **kwargs) -> ParticleSolution:
    return solve_penalized(
        problem.coefficients,
        problem.driver,
        problem.terminal,
        problem.obstacle,
        config,
        problem.initial_cloud(config.N),
        threads=threads,
        **kwargs,
    )


def solve_deterministic_reduction(
    driver: DriverSpec,
    H: ObstacleFunctional,
    terminal,
    grid: TimeGrid,
    m: float,
    project: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-trajectory oracle for deterministic data with ``mu = delta_y``.

    Each backward Euler step solves
    ``y_k = y_{k+1} + dt f(t_k, y_k) + dt m H^-(y_k) (grad_y H + lions H(y_k))``
    with a root finder. The driver must not depend on ``x`` or ``z``.
    """
    if driver.depends_on_x or driver.depends_on_z:
        raise ValidationError("the deterministic reduction needs a driver free of x and z")
    yT = np.atleast_1d(np.asarray(terminal, dtype=float)).copy()
    n = yT.shape[0]
    if project and H.eval(yT, yT[None]) < 0:
        yT = flow_to_feasible_point(H, yT).endpoint
    M, dt = grid.M, grid.dt
    times = grid.times
    y = np.empty((M + 1, n))
    y[M] = yT
    x_dummy = np.zeros((1, 1))
    z_dummy = np.zeros((1, n, 1))

    def drift(t, z):
        z2 = z.reshape(1, n)
        law_yz = np.concatenate([z2, z_dummy.reshape(1, n)], axis=1)
        fv = np.asarray(driver(t, x_dummy, z2, z_dummy, x_dummy, law_yz), dtype=float).reshape(n)
        hm = max(0.0, -H.eval(z, z2))
        if hm == 0.0:
            return fv
        direction = H.grad_y(z, z2) + H.lions_grad(z, z2, z)
        return fv + m * hm * direction

    for k in range(M - 1, -1, -1):
        t = times[k]
        nxt = y[k + 1]

        def residual(z, t=t, nxt=nxt):
            return z - nxt - dt * drift(t, z)

        guess = nxt + dt * drift(t, nxt)
        sol = root(residual, guess, method="hybr", tol=1e-15)
        z = sol.x
        scale = 1.0 + float(np.max(np.abs(z)))
        if not np.all(np.abs(residual(z)) <= 1e-13 * scale):
            z = guess
            for _ in range(10_000):
                z_new = nxt + dt * drift(t, z)
                if np.max(np.abs(z_new - z)) <= 1e-15 * scale:
                    z = z_new
                    break
                z = z_new
            else:
                raise NumericalError(f"deterministic reduction step {k} did not converge")
        y[k] = z
    k_pen = np.array([m * max(0.0, -H.eval(y[k], y[k][None])) for k in range(M + 1)])
    return y, k_pen


# -- estimator facade ------------------------------------------------------


class PenalizedParticleSolver(BaseEstimator):
    """Estimator interface to :func:`solve_penalized`.

    ``fit(X0)`` takes the ``(N, l)`` initial cloud (or ``None`` for the
    problem's own initial law) and stores the solution in ``solution_``.
    ``predict(X, t)`` returns the regression read-out of ``Y_t`` at points ``X``.
    """

    def __init__(
        self,
        problem: Problem | None = None,
        n_particles: int = 1000,
        n_steps: int = 50,
        horizon: float = 1.0,
        penalty: float = 100.0,
        picard_iters: int = 5,
        picard_tol: float = 1e-10,
        basis_degree: int = 3,
        ridge: float = 1e-8,
        seed: int = 0,
        feas_tol: float = DEFAULT_FEAS_TOL,
        check_assumptions: bool = True,
        threads: int = 1,
    ):
        self.problem = problem
        self.n_particles = n_particles
        self.n_steps = n_steps
        self.horizon = horizon
        self.penalty = penalty
        self.picard_iters = picard_iters
        self.picard_tol = picard_tol
        self.basis_degree = basis_degree
        self.ridge = ridge
        self.seed = seed
        self.feas_tol = feas_tol
        self.check_assumptions = check_assumptions
        self.threads = threads

    def _config(self) -> SolverConfig:
        return SolverConfig(
            N=self.n_particles,
            M=self.n_steps,
            T=self.horizon,
            m=self.penalty,
            picard_iters=self.picard_iters,
            picard_tol=self.picard_tol,
            basis_degree=self.basis_degree,
            ridge=self.ridge,
            seed=self.seed,
            feas_tol=self.feas_tol,
            check_assumptions=self.check_assumptions,
        )

    def fit(self, X=None, y=None):
        if self.problem is None:
            raise ValidationError("PenalizedParticleSolver needs a Problem")
        config = self._config()
        if X is None:
            x0 = self.problem.initial_cloud(config.N)
        else:
            x0 = check_array(X, ensure_2d=True, dtype=float)
            if x0.shape[0] != config.N:
                raise ValidationError(f"initial cloud has {x0.shape[0]} rows, expected n_particles={config.N}")
        self.config_ = config
        self.solution_ = solve_penalized(
            self.problem.coefficients,
            self.problem.driver,
            self.problem.terminal,
            self.problem.obstacle,
            config,
            x0,
            threads=self.threads,
        )
        self.n_features_in_ = self.problem.coefficients.state_dim
        return self

    def step_index(self, t: float) -> int:
        check_is_fitted(self, "solution_")
        grid = self.solution_.grid
        k = int(round((t - grid.start) / grid.dt))
        if not 0 <= k <= grid.M:
            raise ValidationError(f"t={t} outside the grid [{grid.start}, {grid.end}]")
        return k

    def predict(self, X, t: float = 0.0) -> np.ndarray:
        check_is_fitted(self, "solution_")
        X = check_array(X, ensure_2d=True, dtype=float)
        k = self.step_index(t)
        sol = self.solution_
        reg = ConditionalExpectationRegressor(self.basis_degree, self.ridge).fit(sol.X[k], sol.Y[k])
        return reg.predict(X).reshape(X.shape[0], -1)

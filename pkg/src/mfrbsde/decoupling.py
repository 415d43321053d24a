"""Decoupling field ``u(t, x, lambda)`` of the Markovian mean-field reflected FBSDE.

A population started from the atoms of ``lambda`` at time ``t`` supplies the
laws and the mean-field part of the reflection. The value at ``x`` comes from
a tagged cloud started at ``x``: it solves the same penalized backward
equation with its own penalty against the population law, which realizes
the population reflection conditioned on starting at ``x``. Tagged clouds use
a reserved stream range, so every query shares the same noise.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .diagnostics import StudyTable
from .exceptions import ValidationError
from .forward import TAGGED_STREAM_OFFSET, TimeGrid, brownian_panel, simulate_forward
from .measure import as_atoms
from .obstacle import ObstacleFunctional, mean_field_reflection
from .regression import ConditionalExpectationRegressor
from .solver import ParticleSolution, Problem, SolverConfig, _picard, backward_sweep

HULL_MARGIN = 0.1


@dataclass(frozen=True)
class FieldQuery:
    t: float
    x: np.ndarray
    lam: np.ndarray

    @classmethod
    def make(cls, t, x, lam) -> "FieldQuery":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lam = np.asarray(as_atoms(lam), dtype=float)
        if lam.ndim == 1:
            lam = lam[:, None]
        return cls(float(t), x, lam)


@dataclass
class FieldResult:
    query: FieldQuery
    u_value: float
    constraint_value: float
    penalty_mass: float
    future_penalty: float
    population_readout: float | None
    confidence: str
    step: int

    def row(self, lam_id: int = 0) -> dict:
        out = {"t": self.query.t}
        for j, xj in enumerate(self.query.x):
            out[f"x{j}"] = float(xj)
        out.update(
            {
                "lambda_id": lam_id,
                "u": self.u_value,
                "H": self.constraint_value,
                "penalty_mass": self.penalty_mass,
                "future_penalty": self.future_penalty,
                "population_readout": self.population_readout,
                "confidence": self.confidence,
            }
        )
        return out


def check_sign_normalization(
    H: ObstacleFunctional, center: float = 0.0, half_width: float = 10.0, n_samples: int = 64, seed: int = 0
) -> None:
    """Require ``grad_y H < 0`` and ``lions H <= 0`` on sampled scalar inputs.

    Raises ``ValidationError`` otherwise; the obstacle is never flipped
    because that would change which states are admissible.
    """
    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        size = int(rng.integers(2, 9))
        atoms = center + half_width * (2 * rng.random((size, 1)) - 1)
        y = center + half_width * (2 * rng.random(1) - 1)
        v = center + half_width * (2 * rng.random(1) - 1)
        g = float(H.grad_y(y, atoms)[0])
        lam = float(H.lions_grad(y, atoms, v)[0])
        if g >= 0 or lam > 0:
            orientation = "positive" if g > 0 and lam >= 0 else "mixed"
            raise ValidationError(
                f"decoupling field needs a decreasing obstacle (grad_y H < 0, Lions derivative <= 0); "
                f"found {orientation} signs grad_y H = {g:.3g}, Lions derivative = {lam:.3g} at y = {y[0]:.3g}. "
                "Rewrite the constraint in decreasing form; it is not flipped automatically "
                "because that changes the admissible set"
            )


class FieldEvaluator:
    """Evaluates ``u`` for one problem and configuration, caching population solves."""

    def __init__(self, problem: Problem, config: SolverConfig, threads: int = 1):
        if problem.n != 1:
            raise ValidationError(f"decoupling field is defined for scalar Y only (n = 1), got n = {problem.n}")
        self.problem = problem
        self.config = config
        self.threads = threads
        self.grid = config.grid
        self._populations: dict = {}
        self._signs_checked = False
        d = problem.coefficients.noise_dim
        self._pop_panel = brownian_panel(config.seed, config.N, config.M, d, self.grid.dt, threads=threads)
        self._tag_panel = brownian_panel(
            config.seed, config.N, config.M, d, self.grid.dt, offset=TAGGED_STREAM_OFFSET, threads=threads
        )

    def step_of(self, t: float) -> int:
        grid = self.grid
        k = int(round(t / grid.dt))
        if not 0 <= k <= grid.M or abs(k * grid.dt - t) > 1e-9 * grid.T:
            raise ValidationError(f"query time t={t} is not a grid time of [0, {grid.T}] with {grid.M} steps")
        return k

    def _check_signs(self, lam: np.ndarray) -> None:
        if self._signs_checked:
            return
        g = np.asarray(self.problem.terminal(lam, lam), dtype=float).ravel()
        center = float(np.mean(g))
        half = max(5.0, 2.0 * float(np.ptp(g)))
        check_sign_normalization(self.problem.obstacle, center, half, seed=int(self.config.seed) % 2**32)
        self._signs_checked = True

    def population(self, k0: int, lam: np.ndarray) -> ParticleSolution:
        key = (k0, lam.shape, lam.tobytes())
        if key not in self._populations:
            cfg, grid = self.config, self.grid
            sub = TimeGrid(grid.T - grid.times[k0], grid.M - k0, start=grid.times[k0])
            panel = self._pop_panel.steps(k0)
            x0 = lam[np.arange(cfg.N) % lam.shape[0]]
            X = simulate_forward(self.problem.coefficients, x0, sub, panel)
            p = self.problem
            self._populations[key] = backward_sweep(X, panel.increments, sub, p.driver, p.terminal, p.obstacle, cfg)
        return self._populations[key]

    def eval(self, query: FieldQuery) -> FieldResult:
        p, cfg = self.problem, self.config
        l = p.coefficients.state_dim
        if query.x.shape != (l,) or query.lam.shape[1] != l:
            raise ValidationError(f"query point and lambda atoms must be {l}-dimensional")
        H = p.obstacle
        self._check_signs(query.lam)
        k0 = self.step_of(query.t)
        if k0 == self.grid.M:
            u = float(np.asarray(p.terminal(query.x[None], query.lam), dtype=float).ravel()[0])
            law = np.asarray(p.terminal(query.lam, query.lam), dtype=float).reshape(-1, 1)
            return FieldResult(query, u, float(H.eval([u], law)), 0.0, 0.0, u, "high", k0)

        pop = self.population(k0, query.lam)
        tag_panel = self._tag_panel.steps(k0)
        Xt = simulate_forward(p.coefficients, query.x, pop.grid, tag_panel)
        Yt, kt = _tagged_sweep(Xt, tag_panel.increments, pop, p, cfg)
        u = float(Yt[0].mean())
        law0 = pop.Y[0]
        dt = pop.grid.dt
        readout = ConditionalExpectationRegressor(cfg.basis_degree, cfg.ridge).fit(pop.X[0], pop.Y[0])
        pop_u = float(readout.predict(query.x[None])[0, 0])
        if readout.collapsed and not np.all(pop.X[0] == query.x):
            # a constant design says nothing about points off the atoms
            pop_u = None
        lo = pop.X.min(axis=(0, 1))
        hi = pop.X.max(axis=(0, 1))
        pad = HULL_MARGIN * np.maximum(hi - lo, 1e-12)
        inside = bool(np.all(query.x >= lo - pad) and np.all(query.x <= hi + pad))
        return FieldResult(
            query,
            u,
            float(H.eval([u], law0)),
            float(kt[0].mean() * dt),
            float(kt[:-1].mean(axis=1).sum() * dt),
            pop_u,
            "high" if inside else "low",
            k0,
        )


def _project_against(H: ObstacleFunctional, Y: np.ndarray, atoms: np.ndarray, feas_tol: float) -> np.ndarray:
    """Euler flow of each tagged value along ``grad_y H`` under a fixed population law."""
    Y = Y.copy()
    h = H.eval(Y, atoms)
    worst = float(np.max(np.maximum(0.0, -h)))
    if worst == 0.0:
        return Y
    dt_flow = 1e-3 * (1.0 + worst / H.beta**2)
    steps = int(np.ceil((worst / H.beta**2 + dt_flow) / dt_flow)) + 1
    for _ in range(steps):
        active = h < 0
        if not active.any():
            break
        Y[active] += dt_flow * H.grad_y(Y[active], atoms)
        h = H.eval(Y, atoms)
    return Y


def _tagged_sweep(X: np.ndarray, dB: np.ndarray, pop: ParticleSolution, problem: Problem, config: SolverConfig):
    H, driver, terminal = problem.obstacle, problem.driver, problem.terminal
    grid = pop.grid
    M, dt, m = grid.M, grid.dt, config.m
    Q, d = X.shape[1], dB.shape[2]
    Y = np.empty((M + 1, Q, 1))
    kp = np.zeros((M + 1, Q))
    YT = np.asarray(terminal(X[M], pop.X[M]), dtype=float).reshape(Q, 1)
    if terminal.project:
        YT = _project_against(H, YT, pop.Y[M], config.feas_tol)
    Y[M] = YT
    kp[M] = m * np.maximum(0.0, -H.eval(YT, pop.Y[M]))
    times = grid.times
    for k in range(M - 1, -1, -1):
        reg = ConditionalExpectationRegressor(config.basis_degree, config.ridge).fit(X[k], Y[k + 1])
        C = reg.fitted_.reshape(Q, 1)
        resid = Y[k + 1] - C
        Zk = reg.project((resid * dB[k]).reshape(Q, d)).reshape(Q, 1, d) / dt
        pop_y = pop.Y[k]
        law_yz = np.concatenate([pop_y, pop.Z[k].reshape(pop_y.shape[0], -1)], axis=1)
        t = times[k]

        def rhs(Yk, t=t, Xk=X[k], Zk=Zk, pop_x=pop.X[k], pop_y=pop_y, law_yz=law_yz, pop_k=pop.k_pen[k]):
            own = m * np.maximum(0.0, -H.eval(Yk, pop_y))
            fv = np.asarray(driver(t, Xk, Yk, Zk, pop_x, law_yz), dtype=float)
            refl = H.grad_y(Yk, pop_y) * own[:, None] + mean_field_reflection(H, pop_y, pop_k, pop_y, Yk)
            return dt * fv.reshape(Q, 1) + dt * refl

        Y[k] = _picard(C, rhs, config, k)
        kp[k] = m * np.maximum(0.0, -H.eval(Y[k], pop_y))
    return Y, kp


def eval_u(query: FieldQuery, problem: Problem, config: SolverConfig, threads: int = 1) -> FieldResult:
    return FieldEvaluator(problem, config, threads).eval(query)


def continuity_probe(
    query: FieldQuery,
    radii: dict,
    problem: Problem,
    config: SolverConfig,
    scales: Sequence[float] = (1.0, 0.5, 0.25),
    threads: int = 1,
    evaluator: FieldEvaluator | None = None,
) -> StudyTable:
    """Moduli ``|u(perturbed) - u(query)|`` as the radii shrink by ``scales``.

    ``radii`` may hold ``dt`` (snapped to the grid), ``dx`` and ``dlam`` (a
    translation of every atom). Passes when the moduli do not increase as the
    scale decreases.
    """
    unknown = set(radii) - {"dt", "dx", "dlam"}
    if unknown:
        raise ValidationError(f"unknown radii {sorted(unknown)}")
    ev = evaluator or FieldEvaluator(problem, config, threads)
    l = problem.coefficients.state_dim
    dt_r = float(radii.get("dt", 0.0))
    dx = np.broadcast_to(np.asarray(radii.get("dx", 0.0), dtype=float), (l,))
    dlam = np.broadcast_to(np.asarray(radii.get("dlam", 0.0), dtype=float), (l,))
    base = ev.eval(query)
    rows = []
    for s in scales:
        k = ev.step_of(query.t) + int(round(s * dt_r / ev.grid.dt))
        k = min(max(k, 0), ev.grid.M)
        pert = FieldQuery.make(k * ev.grid.dt, query.x + s * dx, query.lam + s * dlam)
        res = ev.eval(pert)
        rows.append(
            {
                "scale": float(s),
                "dt_eff": pert.t - query.t,
                "dx_norm": float(np.linalg.norm(s * dx)),
                "dlam_norm": float(np.linalg.norm(s * dlam)),
                "u": res.u_value,
                "modulus": abs(res.u_value - base.u_value),
            }
        )
    moduli = [r["modulus"] for r in rows]
    order = np.argsort([-r["scale"] for r in rows])
    ordered = [moduli[i] for i in order]
    decreasing = all(b <= a for a, b in zip(ordered[:-1], ordered[1:]))
    checks = {"base_u": base.u_value, "nonincreasing": decreasing}
    columns = ["scale", "dt_eff", "dx_norm", "dlam_norm", "u", "modulus"]
    return StudyTable("continuity", "scale", columns, rows, decreasing, checks)


def complementarity_probe(
    queries: Sequence[FieldQuery],
    problem: Problem,
    config: SolverConfig,
    eps: float = 1e-3,
    eps_prime: float = 0.0,
    threads: int = 1,
    evaluator: FieldEvaluator | None = None,
) -> StudyTable:
    """Tabulate ``(H, penalty mass)`` over queries.

    Passes when every query with ``H > eps`` carries penalty mass at most
    ``eps_prime``. For queries with mass above ``eps_prime`` the largest
    ``sqrt(m) |H|`` is reported as the scale of the residual violation.
    """
    ev = evaluator or FieldEvaluator(problem, config, threads)
    rows = []
    lam_ids: dict = {}
    for q in queries:
        lam_id = lam_ids.setdefault(q.lam.tobytes(), len(lam_ids))
        rows.append(ev.eval(q).row(lam_id))
    violations = [r for r in rows if r["H"] > eps and r["penalty_mass"] > eps_prime]
    binding = [r for r in rows if r["penalty_mass"] > eps_prime]
    checks = {
        "eps": eps,
        "eps_prime": eps_prime,
        "violations": len(violations),
        "binding_rows": len(binding),
        "max_sqrt_m_abs_H_binding": max((np.sqrt(config.m) * abs(r["H"]) for r in binding), default=0.0),
    }
    columns = list(rows[0].keys()) if rows else ["t", "u", "H", "penalty_mass"]
    return StudyTable("complementarity", "query", columns, rows, not violations, checks)

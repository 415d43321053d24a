"""Post-processing metrics and convergence studies for penalized particle solves."""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConsistencyError, ValidationError
from .measure import quantile_subsample, w2_1d
from .obstacle import ObstacleFunctional, reflection_increment
from .solver import ParticleSolution, Problem, SolverConfig, solve_problem

# -- single-solution report -------------------------------------------------


@dataclass
class DiagnosticsReport:
    """Constraint and moment summaries of one solution.

    ``skorokhod_defect`` keeps its sign; ``skorokhod_positive_defect`` is the
    same sum restricted to ``H > 0`` and vanishes identically for a penalty of
    the form ``m H^-``.
    """

    sup_H_minus_sq: float
    int_H_minus_sq: float
    skorokhod_defect: float
    skorokhod_positive_defect: float
    K_T_mean: float
    K_T_sq_mean: float
    moments: dict
    series: dict = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "sup_H_minus_sq": self.sup_H_minus_sq,
            "int_H_minus_sq": self.int_H_minus_sq,
            "skorokhod_defect": self.skorokhod_defect,
            "skorokhod_positive_defect": self.skorokhod_positive_defect,
            "K_T_mean": self.K_T_mean,
            "K_T_sq_mean": self.K_T_sq_mean,
            "moments": self.moments,
        }


def obstacle_values(sol: ParticleSolution, H: ObstacleFunctional) -> np.ndarray:
    """``H(Y[k, i], mu_Y[k])`` as an ``(M + 1, N)`` array."""
    return np.stack([H.eval(sol.Y[k], sol.Y[k]) for k in range(sol.Y.shape[0])])


def constraint_metrics(sol: ParticleSolution, H: ObstacleFunctional) -> DiagnosticsReport:
    dt = sol.grid.dt
    h = obstacle_values(sol, H)
    hm2 = np.maximum(0.0, -h) ** 2
    mean_hm2 = hm2.mean(axis=1)
    # left-point sums over k < M, the same convention as K
    hk = (h * sol.k_pen)[:-1]
    defect_steps = hk.mean(axis=1) * dt
    pos_steps = (np.maximum(h, 0.0) * sol.k_pen)[:-1].mean(axis=1) * dt
    Y2 = np.sum(sol.Y**2, axis=2)
    Z2 = np.sum(sol.Z**2, axis=(2, 3))
    moments = {
        "sup_mean_Y2": float(Y2.mean(axis=1).max()),
        "sup_mean_Y4": float((Y2**2).mean(axis=1).max()),
        "mean_sup_Y2": float(Y2.max(axis=0).mean()),
        "int_mean_Z2": float(Z2[:-1].mean(axis=1).sum() * dt),
        "Y0_mean": sol.Y[0].mean(axis=0).tolist(),
    }
    series = {
        "t": sol.grid.times,
        "mean_Y": sol.Y[:, :, 0].mean(axis=1),
        "std_Y": sol.Y[:, :, 0].std(axis=1),
        "mean_K": sol.K.mean(axis=1),
        "sup_H_minus": np.maximum(0.0, -h).max(axis=1),
        "mean_H_minus_sq": mean_hm2,
        "partial_defect": np.concatenate([[0.0], np.cumsum(defect_steps)]),
    }
    return DiagnosticsReport(
        sup_H_minus_sq=float(mean_hm2.max()),
        int_H_minus_sq=float(mean_hm2[:-1].sum() * dt),
        skorokhod_defect=float(defect_steps.sum()),
        skorokhod_positive_defect=float(pos_steps.sum()),
        K_T_mean=float(sol.K[-1].mean()),
        K_T_sq_mean=float((sol.K[-1] ** 2).mean()),
        moments=moments,
        series=series,
    )


def reflection_path(sol: ParticleSolution, H: ObstacleFunctional, atol: float = 1e-10) -> np.ndarray:
    """Recompute the cumulative reflection ``R`` and audit it against the stored one."""
    M = sol.Y.shape[0] - 1
    dt = sol.grid.dt
    k_check = np.stack([sol.config.m * np.maximum(0.0, -H.eval(sol.Y[k], sol.Y[k])) for k in range(M + 1)])
    if not np.array_equal(k_check, sol.k_pen):
        raise ConsistencyError("stored penalty density differs from m H^- at the stored iterate")
    R = np.zeros_like(sol.R)
    for k in range(M):
        R[k + 1] = R[k] + reflection_increment(H, sol.Y[k], sol.Y[k], sol.k_pen[k]) * dt
    err = float(np.max(np.abs(R - sol.R)))
    if err > atol:
        raise ConsistencyError(f"recomputed reflection path differs from the stored one by {err:.3e}")
    return R


# -- study tables ------------------------------------------------------------


@dataclass
class StudyTable:
    kind: str
    knob: str
    columns: list[str]
    rows: list[dict]
    passed: bool
    checks: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({c: _fmt(row[c]) for c in self.columns})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "knob": self.knob,
            "passed": self.passed,
            "checks": self.checks,
            "notes": self.notes,
            "rows": [{c: row[c] for c in self.columns} for row in self.rows],
        }


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _spread(values: np.ndarray) -> float:
    """``max / min`` of nonnegative values; 1 for an all-zero column."""
    hi, lo = float(np.max(values)), float(np.min(values))
    if hi == 0.0:
        return 1.0
    return np.inf if lo == 0.0 else hi / lo


def _ratios(values: Sequence[float]) -> list[float | None]:
    out: list[float | None] = [None]
    for prev, cur in zip(values[:-1], values[1:]):
        out.append(float(cur / prev) if prev != 0 else None)
    return out


def penalty_rate_study(
    problem: Problem,
    m_grid: Sequence[float],
    base_config: SolverConfig,
    threads: int = 1,
    spread_limit: float = 4.0,
    k_rtol: float = 0.05,
) -> StudyTable:
    """One solve per penalty level on common noise.

    Passes when ``m sup H^-^2`` and ``m^2 int H^-^2`` each have max/min below
    ``spread_limit`` and the last two ``K_T`` means agree to ``k_rtol``.
    """
    m_grid = [float(m) for m in m_grid]
    if len(m_grid) < 3:
        raise ValidationError("penalty study needs at least three penalty levels")
    if any(b <= a for a, b in zip(m_grid[:-1], m_grid[1:])) or m_grid[0] <= 0:
        raise ValidationError("m_grid must be positive and strictly increasing")
    rows = []
    for m in m_grid:
        sol = solve_problem(problem, replace(base_config, m=m), threads=threads)
        rep = constraint_metrics(sol, problem.obstacle)
        rows.append(
            {
                "m": m,
                "sup_H_minus_sq": rep.sup_H_minus_sq,
                "int_H_minus_sq": rep.int_H_minus_sq,
                "m_sup_H_minus_sq": m * rep.sup_H_minus_sq,
                "m2_int_H_minus_sq": m * m * rep.int_H_minus_sq,
                "K_T_mean": rep.K_T_mean,
                "skorokhod_defect": rep.skorokhod_defect,
            }
        )
    for name in ("m2_int_H_minus_sq", "skorokhod_defect"):
        for row, r in zip(rows, _ratios([row[name] for row in rows])):
            row[f"{name}_ratio"] = r
    sup_spread = _spread(np.array([r["m_sup_H_minus_sq"] for r in rows]))
    int_spread = _spread(np.array([r["m2_int_H_minus_sq"] for r in rows]))
    k_last, k_prev = rows[-1]["K_T_mean"], rows[-2]["K_T_mean"]
    k_stable = abs(k_last - k_prev) <= k_rtol * max(abs(k_last), 1e-12) or max(abs(k_last), abs(k_prev)) < 1e-12
    checks = {
        "m_sup_spread": sup_spread,
        "m2_int_spread": int_spread,
        "spread_limit": spread_limit,
        "m_sup_bounded": sup_spread < spread_limit,
        "m2_int_bounded": int_spread < spread_limit,
        "K_T_stable": bool(k_stable),
    }
    passed = bool(checks["m_sup_bounded"] and checks["m2_int_bounded"] and k_stable)
    columns = [
        "m",
        "sup_H_minus_sq",
        "int_H_minus_sq",
        "m_sup_H_minus_sq",
        "m2_int_H_minus_sq",
        "m2_int_H_minus_sq_ratio",
        "K_T_mean",
        "skorokhod_defect",
        "skorokhod_defect_ratio",
    ]
    return StudyTable("penalty", "m", columns, rows, passed, checks)


def coupled_error(sol_n: ParticleSolution, sol_ref: ParticleSolution) -> float:
    """``sup_k mean_{i<N} |Y^N[k, i] - Y^ref[k, i]|^2`` over shared particle indices."""
    N = sol_n.N
    diff = sol_n.Y - sol_ref.Y[:, :N]
    return float(np.sum(diff * diff, axis=2).mean(axis=1).max())


def law_error(sol_n: ParticleSolution, sol_ref: ParticleSolution) -> float | None:
    """``sup_k W2^2`` to the size-``N`` quantile subsample of the reference cloud (``n = 1`` only)."""
    if sol_n.Y.shape[2] != 1:
        return None
    N = sol_n.N
    worst = 0.0
    for k in range(sol_n.Y.shape[0]):
        ref = quantile_subsample(sol_ref.Y[k, :, 0], N)
        worst = max(worst, w2_1d(sol_n.Y[k, :, 0], ref) ** 2)
    return worst


def chaos_study(
    problem: Problem,
    N_grid: Sequence[int],
    N_ref: int,
    base_config: SolverConfig,
    threads: int = 1,
    min_factor: float = 2.0,
) -> StudyTable:
    """Coupled and law errors of N-particle solves against a larger reference.

    Particle ``i`` uses the same Brownian stream at every size. Passes when the
    coupled error strictly decreases along ``N_grid`` and falls by at least
    ``min_factor`` overall. Fitted slopes are reported, not gated.
    """
    N_grid = [int(n) for n in N_grid]
    if len(N_grid) < 2 or any(b <= a for a, b in zip(N_grid[:-1], N_grid[1:])) or N_grid[0] < 1:
        raise ValidationError("N_grid must hold at least two strictly increasing positive sizes")
    if int(N_ref) <= N_grid[-1]:
        raise ValidationError(f"N_ref={N_ref} must exceed every grid size (max {N_grid[-1]})")
    ref = solve_problem(problem, replace(base_config, N=int(N_ref)), threads=threads)
    twin = solve_problem(problem, replace(base_config, N=int(N_ref)), threads=threads)
    identity = coupled_error(twin, ref)
    if identity != 0.0 or not np.array_equal(twin.Y, ref.Y):
        raise ConsistencyError(f"reference solve is not reproducible (self error {identity:.3e})")
    rows = []
    for N in N_grid:
        sol = solve_problem(problem, replace(base_config, N=N), threads=threads)
        rows.append(
            {
                "N": N,
                "coupled_error": coupled_error(sol, ref),
                "law_w2_sq": law_error(sol, ref),
                "inv_sqrt_N": N**-0.5,
                "log_eighth_root_rate": N ** (-1 / 8) * np.log(N + 1),
            }
        )
    errs = np.array([r["coupled_error"] for r in rows])
    for row, r in zip(rows, _ratios(list(errs))):
        row["ratio"] = r
    decreasing = bool(np.all(np.diff(errs) < 0))
    factor = float(errs[0] / errs[-1]) if errs[-1] > 0 else (np.inf if errs[0] > 0 else 1.0)
    slope = None
    if np.all(errs > 0):
        slope = float(np.polyfit(np.log(N_grid), np.log(errs), 1)[0])
    checks = {
        "strictly_decreasing": decreasing,
        "total_factor": factor,
        "min_factor": min_factor,
        "fitted_slope": slope,
        "reference_self_error": identity,
    }
    passed = decreasing and factor >= min_factor
    columns = ["N", "coupled_error", "ratio", "law_w2_sq", "inv_sqrt_N", "log_eighth_root_rate"]
    return StudyTable("chaos", "N", columns, rows, passed, checks)


def stability_experiment(
    problem: Problem,
    perturbation: dict,
    eps_grid: Sequence[float],
    base_config: SolverConfig,
    threads: int = 1,
    max_spread: float = 2.0,
) -> StudyTable:
    """Difference of solutions under data perturbations of size ``eps``.

    ``perturbation`` holds ``dxi`` (terminal offset) and ``df`` (driver offset),
    each scaled by ``eps``. Both solves share the seed. Rows report
    ``sup_k mean|dY|^2``, ``sum_k mean|dZ|^2 dt`` and the data size
    ``I^2 = mean|d xi|^2 + sum_k |d f|^2 dt``; the ratio to ``I^2`` must stay
    within ``max_spread`` over the nonzero ``eps`` values.
    """
    unknown = set(perturbation) - {"dxi", "df"}
    if unknown:
        raise ValidationError(f"unknown perturbation keys {sorted(unknown)}")
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid or any(e < 0 for e in eps_grid) or len(set(eps_grid)) != len(eps_grid):
        raise ValidationError("eps_grid must hold distinct nonnegative values")
    n = problem.n
    dxi = np.broadcast_to(np.asarray(perturbation.get("dxi", 0.0), dtype=float), (n,)).copy()
    df = np.broadcast_to(np.asarray(perturbation.get("df", 0.0), dtype=float), (n,)).copy()
    base = solve_problem(problem, base_config, threads=threads)
    dt = base.grid.dt
    T = base.grid.T
    rows = []
    for eps in eps_grid:
        pert = problem.with_terminal(problem.terminal.shifted(eps * dxi)).with_driver(
            problem.driver.shifted(eps * df)
        )
        if not pert.terminal.project:
            xi = np.asarray(pert.terminal(base.X[-1], base.X[-1]), dtype=float).reshape(base.N, -1)
            h = problem.obstacle.eval(xi, xi)
            if np.any(h < -base_config.feas_tol):
                raise ValidationError(
                    f"perturbed terminal is infeasible (min H = {h.min():.3e}) and projection is disabled"
                )
        sol = solve_problem(pert, base_config, threads=threads)
        dY = sol.Y - base.Y
        dZ = sol.Z - base.Z
        sup_dy = float(np.sum(dY * dY, axis=2).mean(axis=1).max())
        int_dz = float(np.sum(dZ * dZ, axis=(2, 3))[:-1].mean(axis=1).sum() * dt)
        data = float(np.sum((eps * dxi) ** 2) + np.sum((eps * df) ** 2) * T)
        if eps == 0.0:
            if sup_dy != 0.0 or int_dz != 0.0:
                raise ConsistencyError("zero perturbation produced nonzero differences under a common seed")
        rows.append(
            {
                "eps": eps,
                "sup_mean_dY_sq": sup_dy,
                "int_mean_dZ_sq": int_dz,
                "data_size_sq": data,
                "ratio_Y": sup_dy / data if data > 0 else None,
                "ratio_total": (sup_dy + int_dz) / data if data > 0 else None,
            }
        )
    ratios = np.array([r["ratio_Y"] for r in rows if r["ratio_Y"] is not None], dtype=float)
    spread = _spread(ratios) if ratios.size else 1.0
    checks = {
        "ratio_spread": spread,
        "max_spread": max_spread,
        "zero_row_exact": all(r["sup_mean_dY_sq"] == 0.0 for r in rows if r["eps"] == 0.0),
    }
    passed = bool(spread <= max_spread and checks["zero_row_exact"])
    columns = ["eps", "sup_mean_dY_sq", "int_mean_dZ_sq", "data_size_sq", "ratio_Y", "ratio_total"]
    return StudyTable("stability", "eps", columns, rows, passed, checks)

"""Command line entry point: ``mfrbsde {solve,check-assumptions,study,decoupling}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA_VERSION, Experiment, load_config, resolve
from .decoupling import FieldEvaluator, FieldQuery, complementarity_probe, continuity_probe
from .diagnostics import (
    StudyTable,
    chaos_study,
    constraint_metrics,
    penalty_rate_study,
    reflection_path,
    stability_experiment,
)
from .exceptions import NumericalError, ValidationError
from .obstacle import SampleDomain, check_assumptions
from .solver import solve_problem

EXIT_OK, EXIT_FAIL, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "MFRBSDE_OUTPUT_ROOT"
MANIFEST = "manifest.json"

SERIES_UNITS = {
    "t": "time",
    "mean_Y": "state",
    "std_Y": "state",
    "mean_K": "state*time",
    "sup_H_minus": "obstacle",
    "partial_defect": "obstacle*state",
}


# -- output helpers ---------------------------------------------------------


class RunWriter:
    """Writes run files and finishes with a manifest of their checksums."""

    def __init__(self, directory: Path):
        self.directory = directory
        directory.mkdir(parents=True, exist_ok=True)
        stale = directory / MANIFEST
        if stale.exists():
            stale.unlink()
        self.files: dict[str, str] = {}

    def _record(self, name: str, data: bytes) -> None:
        (self.directory / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def json(self, name: str, payload) -> None:
        text = json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n"
        self._record(name, text.encode())

    def csv(self, name: str, columns: list[str], rows, units: dict | None = None) -> None:
        units = units or {}
        header = [f"{c} [{units.get(c, '1')}]" for c in columns]
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(_cell(row[c]) for c in columns))
        self._record(name, ("\n".join(lines) + "\n").encode())

    def manifest(self, experiment: Experiment, command: str, wall: float) -> None:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "artifact_version": __version__,
            "command": command,
            "config_sha256": experiment.hash,
            "seed": experiment.solver.seed,
            "wall_time_s": wall,
            "files": dict(sorted(self.files.items())),
        }
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        (self.directory / MANIFEST).write_text(text)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if np.isfinite(value) else str(value)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _table_rows(table: StudyTable):
    return [{c: row[c] for c in table.columns} for row in table.rows]


def _output_dir(experiment: Experiment, override: str | None) -> Path:
    target = Path(override) if override else Path(experiment.output["directory"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not target.is_absolute():
        target = Path(root) / target
    return target


# -- commands ---------------------------------------------------------------


def cmd_solve(exp: Experiment, writer: RunWriter, threads: int) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sol = solve_problem(exp.problem, exp.solver, threads=threads)
    H = exp.problem.obstacle
    report = constraint_metrics(sol, H)
    R = reflection_path(sol, H)
    Z2 = np.sum(sol.Z**2, axis=(2, 3))
    summary = {
        "command": "solve",
        "Y0_mean": sol.Y[0].mean(axis=0),
        "Y_mean_range": [float(sol.Y.mean(axis=1).min()), float(sol.Y.mean(axis=1).max())],
        "mean_abs_Z": float(np.abs(sol.Z[:-1]).mean()),
        "Z_sq_max_mean": float(Z2.mean(axis=1).max()),
        "total_penalty_mass": report.K_T_mean,
        "R_T_mean": R[-1].mean(axis=0),
        "diagnostics": report.to_dict(),
        "terminal_projection": _flow_summary(sol.terminal_flow),
        "warnings": sorted({str(w.message) for w in caught}),
    }
    writer.json("summary.json", summary)
    ser = report.series
    rows = [{c: ser[c][k] for c in SERIES_UNITS} for k in range(len(ser["t"]))]
    writer.csv("series.csv", list(SERIES_UNITS), rows, SERIES_UNITS)
    for col in ("mean_Y", "mean_K", "sup_H_minus", "partial_defect"):
        writer.csv(f"plot_{col}.csv", ["t", col], rows, SERIES_UNITS)
    return EXIT_OK


def _flow_summary(flow) -> dict | None:
    if flow is None:
        return None
    return {
        "moved": int(np.count_nonzero(flow.stop_times)),
        "max_stop_time": float(flow.stop_times.max()),
        "min_certificate": float(flow.certificates.min()),
        "rounds": flow.rounds,
    }


def cmd_check(exp: Experiment, writer: RunWriter, threads: int) -> int:
    spec = exp.study.get("assumptions", {})
    n = exp.problem.n
    low = np.broadcast_to(np.asarray(spec.get("low", -5.0), dtype=float), (n,)).copy()
    high = np.broadcast_to(np.asarray(spec.get("high", 5.0), dtype=float), (n,)).copy()
    domain = SampleDomain(low, high, tuple(spec.get("n_atoms", (2, 16))))
    report = check_assumptions(
        exp.problem.obstacle,
        domain,
        n_samples=int(spec.get("n_samples", 200)),
        tol=float(spec.get("tol", 1e-8)),
        rng_seed=int(spec.get("seed", 0)),
    )
    payload = report.to_dict()
    payload["notes"] = ["Lions derivative vanished on every sample"] if report.lions_identically_zero else []
    writer.json("assumptions.json", payload)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_study(exp: Experiment, writer: RunWriter, threads: int, kind: str) -> int:
    spec = exp.study.get(kind)
    if spec is None:
        raise ValidationError(f"config has no study.{kind} block")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if kind == "penalty":
            table = penalty_rate_study(
                exp.problem, spec["m_grid"], exp.solver, threads, spread_limit=spec.get("spread_limit", 4.0)
            )
        elif kind == "chaos":
            table = chaos_study(
                exp.problem, spec["N_grid"], spec["N_ref"], exp.solver, threads, min_factor=spec.get("min_factor", 2.0)
            )
        else:
            pert = {k: spec[k] for k in ("dxi", "df") if k in spec}
            table = stability_experiment(
                exp.problem, pert, spec["eps_grid"], exp.solver, threads, max_spread=spec.get("max_spread", 2.0)
            )
    writer.csv(f"study_{kind}.csv", table.columns, _table_rows(table))
    result = table.to_dict()
    result["warnings"] = sorted({str(w.message) for w in caught})
    writer.json(f"study_{kind}.json", result)
    return EXIT_OK if table.passed else EXIT_FAIL


def cmd_decoupling(exp: Experiment, writer: RunWriter, threads: int) -> int:
    spec = exp.study.get("decoupling", {})
    l = exp.problem.coefficients.state_dim
    lambdas = [np.asarray(lam, dtype=float).reshape(-1, l) for lam in spec.get("lambdas", [[0.0] * l])]
    t_grid = spec.get("t_grid", [0.0, exp.solver.T])
    x_grid = [np.broadcast_to(np.asarray(x, dtype=float), (l,)) for x in spec.get("x_grid", [[0.0] * l])]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ev = FieldEvaluator(exp.problem, exp.solver, threads)
        queries = [FieldQuery.make(t, x, lam) for lam in lambdas for t in t_grid for x in x_grid]
        comp = complementarity_probe(
            queries, exp.problem, exp.solver, spec.get("eps", 1e-3), spec.get("eps_prime", 0.0), evaluator=ev
        )
        cont = None
        if "continuity" in spec:
            c = spec["continuity"]
            base = FieldQuery.make(
                c.get("t", 0.0), np.broadcast_to(np.asarray(c.get("x", 0.0), dtype=float), (l,)), lambdas[c.get("lambda", 0)]
            )
            radii = {k: c[k] for k in ("dt", "dx", "dlam") if k in c}
            cont = continuity_probe(base, radii, exp.problem, exp.solver, evaluator=ev)
    units = {"t": "time", "u": "state", "H": "obstacle", "penalty_mass": "state*time", "future_penalty": "state*time"}
    units.update({f"x{j}": "state" for j in range(l)})
    writer.csv("field.csv", comp.columns, comp.rows, units)
    payload = {"complementarity": comp.to_dict(), "warnings": sorted({str(w.message) for w in caught})}
    payload["complementarity"].pop("rows")
    passed = comp.passed
    if cont is not None:
        writer.csv("continuity.csv", cont.columns, _table_rows(cont))
        payload["continuity"] = cont.to_dict()
        passed = passed and cont.passed
    payload["passed"] = passed
    writer.json("decoupling.json", payload)
    return EXIT_OK if passed else EXIT_FAIL


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfrbsde", description="Penalized particle solver for mean-field reflected BSDEs")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--threads", type=int, default=1, help="worker threads, 0 = auto; never changes results")
        p.add_argument("--seed", type=int, help="override solver.seed")

    common(sub.add_parser("solve", help="solve and write diagnostics"))
    common(sub.add_parser("check-assumptions", help="spot-check the obstacle conditions"))
    study = sub.add_parser("study", help="penalty, chaos or stability study")
    common(study)
    study.add_argument("--kind", required=True, choices=["penalty", "chaos", "stability"])
    common(sub.add_parser("decoupling", help="evaluate the decoupling field over a query grid"))
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        if args.threads < 0:
            raise ValidationError("--threads must be >= 0")
        exp = resolve(load_config(args.config), args.seed)
        writer = RunWriter(_output_dir(exp, args.out))
        writer.json("config.resolved.json", exp.resolved)
        if args.command == "solve":
            code = cmd_solve(exp, writer, args.threads)
        elif args.command == "check-assumptions":
            code = cmd_check(exp, writer, args.threads)
        elif args.command == "study":
            code = cmd_study(exp, writer, args.threads, args.kind)
        else:
            code = cmd_decoupling(exp, writer, args.threads)
        command = args.command + (f":{args.kind}" if args.command == "study" else "")
        writer.manifest(exp, command, time.perf_counter() - start)
        return code
    except ValidationError as exc:
        return _fail("validation", str(exc), EXIT_VALIDATION)
    except NumericalError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_NUMERICAL)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())

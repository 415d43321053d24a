"""JSON experiment configs: schema validation, defaults and model construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import registry
from .exceptions import ValidationError
from .forward import CoefficientSpec, constant_coefficients, linear_coefficients, zero_coefficients
from .obstacle import ObstacleFunctional, make_affine, make_separable
from .solver import (
    DriverSpec,
    Problem,
    SolverConfig,
    TerminalSpec,
    constant_driver,
    constant_terminal,
    linear_driver,
    linear_terminal,
    positive_part_terminal,
    square_terminal,
    zero_driver,
)

SCHEMA_VERSION = 1


def load_schema() -> dict:
    text = resources.files("mfrbsde").joinpath("config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"config invalid at {where}: {exc.message}") from None


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    validate(raw)
    return raw


def config_hash(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# -- component builders -----------------------------------------------------


def _vec(value, size: int | None = None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if size is not None:
        arr = np.broadcast_to(arr, (size,)).copy() if arr.size == 1 else arr
        if arr.shape != (size,):
            raise ValidationError(f"expected a vector of length {size}, got shape {arr.shape}")
    return arr


def _mat(value, rows: int, cols: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full((rows, cols), float(arr)) if rows == cols == 1 else arr * np.eye(rows, cols)
    arr = np.atleast_2d(arr)
    if arr.shape != (rows, cols):
        raise ValidationError(f"expected a {rows}x{cols} matrix, got shape {arr.shape}")
    return arr


def build_coefficients(spec: dict, l: int, d: int) -> CoefficientSpec:
    kind = spec["kind"]
    if kind == "zero":
        return zero_coefficients(l, d)
    if kind == "constant":
        return constant_coefficients(_vec(spec.get("b", 0.0), l), _mat(spec["sigma"], l, d))
    if kind == "linear":
        return linear_coefficients(_mat(spec["A"], l, l), _vec(spec.get("c", 0.0), l), _mat(spec["sigma"], l, d))
    coeff = registry.build("coefficients", spec["name"], spec.get("params", {}))
    if (coeff.state_dim, coeff.noise_dim) != (l, d):
        raise ValidationError("custom coefficients do not match the declared dimensions")
    return coeff


def build_driver(spec: dict, n: int) -> DriverSpec:
    kind = spec["kind"]
    if kind == "zero":
        return zero_driver(n)
    if kind == "constant":
        return constant_driver(_vec(spec["c"], n))
    if kind == "linear":
        return linear_driver(_vec(spec.get("c", 0.0), n), float(spec.get("a_y", 0.0)), float(spec.get("a_mean", 0.0)))
    return registry.build("driver", spec["name"], spec.get("params", {}))


def build_terminal(spec: dict, n: int, l: int) -> TerminalSpec:
    kind = spec["kind"]
    project = bool(spec.get("project", True))
    if kind == "constant":
        return constant_terminal(_vec(spec["value"], n), project)
    if kind in ("positive_part", "square") and n != 1:
        raise ValidationError(f"terminal kind {kind!r} is scalar; set n = 1")
    if kind == "positive_part":
        w = spec.get("weights")
        return positive_part_terminal(float(spec.get("strike", 0.0)), None if w is None else _vec(w, l), project)
    if kind == "square":
        return square_terminal(project)
    if kind == "linear":
        return linear_terminal(_mat(spec["A"], n, l), _vec(spec.get("c", 0.0), n), project)
    term = registry.build("terminal", spec["name"], spec.get("params", {}))
    return TerminalSpec(term.func, project, term.name, term.params) if "project" in spec else term


def build_obstacle(spec: dict, n: int) -> ObstacleFunctional:
    kind = spec["kind"]
    if kind == "affine":
        alpha = _vec(spec["alpha"], n)
        return make_affine(
            alpha,
            float(spec.get("a", 0.0)),
            _vec(spec.get("alpha_prime", 0.0), n),
            float(spec.get("b", 0.0)),
            spec.get("delta0"),
        )
    if kind == "separable":
        return _separable_from_spec(spec, n)
    return registry.build("obstacle", spec["name"], spec.get("params", {}))


def _separable_from_spec(spec: dict, n: int) -> ObstacleFunctional:
    """``alpha . y + offset + h(E phi(v))`` with ``phi`` linear or square and ``h`` affine or ``-coef s^2``."""
    alpha = _vec(spec["alpha"], n)
    if not np.any(alpha):
        raise ValidationError("alpha = 0 violates the lower gradient bound |grad_y H| >= beta > 0")
    offset = float(spec.get("offset", 0.0))
    w = _vec(spec.get("w", 1.0), n)
    eye = np.eye(n)
    if spec.get("phi", "linear") == "linear":
        phi, grad_phi = (lambda V: V @ w), (lambda V: np.broadcast_to(w, V.shape).copy())
        hess_phi = lambda V: np.zeros((V.shape[0], n, n))  # noqa: E731
    else:
        phi, grad_phi = (lambda V: np.sum(V * V, axis=1)), (lambda V: 2.0 * V)
        hess_phi = lambda V: np.broadcast_to(2.0 * eye, (V.shape[0], n, n)).copy()  # noqa: E731
    if spec.get("h", "affine") == "affine":
        slope, intercept = float(spec.get("slope", 1.0)), float(spec.get("intercept", 0.0))
        h, dh = (lambda s: slope * s + intercept), (lambda s: slope)
    else:
        coef = float(spec.get("coef", 1.0))
        h, dh = (lambda s: -coef * s * s), (lambda s: -2.0 * coef * s)
    return make_separable(
        lambda Y: Y @ alpha + offset,
        lambda Y: np.broadcast_to(alpha, Y.shape).copy(),
        h,
        dh,
        phi,
        grad_phi,
        beta=float(spec["beta"]),
        bound_M=float(spec["bound_M"]),
        lip_L=spec.get("lip_L"),
        delta0=spec.get("delta0"),
        hess_G=lambda Y: np.zeros((Y.shape[0], n, n)),
        hess_phi=hess_phi,
    )


# -- resolution ---------------------------------------------------------------

_SOLVER_DEFAULTS = {f.name: f.default for f in fields(SolverConfig) if f.name != "T"}
_DEFAULT_OUTPUT = {"directory": "mfrbsde_out", "formats": ["json", "csv"]}


@dataclass
class Experiment:
    problem: Problem
    solver: SolverConfig
    study: dict
    output: dict
    resolved: dict

    @property
    def hash(self) -> str:
        return config_hash(self.resolved)


def resolve(raw: dict, seed_override: int | None = None) -> Experiment:
    """Fill defaults, apply the seed override and build the model objects."""
    validate(raw)
    cfg = copy.deepcopy(raw)
    cfg.setdefault("schema_version", SCHEMA_VERSION)
    prob = cfg["problem"]
    dims = prob.setdefault("dims", {})
    dims.setdefault("n", 1)
    dims.setdefault("l", 1)
    dims.setdefault("d", 1)
    prob.setdefault("horizon", 1.0)
    prob.setdefault("coefficients", {"kind": "zero"})
    prob.setdefault("x0", 0.0)
    if "project" not in prob["terminal"]:
        prob["terminal"]["project"] = True
    solver = cfg.setdefault("solver", {})
    for key, value in _SOLVER_DEFAULTS.items():
        solver.setdefault(key, value)
    if seed_override is not None:
        if not 0 <= int(seed_override) < 2**64:
            raise ValidationError("seed must be a nonnegative 64-bit integer")
        solver["seed"] = int(seed_override)
    cfg.setdefault("study", {})
    out = cfg.setdefault("output", {})
    for key, value in _DEFAULT_OUTPUT.items():
        out.setdefault(key, value)
    validate(cfg)

    n, l, d = dims["n"], dims["l"], dims["d"]
    coeff = build_coefficients(prob["coefficients"], l, d)
    problem = Problem(
        obstacle=build_obstacle(prob["obstacle"], n),
        driver=build_driver(prob["driver"], n),
        terminal=build_terminal(prob["terminal"], n, l),
        coefficients=coeff,
        x0=_points(prob["x0"], l),
        n=n,
    )
    config = SolverConfig(T=float(prob["horizon"]), **{k: solver[k] for k in _SOLVER_DEFAULTS})
    return Experiment(problem, config, cfg["study"], cfg["output"], cfg)


def _points(value, l: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(l, float(arr))
    if arr.ndim == 1:
        if l == 1:
            return arr.reshape(-1, 1) if arr.shape[0] > 1 else arr
        if arr.shape[0] != l:
            raise ValidationError(f"x0 must have {l} coordinates")
        return arr
    if arr.shape[1] != l:
        raise ValidationError(f"x0 atoms must have {l} coordinates")
    return arr

import numpy as np
import pytest

from mfrbsde.decoupling import (
    FieldEvaluator,
    FieldQuery,
    check_sign_normalization,
    complementarity_probe,
    continuity_probe,
    eval_u,
)
from mfrbsde.exceptions import ValidationError
from mfrbsde.forward import TAGGED_STREAM_OFFSET, brownian_panel, constant_coefficients, zero_coefficients
from mfrbsde.obstacle import make_affine
from mfrbsde.solver import (
    PenalizedParticleSolver,
    Problem,
    SolverConfig,
    constant_driver,
    constant_terminal,
    square_terminal,
    zero_driver,
)

decreasing_far = make_affine([-1.0], 0.0, [0.0], 50.0)
quadratic = Problem(decreasing_far, zero_driver(), square_terminal(), constant_coefficients(0.0, 1.0))
cfg = SolverConfig(N=20_000, M=10, m=10.0, basis_degree=3, check_assumptions=False)
lam0 = [[0.0]]


@pytest.fixture(scope="module")
def evaluator():
    return FieldEvaluator(quadratic, cfg)


def test_quadratic_field_value(evaluator):
    res = evaluator.eval(FieldQuery.make(0.0, [0.0], lam0))
    B_T = brownian_panel(cfg.seed, cfg.N, cfg.M, 1, cfg.grid.dt, offset=TAGGED_STREAM_OFFSET).increments.sum(axis=0)
    assert res.u_value == pytest.approx(float(np.mean(B_T**2)), abs=1e-9)
    assert res.u_value == pytest.approx(1.0, abs=2e-2)
    assert res.penalty_mass == 0.0 and res.confidence == "high"


def test_terminal_identity(evaluator):
    for x in (-2.0, 0.3, 7.0):
        res = evaluator.eval(FieldQuery.make(1.0, [x], [[0.0], [1.0]]))
        assert res.u_value == x * x
        assert res.constraint_value >= 0


def test_constant_terminal_gives_constant_field():
    problem = Problem(decreasing_far, zero_driver(), constant_terminal([3.0]), constant_coefficients(0.0, 1.0))
    ev = FieldEvaluator(problem, SolverConfig(N=500, M=5, m=10.0, check_assumptions=False))
    for t, x in [(0.0, 0.0), (0.4, 2.0), (1.0, -1.0)]:
        res = ev.eval(FieldQuery.make(t, [x], [[0.0]]))
        assert res.u_value == pytest.approx(3.0, abs=1e-12) and res.penalty_mass == 0.0


def test_far_query_is_low_confidence(evaluator):
    assert evaluator.eval(FieldQuery.make(0.0, [40.0], lam0)).confidence == "low"


@pytest.mark.filterwarnings("ignore:m \\* dt")
def test_agrees_with_global_solve():
    atoms = [[-0.5], [0.5]]
    problem = Problem(decreasing_far, zero_driver(), square_terminal(), constant_coefficients(0.0, 1.0), x0=np.array(atoms))
    small = SolverConfig(N=4000, M=10, m=10.0, check_assumptions=False)
    est = PenalizedParticleSolver(problem, n_particles=4000, n_steps=10, penalty=10.0, check_assumptions=False).fit()
    ev = FieldEvaluator(problem, small)
    for x in atoms:
        u = ev.eval(FieldQuery.make(0.0, x, atoms)).u_value
        assert u == pytest.approx(est.predict([x], t=0.0)[0, 0], abs=5e-2)


def test_sign_normalization_rejects_increasing_obstacles():
    with pytest.raises(ValidationError, match="not flipped"):
        check_sign_normalization(make_affine([1.0], 0.0, [0.0]))
    with pytest.raises(ValidationError, match="mixed"):
        check_sign_normalization(make_affine([-1.0], 1.0, [1.0]))
    check_sign_normalization(make_affine([-1.0], 0.5, [-1.0]))
    problem = Problem(make_affine([1.0], 0.0, [0.0]), zero_driver(), square_terminal())
    with pytest.raises(ValidationError):
        eval_u(FieldQuery.make(0.0, [0.0], lam0), problem, SolverConfig(N=10, M=2))


def test_query_validation(evaluator):
    with pytest.raises(ValidationError, match="grid time"):
        evaluator.eval(FieldQuery.make(0.05, [0.0], lam0))
    with pytest.raises(ValidationError):
        evaluator.eval(FieldQuery.make(0.0, [0.0, 1.0], lam0))
    vec = Problem(make_affine([-1.0, -1.0], 0.0, [0.0, 0.0]), zero_driver(2), constant_terminal([0.0, 0.0]), n=2)
    with pytest.raises(ValidationError, match="n = 1"):
        FieldEvaluator(vec, SolverConfig(N=10, M=2))


def test_continuity_probe(evaluator):
    q = FieldQuery.make(0.0, [0.0], lam0)
    zero = continuity_probe(q, {}, quadratic, cfg, evaluator=evaluator)
    assert np.all(zero.column("modulus") == 0)

    dx = continuity_probe(q, {"dx": 0.4}, quadratic, cfg, evaluator=evaluator)
    np.testing.assert_allclose(dx.column("modulus"), dx.column("dx_norm") ** 2, atol=2e-2)
    assert dx.passed

    dlam = continuity_probe(q, {"dlam": 0.5}, quadratic, cfg, evaluator=evaluator)
    assert np.all(dlam.column("modulus") <= 2e-2)

    dt = continuity_probe(q, {"dt": 0.4}, quadratic, cfg, evaluator=evaluator)
    np.testing.assert_allclose(dt.column("dt_eff"), [0.4, 0.2, 0.1], atol=1e-12)
    np.testing.assert_allclose(dt.column("modulus"), dt.column("dt_eff"), atol=2e-2)
    with pytest.raises(ValidationError):
        continuity_probe(q, {"dy": 1.0}, quadratic, cfg, evaluator=evaluator)


def test_complementarity_never_binding(evaluator):
    queries = [FieldQuery.make(t, [x], lam0) for t in (0.0, 0.5, 1.0) for x in (-1.0, 0.0, 1.0)]
    table = complementarity_probe(queries, quadratic, cfg, evaluator=evaluator)
    assert table.passed
    assert np.all(table.column("penalty_mass") == 0) and np.all(table.column("H") > 0)


def test_complementarity_binding_region():
    # u is pushed up at unit speed and capped at 0.5
    problem = Problem(make_affine([-1.0], 0.0, [0.0], 0.5), constant_driver([1.0]), constant_terminal([0.0]),
                      zero_coefficients())
    conf = SolverConfig(N=4, M=200, m=50.0, basis_degree=0, check_assumptions=False)
    queries = [FieldQuery.make(t, [0.0], lam0) for t in (0.0, 0.25, 0.8, 1.0)]
    table = complementarity_probe(queries, problem, conf)
    rows = {r["t"]: r for r in table.rows}
    assert rows[0.0]["penalty_mass"] > 0 and abs(rows[0.0]["H"]) <= 1.0 / np.sqrt(conf.m)
    assert rows[0.0]["u"] == pytest.approx(0.5, abs=0.03)
    assert rows[0.8]["penalty_mass"] == 0.0 and rows[0.8]["H"] == pytest.approx(0.3, abs=1e-9)
    assert rows[1.0]["H"] >= 0
    assert table.passed

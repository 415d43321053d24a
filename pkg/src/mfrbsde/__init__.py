"""Penalized interacting-particle solver for mean-field reflected BSDEs."""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ConsistencyError,
    FeasibilityError,
    MFRBSDEError,
    NumericalError,
    RegressionError,
    ValidationError,
)
from .measure import EmpiricalMeasure, empirical_from, mean, pushforward, w2, w2_1d, w2_exact_small  # noqa: E402
from .obstacle import (  # noqa: E402
    ObstacleFunctional,
    SampleDomain,
    check_assumptions,
    h_minus,
    lions_grad_fd,
    make_affine,
    make_separable,
    reflection_increment,
)
from .forward import BrownianPanel, CoefficientSpec, TimeGrid, brownian_panel, simulate_forward  # noqa: E402
from .feasibility import FlowResult, flow_to_feasible_point, project_terminal_particles  # noqa: E402
from .regression import ConditionalExpectationRegressor, regress_conditional  # noqa: E402
from .solver import (  # noqa: E402
    DriverSpec,
    ParticleSolution,
    PenalizedParticleSolver,
    Problem,
    SolverConfig,
    TerminalSpec,
    solve_deterministic_reduction,
    solve_penalized,
    solve_problem,
)
from .diagnostics import (  # noqa: E402
    DiagnosticsReport,
    StudyTable,
    chaos_study,
    constraint_metrics,
    penalty_rate_study,
    reflection_path,
    stability_experiment,
)
from .decoupling import FieldQuery, FieldResult, complementarity_probe, continuity_probe, eval_u  # noqa: E402

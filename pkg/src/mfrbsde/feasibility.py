"""Gradient flows that move points onto the constraint set ``H >= 0``.

The single-point flow follows ``y' = grad_y H(y, delta_y)`` until
``H(y, delta_y) >= 0``. The particle projection flows a whole terminal cloud
under its own empirical measure; each particle freezes at its first
feasibility time but keeps contributing its position to the measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import FeasibilityError, ValidationError
from .obstacle import ObstacleFunctional

DEFAULT_FEAS_TOL = 1e-9
DEFAULT_ROUNDS = 5


@dataclass
class FlowResult:
    """Endpoints, per-point stop times and achieved ``H`` values."""

    endpoints: np.ndarray
    stop_times: np.ndarray
    certificates: np.ndarray
    dt_flow: float
    rounds: int = 1
    start_values: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def endpoint(self) -> np.ndarray:
        return self.endpoints[0]

    @property
    def stop_time(self) -> float:
        return float(self.stop_times[0])


def _default_dt(H: ObstacleFunctional, worst_violation: float) -> float:
    return 1e-3 * (1.0 + worst_violation / H.beta**2)


def _default_max_t(H: ObstacleFunctional, worst_violation: float, dt_flow: float) -> float:
    return 10.0 * (worst_violation / H.beta**2 + 1.0) + 10 * dt_flow


def flow_to_feasible_point(
    H: ObstacleFunctional,
    y0,
    dt_flow: float | None = None,
    max_t: float | None = None,
) -> FlowResult:
    """Explicit Euler on ``y' = grad_y H(y, delta_y)`` from ``y0``.

    Stops at the first grid time where ``H(y, delta_y) >= 0``. The stop time
    is checked against ``H^-(y0, delta_y0) / beta^2 + dt_flow`` and every
    step against the discrete growth ``beta^2 dt - c dt^2``.
    """
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    pt = y.reshape(1, -1)
    h0 = H.eval(y, pt)
    viol = max(0.0, -h0)
    if dt_flow is None:
        dt_flow = _default_dt(H, viol)
    if not dt_flow > 0:
        raise ValidationError("dt_flow must be positive")
    if max_t is None:
        max_t = _default_max_t(H, viol, dt_flow)
    if max_t < 0:
        raise ValidationError("max_t must be nonnegative")

    beta2 = H.beta**2
    curvature = 2.0 * H.bound_M**3
    t = 0.0
    h = h0
    while h < 0:
        if t + dt_flow > max_t + 1e-12:
            raise FeasibilityError(
                f"flow did not reach H >= 0 within max_t={max_t} (H={h:.3e}); "
                "beta may be misdeclared or the sign condition on the Lions derivative fails"
            )
        y = y + dt_flow * H.grad_y(y, y.reshape(1, -1))
        t += dt_flow
        h_new = H.eval(y, y.reshape(1, -1))
        if h_new - h < beta2 * dt_flow - curvature * dt_flow**2 - 1e-12 * (1 + abs(h)):
            raise FeasibilityError(
                f"flow progress {h_new - h:.3e} below beta^2 dt = {beta2 * dt_flow:.3e} at t={t:.4g}"
            )
        h = h_new
    bound = viol / beta2 + dt_flow
    if t > bound * (1 + 1e-12):
        raise FeasibilityError(f"stop time {t} exceeds H^-/beta^2 + dt_flow = {bound}")
    return FlowResult(y.reshape(1, -1), np.array([t]), np.array([h]), dt_flow, 1, np.array([h0]))


def project_terminal_particles(
    H: ObstacleFunctional,
    xi,
    dt_flow: float | None = None,
    max_t: float | None = None,
    feas_tol: float = DEFAULT_FEAS_TOL,
    max_rounds: int = DEFAULT_ROUNDS,
) -> FlowResult:
    """Flow a cloud until every particle satisfies ``H(x_i, mu_N) >= 0``.

    All unfrozen particles move simultaneously under the current empirical
    measure. After all have stopped, certificates are re-checked against the
    final measure and violators resume flowing, for at most ``max_rounds``
    rounds. Raises ``FeasibilityError`` if a certificate still sits below
    ``-feas_tol`` or if ``|x_hat_i - x_i| > M t*_i``.
    """
    X = np.asarray(xi, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    X = X.copy()
    start = X.copy()
    N = X.shape[0]
    h_start = H.eval(X, X)
    viol = float(np.max(np.maximum(0.0, -h_start)))
    if dt_flow is None:
        dt_flow = _default_dt(H, viol)
    if not dt_flow > 0:
        raise ValidationError("dt_flow must be positive")
    if max_t is None:
        max_t = _default_max_t(H, viol, dt_flow)

    stop_times = np.zeros(N)
    t = 0.0
    h = h_start
    rounds = 0
    while rounds < max_rounds:
        # first round flows every infeasible particle; later rounds only real violators
        active = h < 0 if rounds == 0 else h < -feas_tol
        if not active.any():
            break
        rounds += 1
        while active.any():
            if t + dt_flow > max_t + 1e-12:
                raise FeasibilityError(
                    f"particle projection exceeded max_t={max_t} with {int(active.sum())} particles infeasible"
                )
            X[active] = X[active] + dt_flow * H.grad_y(X[active], X)
            t += dt_flow
            stop_times[active] += dt_flow
            h = H.eval(X, X)
            active &= h < 0
        h = H.eval(X, X)

    certificates = H.eval(X, X)
    if np.any(certificates < -feas_tol):
        worst = int(np.argmin(certificates))
        raise FeasibilityError(
            f"certificate regression: particle {worst} has H={certificates[worst]:.3e} "
            f"after {max_rounds} re-projection rounds"
        )
    dist = np.linalg.norm(X - start, axis=1)
    if np.any(dist > H.bound_M * stop_times * (1 + 1e-12) + 1e-12):
        i = int(np.argmax(dist - H.bound_M * stop_times))
        raise FeasibilityError(
            f"particle {i} moved {dist[i]:.3e} > M t* = {H.bound_M * stop_times[i]:.3e}"
        )
    return FlowResult(X, stop_times, certificates, dt_flow, max(rounds, 1), h_start)

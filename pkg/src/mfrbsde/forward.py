"""Forward diffusion and reproducible Brownian increments.

Every particle owns a Philox stream keyed by ``(seed, particle index)``;
row ``k`` of that stream is the increment of step ``k``. A particle's noise is
therefore independent of how many particles are simulated and of how the
work is split across threads, which gives common random numbers across
particle counts for free.
"""

from __future__ import annotations

from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericalError, ValidationError

# stream-index offset reserved for tagged (query) particles of the decoupling field
TAGGED_STREAM_OFFSET = 1 << 62


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``start + k T / M`` for ``k = 0..M``."""

    T: float
    M: int
    start: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValidationError(f"horizon T must be positive, got {self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise ValidationError(f"step count M must be a positive integer, got {self.M}")

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        return self.start + np.arange(self.M + 1) * self.dt

    @property
    def end(self) -> float:
        return self.start + self.T


@dataclass(frozen=True)
class CoefficientSpec:
    """Drift ``b(t, X) -> (N, l)`` and diffusion ``sigma(t, X) -> (N, l, d)``."""

    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    state_dim: int
    noise_dim: int
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)


def zero_coefficients(l: int = 1, d: int = 1) -> CoefficientSpec:
    return constant_coefficients(np.zeros(l), np.zeros((l, d)), name="zero")


def constant_coefficients(b, sigma, name: str = "constant") -> CoefficientSpec:
    b = np.atleast_1d(np.asarray(b, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim < 2:
        sigma = np.atleast_1d(sigma).reshape(b.shape[0], -1)
    l, d = sigma.shape
    if b.shape[0] != l:
        raise ValidationError("drift and diffusion state dimensions differ")

    def drift(t, X):
        return np.broadcast_to(b, X.shape)

    def diffusion(t, X):
        return np.broadcast_to(sigma, (X.shape[0], l, d))

    return CoefficientSpec(drift, diffusion, l, d, name, {"b": b.tolist(), "sigma": sigma.tolist()})


def linear_coefficients(A, c, sigma) -> CoefficientSpec:
    """``b(t, x) = A x + c`` with constant diffusion matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    base = constant_coefficients(c, sigma, name="linear")

    def drift(t, X):
        return X @ A.T + c

    return CoefficientSpec(
        drift,
        base.diffusion,
        base.state_dim,
        base.noise_dim,
        "linear",
        {"A": A.tolist(), "c": c.tolist(), "sigma": base.params["sigma"]},
    )


@dataclass(frozen=True)
class BrownianPanel:
    """Increments ``dB[k, i, :]`` of shape ``(M, N, d)``, each ``N(0, dt I)``."""

    increments: np.ndarray
    seed: int
    dt: float
    offset: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.increments.shape

    def steps(self, k0: int, k1: int | None = None) -> "BrownianPanel":
        return BrownianPanel(self.increments[k0:k1], self.seed, self.dt, self.offset)

    def particles(self, count: int) -> "BrownianPanel":
        return BrownianPanel(self.increments[:, :count], self.seed, self.dt, self.offset)


def _stream_normals(seed: int, index: int, M: int, d: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[seed, index]))
    return gen.standard_normal((M, d))


def brownian_panel(
    seed: int, N: int, M: int, d: int, dt: float, offset: int = 0, threads: int = 1
) -> BrownianPanel:
    """Counter-based Brownian increments; identical for any ``threads`` value."""
    if min(N, M, d) < 1:
        raise ValidationError("N, M and d must be >= 1")
    if not dt > 0:
        raise ValidationError("dt must be positive")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValidationError("seed must be a nonnegative 64-bit integer")
    out = np.empty((M, N, d))
    scale = np.sqrt(dt)

    def fill(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            out[:, i, :] = _stream_normals(seed, offset + i, M, d) * scale

    workers = _resolve_threads(threads)
    if workers == 1 or N < 256:
        fill(0, N)
    else:
        bounds = np.linspace(0, N, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda ab: fill(*ab), zip(bounds[:-1], bounds[1:])))
    out.setflags(write=False)
    return BrownianPanel(out, seed, float(dt), offset)


def _resolve_threads(threads: int | None) -> int:
    if threads is None or threads == 0:
        import os

        return max(1, os.cpu_count() or 1)
    if threads < 0:
        raise ValidationError("threads must be >= 0")
    return int(threads)


def simulate_forward(
    coeff: CoefficientSpec, x0, grid: TimeGrid, panel: BrownianPanel
) -> np.ndarray:
    """Euler-Maruyama paths ``X[k, i, :]`` of shape ``(M + 1, N, l)``."""
    dB = panel.increments
    M, N, d = dB.shape
    if M != grid.M:
        raise ValidationError(f"panel has {M} steps but grid has {grid.M}")
    if d != coeff.noise_dim:
        raise ValidationError(f"panel noise dimension {d} != coefficient noise dimension {coeff.noise_dim}")
    if not np.isclose(panel.dt, grid.dt, rtol=1e-12, atol=0):
        raise ValidationError("panel dt does not match grid dt")
    l = coeff.state_dim
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x0 = np.broadcast_to(np.atleast_1d(x0), (N, l))
    if x0.shape != (N, l):
        raise ValidationError(f"x0 must have shape ({N}, {l}), got {x0.shape}")
    X = np.empty((M + 1, N, l))
    X[0] = x0
    times = grid.times
    dt = grid.dt
    for k in range(M):
        t = times[k]
        xk = X[k]
        X[k + 1] = xk + coeff.drift(t, xk) * dt + np.einsum("ild,id->il", coeff.diffusion(t, xk), dB[k])
        if not np.all(np.isfinite(X[k + 1])):
            raise NumericalError(f"forward state became non-finite at step {k + 1}")
    return X

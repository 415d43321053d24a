"""Constraint functionals H(y, mu), their derivatives and assumption checks.

All callables operate on batches: ``y`` and ``v`` are ``(B, n)`` arrays and a
measure is passed as its ``(N, n)`` atom array. The Lions derivative at a
uniform empirical measure is the functional's analytic oracle evaluated at
the atoms; :func:`lions_grad_fd` provides the atom-perturbation cross-check.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError
from .measure import as_atoms, w2

BatchValue = Callable[[np.ndarray, np.ndarray], np.ndarray]
BatchLions = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

CONDITIONS = ("bound_12", "bound_13", "lipschitz_14", "sign_15", "concavity_16", "strict_38")

_PAIR_BLOCK = 1 << 18


def _as_batch(y) -> tuple[np.ndarray, bool]:
    arr = np.asarray(y, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        return arr.reshape(1, -1), True
    return arr, False


@dataclass(frozen=True)
class ObstacleFunctional:
    """The obstacle H with its derivatives and declared constants.

    ``beta`` is the lower bound on ``|grad_y H|``, ``bound_M`` the uniform
    derivative bound, ``lip_L`` the Lipschitz constant of the derivatives in
    the measure argument and ``delta0`` the optional strictness margin of the
    mean Lions derivative. ``lions_y_free`` declares that the Lions derivative
    does not depend on ``y``, which lets the solver skip the pairwise sum.
    """

    func: BatchValue
    grad_y_func: BatchValue
    lions_func: BatchLions
    beta: float
    bound_M: float
    lip_L: float | None = 0.0
    delta0: float | None = None
    hess_yy_func: BatchValue | None = None
    grad_v_lions_func: BatchLions | None = None
    lions_y_free: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError(
                f"lower gradient bound beta must be positive (|grad_y H| >= beta > 0), got {self.beta}"
            )
        if not self.beta < self.bound_M:
            raise ValidationError(f"need beta < bound_M, got beta={self.beta}, bound_M={self.bound_M}")
        if self.delta0 is not None and not 0 < self.delta0 <= 1:
            raise ValidationError(f"delta0 must lie in (0, 1], got {self.delta0}")

    # -- evaluation; y may be a single point or a (B, n) batch ------------
    def eval(self, y, mu):
        yb, single = _as_batch(y)
        out = np.asarray(self.func(yb, as_atoms(mu)), dtype=float)
        return float(out[0]) if single else out

    def grad_y(self, y, mu):
        yb, single = _as_batch(y)
        out = np.asarray(self.grad_y_func(yb, as_atoms(mu)), dtype=float)
        return out[0] if single else out

    def lions_grad(self, y, mu, v):
        yb, single = _as_batch(y)
        vb, _ = _as_batch(v)
        if yb.shape[0] != vb.shape[0]:
            yb = np.broadcast_to(yb, vb.shape)
        out = np.asarray(self.lions_func(yb, as_atoms(mu), vb), dtype=float)
        return out[0] if single else out

    def hess_yy(self, y, mu, h: float = 1e-5):
        yb, single = _as_batch(y)
        atoms = as_atoms(mu)
        if self.hess_yy_func is not None:
            out = np.asarray(self.hess_yy_func(yb, atoms), dtype=float)
        else:
            n = yb.shape[1]
            out = np.empty((yb.shape[0], n, n))
            step = h * (1.0 + np.abs(yb))
            for r in range(n):
                e = np.zeros(n)
                e[r] = 1.0
                hi = self.grad_y_func(yb + step[:, r : r + 1] * e, atoms)
                lo = self.grad_y_func(yb - step[:, r : r + 1] * e, atoms)
                out[:, :, r] = (hi - lo) / (2 * step[:, r : r + 1])
        return out[0] if single else out

    def grad_v_lions(self, y, mu, v, h: float = 1e-5):
        yb, single = _as_batch(y)
        vb, _ = _as_batch(v)
        atoms = as_atoms(mu)
        if self.grad_v_lions_func is not None:
            out = np.asarray(self.grad_v_lions_func(yb, atoms, vb), dtype=float)
        else:
            n = vb.shape[1]
            out = np.empty((vb.shape[0], n, n))
            step = h * (1.0 + np.abs(vb))
            for r in range(n):
                e = np.zeros(n)
                e[r] = 1.0
                hi = self.lions_func(yb, atoms, vb + step[:, r : r + 1] * e)
                lo = self.lions_func(yb, atoms, vb - step[:, r : r + 1] * e)
                out[:, :, r] = (hi - lo) / (2 * step[:, r : r + 1])
        return out[0] if single else out


def h_minus(H: ObstacleFunctional, y, mu):
    """Negative part ``max(0, -H(y, mu))``; exactly zero wherever ``H >= 0``."""
    val = H.eval(y, mu)
    return np.maximum(0.0, -val) if isinstance(val, np.ndarray) else max(0.0, -val)


def reflection_increment(H: ObstacleFunctional, cloud_y, mu, k) -> np.ndarray:
    """Per-particle reflection drift density.

    Entry ``i`` is ``grad_y H(y_i, mu) k_i + (1/N) sum_j lions H(y_j, mu)(y_i) k_j``.
    Only particles with ``k_j > 0`` enter the sum, which is exact.
    """
    Y = np.asarray(cloud_y, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    k = np.asarray(k, dtype=float).ravel()
    N = Y.shape[0]
    if k.shape[0] != N:
        raise ValidationError(f"length mismatch: {N} particles but {k.shape[0]} penalty weights")
    if np.any(k < 0):
        raise ValidationError("penalty weights k must be nonnegative")
    atoms = as_atoms(mu)
    out = np.zeros_like(Y)
    active = np.flatnonzero(k > 0)
    if active.size == 0:
        return out
    out[active] = H.grad_y_func(Y[active], atoms) * k[active, None]
    out += mean_field_reflection(H, Y, k, atoms, Y)
    return out


def mean_field_reflection(H: ObstacleFunctional, cloud_y, k, mu, v) -> np.ndarray:
    """``(1/N) sum_j lions H(y_j, mu)(v_q) k_j`` for every query point ``v_q``.

    ``cloud_y`` and ``k`` describe the ``N`` reflecting particles; ``v`` is a
    ``(Q, n)`` batch of evaluation points.
    """
    Y = np.asarray(cloud_y, dtype=float)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    k = np.asarray(k, dtype=float).ravel()
    V = np.asarray(v, dtype=float)
    if V.ndim == 1:
        V = V.reshape(-1, 1)
    N, Q = Y.shape[0], V.shape[0]
    atoms = as_atoms(mu)
    out = np.zeros_like(V)
    active = np.flatnonzero(k > 0)
    if active.size == 0:
        return out
    if H.lions_y_free:
        return H.lions_func(np.broadcast_to(Y[active[0]], V.shape), atoms, V) * (k[active].sum() / N)
    block = max(1, _PAIR_BLOCK // Q)
    for start in range(0, active.size, block):
        js = active[start : start + block]
        b = js.size
        yj = np.repeat(Y[js], Q, axis=0)
        vv = np.tile(V, (b, 1))
        vals = H.lions_func(yj, atoms, vv).reshape(b, Q, -1)
        out += np.einsum("j,jqn->qn", k[js], vals) / N
    return out


def lions_grad_fd(H: ObstacleFunctional, y, mu, atom_index: int, eps: float = 1e-6) -> np.ndarray:
    """Forward-difference Lions derivative at atom ``atom_index`` of ``mu``.

    Coordinate ``r`` is ``N (H(y, mu with atom i shifted by eps e_r) - H(y, mu)) / eps``.
    """
    if not eps > 0:
        raise ValidationError("eps must be positive")
    atoms = np.array(as_atoms(mu), dtype=float)
    N, n = atoms.shape
    y = np.atleast_1d(np.asarray(y, dtype=float))
    base = H.eval(y, atoms)
    out = np.empty(n)
    for r in range(n):
        shifted = atoms.copy()
        shifted[atom_index, r] += eps
        out[r] = N * (H.eval(y, shifted) - base) / eps
    if not np.all(np.isfinite(out)):
        raise ValidationError("finite-difference Lions derivative is not finite")
    return out


# -- built-in families -----------------------------------------------------


def make_affine(alpha, a: float, alpha_prime, b: float = 0.0, delta0: float | None = None) -> ObstacleFunctional:
    """``H(y, mu) = alpha . y + a E_mu[alpha' . v] + b`` with exact derivatives."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    alpha_prime = np.atleast_1d(np.asarray(alpha_prime, dtype=float))
    if alpha.shape != alpha_prime.shape:
        raise ValidationError("alpha and alpha_prime must have the same dimension")
    if a < 0:
        raise ValidationError(f"mean-field weight a must be nonnegative, got {a}")
    beta = float(np.linalg.norm(alpha))
    if beta == 0.0:
        raise ValidationError(
            "alpha = 0 violates the lower gradient bound |grad_y H| >= beta > 0; "
            "the obstacle must depend on y"
        )
    lions = a * alpha_prime
    lions_norm = float(np.linalg.norm(lions))
    # strict beta < M even when the measure term vanishes
    bound_M = max(beta + lions_norm, beta * (1.0 + 1e-9))
    if delta0 is None:
        ratio = lions_norm / beta
        delta0 = 1.0 - ratio if ratio < 1.0 else None
    n = alpha.shape[0]

    def func(Y, atoms):
        return Y @ alpha + a * float(np.mean(atoms @ alpha_prime)) + b

    def grad(Y, atoms):
        return np.broadcast_to(alpha, Y.shape).copy()

    def lions_func(Y, atoms, V):
        return np.broadcast_to(lions, V.shape).copy()

    def hess(Y, atoms):
        return np.zeros((Y.shape[0], n, n))

    def gvl(Y, atoms, V):
        return np.zeros((V.shape[0], n, n))

    return ObstacleFunctional(
        func=func,
        grad_y_func=grad,
        lions_func=lions_func,
        beta=beta,
        bound_M=bound_M,
        lip_L=0.0,
        delta0=delta0,
        hess_yy_func=hess,
        grad_v_lions_func=gvl,
        lions_y_free=True,
        name="affine",
        params={"alpha": alpha.tolist(), "a": a, "alpha_prime": alpha_prime.tolist(), "b": b},
    )


def make_separable(
    G,
    grad_G,
    h,
    dh,
    phi,
    grad_phi,
    *,
    beta: float,
    bound_M: float,
    lip_L: float | None = None,
    delta0: float | None = None,
    hess_G=None,
    hess_phi=None,
    name: str = "separable",
) -> ObstacleFunctional:
    """``H(y, mu) = G(y) + h(E_mu[phi(v)])``.

    ``G``, ``phi`` map ``(B, n)`` batches to ``(B,)``; ``grad_G``, ``grad_phi``
    to ``(B, n)``; ``hess_*`` (optional) to ``(B, n, n)``. ``h`` and ``dh`` are
    scalar functions. The Lions derivative is ``h'(E phi) grad_phi(v)``.
    The constants cannot be derived for arbitrary callables and must be given.
    """

    def func(Y, atoms):
        return G(Y) + h(float(np.mean(phi(atoms))))

    def grad(Y, atoms):
        return grad_G(Y)

    def lions_func(Y, atoms, V):
        return dh(float(np.mean(phi(atoms)))) * grad_phi(V)

    hess = (lambda Y, atoms: hess_G(Y)) if hess_G is not None else None
    gvl = None
    if hess_phi is not None:

        def gvl(Y, atoms, V):
            return dh(float(np.mean(phi(atoms)))) * hess_phi(V)

    return ObstacleFunctional(
        func=func,
        grad_y_func=grad,
        lions_func=lions_func,
        beta=beta,
        bound_M=bound_M,
        lip_L=lip_L,
        delta0=delta0,
        hess_yy_func=hess,
        grad_v_lions_func=gvl,
        lions_y_free=True,
        name=name,
    )


# -- assumption checker ----------------------------------------------------


@dataclass(frozen=True)
class SampleDomain:
    """Box ``[low, high]`` in R^n for points and atoms, plus an atom-count range."""

    low: np.ndarray
    high: np.ndarray
    n_atoms: tuple[int, int] = (2, 16)

    @classmethod
    def cube(cls, n: int, half_width: float = 5.0, center=0.0, n_atoms=(2, 16)) -> "SampleDomain":
        c = np.broadcast_to(np.asarray(center, dtype=float), (n,))
        return cls(c - half_width, c + half_width, tuple(n_atoms))

    @property
    def dim(self) -> int:
        return int(np.asarray(self.low).shape[0])


@dataclass
class ConditionResult:
    condition: str
    status: str  # "pass" | "fail" | "skipped"
    margin: float | None = None
    witness: dict | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "status": self.status,
            "margin": self.margin,
            "witness": self.witness,
            "note": self.note,
        }


@dataclass
class AssumptionReport:
    entries: dict[str, ConditionResult]
    n_samples: int
    tol: float
    lions_identically_zero: bool = False

    @property
    def passed(self) -> bool:
        return all(e.status != "fail" for e in self.entries.values())

    def failures(self) -> list[str]:
        return [c for c, e in self.entries.items() if e.status == "fail"]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_samples": self.n_samples,
            "tol": self.tol,
            "lions_identically_zero": self.lions_identically_zero,
            "conditions": [self.entries[c].to_dict() for c in CONDITIONS],
        }


class _Worst:
    def __init__(self):
        self.margin = np.inf
        self.witness = None

    def offer(self, margin: float, witness_fn):
        if margin < self.margin:
            self.margin = float(margin)
            self.witness = witness_fn()


def _fro(mat: np.ndarray) -> float:
    return float(np.sqrt(np.sum(mat * mat)))


def check_assumptions(
    H: ObstacleFunctional,
    sample_domain: SampleDomain,
    n_samples: int = 200,
    tol: float = 1e-8,
    rng_seed: int = 0,
) -> AssumptionReport:
    """Monte Carlo falsification of the structural conditions on ``H``.

    Each condition records its worst sampled margin (negative means violated)
    and the witness attaining it. A pass only means no sampled violation.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    low = np.asarray(sample_domain.low, dtype=float)
    high = np.asarray(sample_domain.high, dtype=float)
    n = low.shape[0]
    nmin, nmax = sample_domain.n_atoms
    worst = {c: _Worst() for c in CONDITIONS}
    lions_zero = True
    beta, M, L = H.beta, H.bound_M, H.lip_L

    def box(size):
        return low + (high - low) * rng.random((size, n))

    for _ in range(n_samples):
        N = int(rng.integers(nmin, nmax + 1))
        atoms1, atoms2 = box(N), box(N)
        y1, y2, v = box(1)[0], box(1)[0], box(1)[0]

        def wit(**extra):
            return lambda: {
                "y": y1.tolist(),
                "mu": atoms1.tolist(),
                "v": v.tolist(),
                **{k: (val.tolist() if isinstance(val, np.ndarray) else val) for k, val in extra.items()},
            }

        g11 = H.grad_y(y1, atoms1)
        l11v = H.lions_grad(y1, atoms1, v)
        l22v = H.lions_grad(y2, atoms2, v)
        if np.any(l11v != 0) or np.any(l22v != 0):
            lions_zero = False
        gnorm = float(np.linalg.norm(g11))

        worst["bound_12"].offer(gnorm - beta, wit())

        total = (
            gnorm
            + _fro(H.hess_yy(y1, atoms1))
            + float(np.linalg.norm(l11v))
            + _fro(H.grad_v_lions(y1, atoms1, v))
        )
        worst["bound_13"].offer(M - total, wit())

        if L is not None:
            g12 = H.grad_y(y1, atoms2)
            m1 = L * w2(atoms1, atoms2) - float(np.linalg.norm(g11 - g12))
            lam1 = H.lions_grad(np.broadcast_to(y1, atoms1.shape), atoms1, atoms1)
            lam2 = H.lions_grad(np.broadcast_to(y1, atoms2.shape), atoms2, atoms2)
            lhs = float(np.mean(np.sum((lam1 - lam2) ** 2, axis=1)))
            m2 = L * float(np.mean(np.sum((atoms1 - atoms2) ** 2, axis=1))) - lhs
            worst["lipschitz_14"].offer(min(m1, m2), wit(mu2=atoms2))

        s1 = float(H.grad_y(y1, atoms1) @ l22v)
        s2 = float(l11v @ l22v)
        worst["sign_15"].offer(min(s1, s2), wit(y2=y2, mu2=atoms2))

        lam_at_atoms = H.lions_grad(np.broadcast_to(y1, atoms1.shape), atoms1, atoms1)
        lhs = H.eval(y2, atoms2) - H.eval(y1, atoms1)
        rhs = float(g11 @ (y2 - y1)) + float(np.mean(np.sum(lam_at_atoms * (atoms2 - atoms1), axis=1)))
        worst["concavity_16"].offer(rhs - lhs, wit(y2=y2, mu2=atoms2))

        mean_lions = float(np.linalg.norm(lam_at_atoms.mean(axis=0)))
        if H.delta0 is not None:
            worst["strict_38"].offer((1.0 - H.delta0) * gnorm - mean_lions, wit())
        else:
            worst["strict_38"].offer(gnorm - mean_lions, wit())

    entries = {}
    for c in CONDITIONS:
        w = worst[c]
        if c == "lipschitz_14" and L is None:
            entries[c] = ConditionResult(c, "skipped", note="no Lipschitz constant declared")
            continue
        if c == "strict_38" and H.delta0 is None:
            # no margin declared: some delta0 > 0 must exist, so the ratio must stay below 1
            ok = w.margin > tol
            note = "no delta0 declared; tested |E lions| < |grad_y H| strictly"
        else:
            ok = w.margin >= -tol
            note = ""
        entries[c] = ConditionResult(
            c, "pass" if ok else "fail", w.margin, w.witness, note=note
        )
    return AssumptionReport(entries, n_samples, tol, lions_identically_zero=lions_zero)

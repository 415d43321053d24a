"""Uniform empirical measures on R^n and their Wasserstein-2 distances."""

from __future__ import annotations

from collections.abc import Callable, Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import ValidationError

W2_EXACT_MAX_ATOMS = 64


class EmpiricalMeasure:
    """Uniform-weight cloud of ``N`` atoms in R^n.

    Atoms are stored as a read-only ``(N, n)`` float array in input order.
    """

    __slots__ = ("_atoms",)

    def __init__(self, atoms):
        arr = np.array(atoms, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValidationError(f"atoms must form a nonempty (N, n) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("atoms must be finite")
        arr.setflags(write=False)
        self._atoms = arr

    @property
    def atoms(self) -> np.ndarray:
        return self._atoms

    @property
    def size(self) -> int:
        return self._atoms.shape[0]

    @property
    def dim(self) -> int:
        return self._atoms.shape[1]

    def __len__(self) -> int:
        return self.size

    def __iter__(self):
        return iter(self._atoms)

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(N={self.size}, n={self.dim})"


def as_atoms(mu) -> np.ndarray:
    """Return the ``(N, n)`` atom array of a measure or array-like."""
    if isinstance(mu, EmpiricalMeasure):
        return mu.atoms
    arr = np.asarray(mu, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return arr


def empirical_from(points: Iterable) -> EmpiricalMeasure:
    """Build a measure from a sequence of points.

    Scalars are read as one-dimensional points. Mixed dimensions and empty
    input raise ``ValidationError``.
    """
    pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
    if not pts:
        raise ValidationError("cannot build an empirical measure from no points")
    dims = {p.shape for p in pts}
    if len(dims) != 1 or pts[0].ndim != 1:
        raise ValidationError(f"points have mixed dimensions: {sorted(dims)}")
    return EmpiricalMeasure(np.stack(pts))


def mean(mu) -> np.ndarray:
    return as_atoms(mu).mean(axis=0)


def _check_same_size(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValidationError(
            f"W2 between clouds of unequal size ({a.shape[0]} vs {b.shape[0]}) is not supported"
        )
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")


def w2_1d(mu, nu) -> float:
    """W2 between two one-dimensional clouds of equal size (sorted coupling)."""
    a, b = as_atoms(mu), as_atoms(nu)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise ValidationError("w2_1d requires one-dimensional measures")
    _check_same_size(a, b)
    diff = np.sort(a[:, 0]) - np.sort(b[:, 0])
    return float(np.sqrt(np.mean(diff * diff)))


def w2_exact_small(mu, nu) -> float:
    """Exact W2 in any dimension by optimal assignment, for ``N <= 64``."""
    a, b = as_atoms(mu), as_atoms(nu)
    _check_same_size(a, b)
    if a.shape[0] > W2_EXACT_MAX_ATOMS:
        raise ValidationError(
            f"exact W2 is capped at N={W2_EXACT_MAX_ATOMS} atoms (got {a.shape[0]}); "
            "no approximate fallback is provided"
        )
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def w2(mu, nu) -> float:
    """Dispatch to the sorted coupling in 1-d, exact assignment otherwise."""
    a = as_atoms(mu)
    if a.shape[1] == 1:
        return w2_1d(mu, nu)
    return w2_exact_small(mu, nu)


def pushforward(mu, func: Callable[[np.ndarray], np.ndarray]) -> EmpiricalMeasure:
    """Image of ``mu`` under ``func`` applied atom by atom (order preserved)."""
    images = [np.atleast_1d(np.asarray(func(x), dtype=float)) for x in as_atoms(mu)]
    out = np.stack(images)
    if not np.all(np.isfinite(out)):
        raise ValidationError("pushforward map returned a non-finite value")
    return EmpiricalMeasure(out)


def quantile_subsample(atoms_1d: np.ndarray, size: int) -> np.ndarray:
    """Pick ``size`` atoms of a 1-d cloud at mid-point quantile levels."""
    srt = np.sort(np.asarray(atoms_1d, dtype=float).ravel())
    n_ref = srt.shape[0]
    if size > n_ref:
        raise ValidationError(f"cannot subsample {size} atoms from {n_ref}")
    idx = np.floor((np.arange(size) + 0.5) * n_ref / size).astype(int)
    return srt[np.minimum(idx, n_ref - 1)]

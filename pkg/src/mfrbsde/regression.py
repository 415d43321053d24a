"""Ridge least squares for the conditional expectations of the backward scheme."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.preprocessing import PolynomialFeatures
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import RegressionError, ValidationError

_COND_LIMIT = 1e-14
# relative spread below which a feature column is treated as constant
_DEGENERATE_RTOL = 1e-12


@dataclass
class RegressionFit:
    coef: np.ndarray
    fitted: np.ndarray


class LeastSquaresDesign:
    """Factorized ridge normal equations for a fixed design matrix.

    A constant column, if present, acts as an unpenalized intercept: the
    remaining columns are centered and scaled before the ridge term is added,
    so the fitted values always average to the target mean and a
    constant-only design reproduces the cross-sectional mean exactly.
    """

    def __init__(self, features: np.ndarray, ridge: float = 0.0):
        F = np.asarray(features, dtype=float)
        if F.ndim != 2:
            raise ValidationError("features must be an (N, p) matrix")
        N, p = F.shape
        if N < p:
            raise ValidationError(f"need at least as many samples as features (N={N}, p={p})")
        if ridge < 0:
            raise ValidationError("ridge must be nonnegative")
        self.N, self.p, self.ridge = N, p, float(ridge)
        spread = np.ptp(F, axis=0)
        const = np.flatnonzero(spread == 0)
        self.intercept_col = None
        self.const_value = None
        if const.size and np.any(F[0, const] != 0):
            self.intercept_col = int(const[np.flatnonzero(F[0, const] != 0)[0]])
            self.const_value = float(F[0, self.intercept_col])
            live = np.flatnonzero(spread > 0)
            self.mu = F[:, live].mean(axis=0)
            centered = F[:, live] - self.mu
        else:
            live = np.arange(p)
            self.mu = np.zeros(p)
            centered = F
        self.live = live
        if live.size == 0:
            self.scale = np.ones(0)
            self.Fs = np.zeros((N, 0))
            self._cho = None
            return
        scale = np.sqrt(np.mean(centered * centered, axis=0))
        scale[scale == 0] = 1.0
        self.scale = scale
        self.Fs = centered / scale
        G = self.Fs.T @ self.Fs / N
        G[np.diag_indices_from(G)] += self.ridge
        eig = np.linalg.eigvalsh(G)
        if eig[0] <= _COND_LIMIT * max(eig[-1], 1e-300):
            raise RegressionError(
                f"regression design is singular (eigenvalue ratio {eig[0] / max(eig[-1], 1e-300):.2e}); "
                "lower basis_degree or increase ridge"
            )
        self._cho = cho_factor(G)

    def fit(self, targets: np.ndarray) -> RegressionFit:
        Yt = np.asarray(targets, dtype=float)
        squeeze = Yt.ndim == 1
        if squeeze:
            Yt = Yt[:, None]
        if Yt.shape[0] != self.N:
            raise ValidationError("targets and features have different sample counts")
        coef = np.zeros((self.p, Yt.shape[1]))
        if self.intercept_col is not None:
            ybar = Yt.mean(axis=0)
            rhs_y = Yt - ybar
        else:
            ybar = np.zeros(Yt.shape[1])
            rhs_y = Yt
        if self._cho is not None:
            beta = cho_solve(self._cho, self.Fs.T @ rhs_y / self.N)
            fitted = ybar + self.Fs @ beta
            beta_orig = beta / self.scale[:, None]
            coef[self.live] = beta_orig
        else:
            fitted = np.broadcast_to(ybar, Yt.shape).copy()
            beta_orig = np.zeros((0, Yt.shape[1]))
        if self.intercept_col is not None:
            coef[self.intercept_col] = (ybar - self.mu @ beta_orig) / self.const_value
        if squeeze:
            return RegressionFit(coef[:, 0], fitted[:, 0])
        return RegressionFit(coef, fitted)


def regress_conditional(features, targets, ridge: float = 0.0) -> RegressionFit:
    """Ridge-regularized least squares; returns coefficients and fitted values."""
    return LeastSquaresDesign(features, ridge).fit(targets)


class ConditionalExpectationRegressor(RegressorMixin, BaseEstimator):
    """Polynomial least-squares estimate of ``E[target | X]``.

    Inputs are standardized before the monomials are formed. Coordinates
    with no spread across the sample are dropped; if none remain the estimate
    collapses to the sample mean.

    Parameters
    ----------
    degree : int
        Maximal total degree of the monomial basis.
    ridge : float
        Ridge weight on the standardized, non-constant basis columns.
    """

    def __init__(self, degree: int = 3, ridge: float = 1e-8):
        self.degree = degree
        self.ridge = ridge

    def _features(self, X: np.ndarray) -> np.ndarray:
        Z = (X[:, self.live_] - self.center_) / self.spread_
        if Z.shape[1] == 0 or self.degree_ == 0:
            return np.ones((X.shape[0], 1))
        return self.poly_.transform(Z)

    def fit(self, X, y):
        X = check_array(X, ensure_2d=True, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.degree < 0 or int(self.degree) != self.degree:
            raise ValidationError("degree must be a nonnegative integer")
        center = X.mean(axis=0)
        spread = X.std(axis=0)
        live = spread > _DEGENERATE_RTOL * (1.0 + np.abs(center))
        self.n_features_in_ = X.shape[1]
        self.live_ = np.flatnonzero(live)
        self.center_ = center[live]
        self.spread_ = spread[live]
        self.degree_ = int(self.degree) if self.live_.size else 0
        if self.degree_ > 0:
            self.poly_ = PolynomialFeatures(self.degree_, include_bias=True).fit(
                np.zeros((1, self.live_.size))
            )
        features = self._features(X)
        self.design_ = LeastSquaresDesign(features, self.ridge)
        result = self.design_.fit(y)
        self.coef_ = result.coef
        self.fitted_ = result.fitted
        return self

    def project(self, targets) -> np.ndarray:
        """Fitted values for new targets on the training design (no refactorization)."""
        check_is_fitted(self, "design_")
        return self.design_.fit(targets).fitted

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = check_array(X, ensure_2d=True, dtype=float)
        return self._features(X) @ self.coef_

    @property
    def collapsed(self) -> bool:
        """True when the design degenerated to the constant basis."""
        check_is_fitted(self, "degree_")
        return self.degree_ == 0

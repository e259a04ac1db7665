"""Linear comparators: GCV-tuned ridge and lasso, and the random walk with drift.

Both penalized fits carry an unpenalized intercept, obtained by centring
``X`` and ``y`` before solving.

* ridge minimizes ``||y - b0 - X b||^2 + lam ||b||^2``
* lasso minimizes ``(1/2n) ||y - b0 - X b||^2 + lam ||b||_1``
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConvergenceError, ValidationError
from .model import Topology, Weights

GRID_SIZE = 50
GRID_RATIO = 1e-4


class RankDeficiencyError(ValidationError):
    pass


@dataclass
class LinearFit:
    coef: np.ndarray
    intercept: float
    lam: float
    df: float
    method: str
    rss: float = float("nan")
    fit_intercept: bool = True
    n_iter: int = 0
    gcv_grid: np.ndarray | None = field(default=None, repr=False)
    gcv_scores: np.ndarray | None = field(default=None, repr=False)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept

    def to_weights(self) -> Weights:
        """Same JSON layout as the network, with an empty dense block."""
        m = self.coef.shape[0]
        return Weights(Topology(m, 0), np.append(self.coef, self.intercept), np.zeros((0, m + 1)), np.zeros(0))

    def to_json(self) -> str:
        return self.to_weights().to_json(method=self.method, lam=self.lam, df=self.df, alpha=1.0)


def _center(X, y, fit_intercept=True):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise ValidationError(f"bad design: X {X.shape}, y {y.shape}")
    if not fit_intercept:
        return X, y, np.zeros(X.shape[1]), 0.0
    xm, ym = X.mean(axis=0), y.mean()
    return X - xm, y - ym, xm, ym


# ---------------------------------------------------------------------------
# Ridge
# ---------------------------------------------------------------------------

def ridge_fit(X, y, lam: float, fit_intercept: bool = True) -> LinearFit:
    """Closed-form ridge through the SVD of the centred design."""
    if lam < 0:
        raise ValidationError("ridge penalty must be >= 0")
    Xc, yc, xm, ym = _center(X, y, fit_intercept)
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    if lam == 0:
        tol = s.max(initial=0.0) * max(Xc.shape) * np.finfo(float).eps
        if s.shape[0] < Xc.shape[1] or np.any(s <= tol):
            raise RankDeficiencyError("design is rank deficient; least squares (lam = 0) has no unique solution")
    shrink = s / (s * s + lam)
    coef = Vt.T @ (shrink * (U.T @ yc))
    resid = yc - Xc @ coef
    df = float(fit_intercept) + float(np.sum(s * s / (s * s + lam)))
    return LinearFit(coef, float(ym - xm @ coef), float(lam), df, "ridge", float(resid @ resid), fit_intercept)


def ridge_gcv_path(X, y, grid) -> np.ndarray:
    """GCV scores over ``grid`` computed from singular values alone."""
    Xc, yc, _, _ = _center(X, y)
    n = Xc.shape[0]
    U, s, _ = np.linalg.svd(Xc, full_matrices=False)
    z = U.T @ yc
    outside = float(yc @ yc - z @ z)
    s2 = (s * s)[None, :]
    lam = np.asarray(grid, dtype=np.float64)[:, None]
    rss = np.sum((lam / (s2 + lam)) ** 2 * z[None, :] ** 2, axis=1) + outside
    df = 1.0 + np.sum(s2 / (s2 + lam), axis=1)
    return gcv_score(rss, df, n)


def ridge_grid(X) -> np.ndarray:
    Xc = np.asarray(X, dtype=np.float64) - np.mean(X, axis=0)
    smax = np.linalg.norm(Xc, 2)
    top = 10.0 * smax * smax
    if top == 0:
        top = 1.0
    return np.geomspace(top, top * GRID_RATIO, GRID_SIZE)


def hat_matrix(X, lam: float) -> np.ndarray:
    """Explicit ridge hat matrix, intercept included and unpenalized."""
    X = np.asarray(X, dtype=np.float64)
    n, m = X.shape
    Z = np.hstack([np.ones((n, 1)), X])
    P = lam * np.eye(m + 1)
    P[0, 0] = 0.0
    return Z @ np.linalg.solve(Z.T @ Z + P, Z.T)


def loo_shortcut(X, y, lam: float) -> tuple[float, float]:
    """``(leave-one-out MSE, GCV)`` from an explicitly formed hat matrix.

    LOO uses each leverage ``h_ii``; GCV replaces them by their mean.
    """
    H = hat_matrix(X, lam)
    y = np.asarray(y, dtype=np.float64)
    r = y - H @ y
    n = y.shape[0]
    loo = float(np.mean((r / (1.0 - np.diag(H))) ** 2))
    return loo, float(gcv_score(r @ r, np.trace(H), n))


# ---------------------------------------------------------------------------
# Lasso
# ---------------------------------------------------------------------------

def lasso_fit(X, y, lam: float, max_iter: int = 100_000, tol: float = 1e-8, warm=None,
              fit_intercept: bool = True) -> LinearFit:
    """Coordinate-descent lasso; stops when no coefficient moves by ``tol`` in a sweep."""
    if lam < 0:
        raise ValidationError("lasso penalty must be >= 0")
    Xc, yc, xm, ym = _center(X, y, fit_intercept)
    Xc = np.ascontiguousarray(Xc)
    beta = np.zeros(Xc.shape[1]) if warm is None else np.array(warm, dtype=np.float64)
    n_iter, delta = kernels.lasso_cd(Xc, yc, float(lam), beta, int(max_iter), float(tol))
    if delta >= tol:
        raise ConvergenceError(f"lasso did not converge in {max_iter} sweeps (last change {delta:.3g})")
    resid = yc - Xc @ beta
    df = float(fit_intercept) + float(np.count_nonzero(beta))
    return LinearFit(beta, float(ym - xm @ beta), float(lam), df, "lasso", float(resid @ resid), fit_intercept,
                     n_iter)


def lasso_lambda_max(X, y) -> float:
    Xc, yc, _, _ = _center(X, y)
    return float(np.max(np.abs(Xc.T @ yc)) / Xc.shape[0])


def lasso_grid(X, y) -> np.ndarray:
    top = lasso_lambda_max(X, y)
    if top == 0:
        top = 1.0
    return np.geomspace(top, top * GRID_RATIO, GRID_SIZE)


def soft_threshold(z, lam):
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


# ---------------------------------------------------------------------------
# Model selection
# ---------------------------------------------------------------------------

def gcv_score(rss, df, n):
    """``(RSS / n) / (1 - df / n)**2``; infinite once ``df >= n``."""
    rss = np.asarray(rss, dtype=np.float64)
    df = np.asarray(df, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (rss / n) / (1.0 - df / n) ** 2
    return np.where(df < n, out, np.inf)


def gcv_select(X, y, grid=None, method: str = "ridge") -> LinearFit:
    """Fit every grid value and keep the GCV minimizer (ties go to the larger lam)."""
    if method not in ("ridge", "lasso"):
        raise ValidationError(f"unknown method {method!r}")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if grid is None:
        grid = ridge_grid(X) if method == "ridge" else lasso_grid(X, y)
    grid = np.sort(np.asarray(grid, dtype=np.float64).reshape(-1))[::-1]
    if grid.size == 0:
        raise ValidationError("empty lambda grid")
    fits = []
    warm = None
    for lam in grid:
        if method == "ridge":
            fit = ridge_fit(X, y, lam)
        else:
            fit = lasso_fit(X, y, lam, warm=warm)
            warm = fit.coef
        fits.append(fit)
    scores = np.array([gcv_score(f.rss, f.df, n) for f in fits], dtype=np.float64)
    if not np.isfinite(scores).any():
        raise ValidationError("GCV degenerate: df >= n at every grid point")
    best = int(np.argmin(scores))  # first minimum in descending grid = largest lam among ties
    out = fits[best]
    out.gcv_grid, out.gcv_scores = grid, scores
    return out


def rw_drift_forecast(window) -> float:
    """One-step forecast of the random walk with drift: the window mean."""
    window = np.asarray(window, dtype=np.float64).reshape(-1)
    if window.size == 0:
        raise ValidationError("empty window")
    return float(np.mean(window))

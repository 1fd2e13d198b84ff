"""Exact linear estimation: OLS and coordinate-descent LASSO.

The LASSO objective used throughout is

    J(alpha, beta) = 0.5 * sum((y - alpha - X beta)^2) + lam * sum(|beta|)

with the intercept unpenalized. A sum-of-squares convention without the 0.5
factor corresponds to twice this ``lam``; the mapping is stated here once so
reported penalties are unambiguous.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np
from numba import njit

from .features import FeatureMatrix

CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000
RIDGE_JITTER = 1e-10


class RankDeficientError(ValueError):
    """Raised when the design is rank deficient beyond the jitter tolerance."""


class LassoConvergenceError(RuntimeError):
    def __init__(self, sweeps: int, last_change: float):
        self.sweeps = sweeps
        self.last_change = last_change
        super().__init__(
            f"coordinate descent failed to reach a KKT-acceptable point in "
            f"{sweeps} sweeps (last max coefficient change {last_change:.3e})"
        )


@dataclass(frozen=True)
class LinearModel:
    intercept: float
    coef: np.ndarray
    columns: tuple[str, ...]
    sse: float
    n_obs: int
    jitter_used: bool = False
    lam: float | None = None
    sweeps: int | None = None
    tol_reached: bool = True
    objective_trace: np.ndarray | None = None

    def __post_init__(self):
        if len(self.coef) != len(self.columns):
            raise ValueError("coefficient names must match the training columns")
        self.coef.flags.writeable = False


def _centered(matrix: FeatureMatrix):
    xbar = matrix.X.mean(axis=0)
    ybar = matrix.y.mean()
    return matrix.X - xbar, matrix.y - ybar, xbar, ybar


def _dependent_columns(Xc: np.ndarray, columns) -> list[str]:
    _, R = np.linalg.qr(Xc)
    diag = np.abs(np.diag(R))
    tol = diag.max() * 1e-10 if diag.size else 0.0
    return [columns[i] for i in np.flatnonzero(diag <= tol)]


def fit_ols(matrix: FeatureMatrix) -> LinearModel:
    """Least squares via normal equations with an SPD factorization.

    Near-singular systems get a ridge jitter of 1e-10 relative to the mean
    Gram diagonal; jitter use is recorded on the model. Rank deficiency that
    survives the jitter raises :class:`RankDeficientError` naming the
    dependent columns.
    """
    n, k = matrix.X.shape
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} rows for {k} columns, have {n}")
    Xc, yc, xbar, ybar = _centered(matrix)
    G = Xc.T @ Xc
    c = Xc.T @ yc
    jitter_used = False
    L = None
    try:
        L = np.linalg.cholesky(G)
        # a pivot far below its column norm signals numerical dependence even
        # when the factorization happens to complete
        pivot_ratio = np.diag(L) / np.sqrt(np.maximum(np.diag(G), 1e-300))
        if pivot_ratio.min() < 1e-7:
            L = None
    except np.linalg.LinAlgError:
        L = None
    if L is None:
        dep = _dependent_columns(Xc, matrix.columns)
        if dep:
            raise RankDeficientError(
                f"design is rank deficient beyond the jitter tolerance; "
                f"dependent columns: {dep}"
            ) from None
        jitter_used = True
        scale = max(float(np.mean(np.diag(G))), 1.0)
        L = np.linalg.cholesky(G + RIDGE_JITTER * scale * np.eye(k))
    beta = np.linalg.solve(L.T, np.linalg.solve(L, c))
    if jitter_used:
        print("fit_ols: ridge jitter applied to a near-singular system", file=sys.stderr)
    resid = yc - Xc @ beta
    return LinearModel(
        intercept=float(ybar - xbar @ beta), coef=beta, columns=matrix.columns,
        sse=float(resid @ resid), n_obs=n, jitter_used=jitter_used,
    )


def _require_standardized(matrix: FeatureMatrix) -> None:
    if matrix.norm is not None:
        return
    means = matrix.X.mean(axis=0)
    stds = matrix.X.std(axis=0)
    if np.abs(means).max(initial=0.0) > 1e-8 or np.abs(stds - 1.0).max(initial=0.0) > 1e-6:
        raise ValueError(
            "LASSO requires standardized columns; run features.normalize first"
        )


def fit_lasso(matrix: FeatureMatrix, lam: float,
              warm_start: np.ndarray | None = None) -> LinearModel:
    """Cyclic coordinate descent with soft thresholding.

    Iteration stops when the largest coefficient change in a sweep drops
    below 1e-8 or after 10,000 sweeps, whichever comes first; the model
    records which (``sweeps``, ``tol_reached``). Either way the returned
    coefficients must satisfy the KKT conditions of the 0.5-scaled objective
    within 1e-6 of the gradient scale — an iterate that fails them raises
    :class:`LassoConvergenceError` with the sweep count and last change.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    _require_standardized(matrix)
    Xc, yc, xbar, ybar = _centered(matrix)
    n, k = Xc.shape
    G = Xc.T @ Xc
    c = Xc.T @ yc
    d = np.diag(G).copy()
    if (d <= 0).any():
        raise ValueError("degenerate column in LASSO design")
    yty = float(yc @ yc)

    beta = np.zeros(k) if warm_start is None else warm_start.astype(float).copy()
    q = G @ beta
    trace_buf = np.empty(CD_MAX_SWEEPS)
    sweeps, max_change, tol_reached = _cd_sweeps(
        G, c, d, beta, q, float(lam), yty, CD_TOL, CD_MAX_SWEEPS, trace_buf)
    trace = trace_buf[:sweeps]

    # stationarity check on the returned iterate, against the gradient scale
    grad = -(c - G @ beta)
    active = beta != 0
    kkt = np.where(active, np.abs(grad + lam * np.sign(beta)),
                   np.maximum(np.abs(grad) - lam, 0.0))
    scale = max(float(np.abs(c).max(initial=0.0)), 1.0)
    if kkt.max(initial=0.0) > 1e-6 * scale:
        raise LassoConvergenceError(sweeps, max_change)

    resid_sse = yty - 2.0 * beta @ c + beta @ (G @ beta)
    return LinearModel(
        intercept=float(ybar - xbar @ beta), coef=beta, columns=matrix.columns,
        sse=float(resid_sse), n_obs=n, lam=float(lam), sweeps=int(sweeps),
        tol_reached=bool(tol_reached), objective_trace=trace.copy(),
    )


@njit(cache=True)
def _cd_sweeps(G, c, d, beta, q, lam, yty, tol, max_sweeps, trace):
    """Cyclic soft-threshold sweeps on the Gram system, in place."""
    k = beta.shape[0]
    sweeps = 0
    max_change = np.inf
    while sweeps < max_sweeps:
        max_change = 0.0
        for l in range(k):
            b_old = beta[l]
            rho = c[l] - q[l] + d[l] * b_old
            mag = abs(rho) - lam
            if mag > 0.0:
                b_new = mag / d[l] if rho > 0.0 else -mag / d[l]
            else:
                b_new = 0.0
            if b_new != b_old:
                delta = b_new - b_old
                for j in range(k):
                    q[j] += delta * G[j, l]
                beta[l] = b_new
                if abs(delta) > max_change:
                    max_change = abs(delta)
        sse = yty
        l1 = 0.0
        for l in range(k):
            sse += beta[l] * (q[l] - 2.0 * c[l])
            l1 += abs(beta[l])
        trace[sweeps] = 0.5 * sse + lam * l1
        sweeps += 1
        if max_change < tol:
            return sweeps, max_change, True
    return sweeps, max_change, False


def path_warm_start(lam: float, history) -> np.ndarray | None:
    """Warm start for the next grid point on a descending penalty path.

    The solution path is piecewise linear in the penalty, so extrapolating
    from the last two solutions usually lands within a few sweeps of the
    optimum. ``history`` holds (lam, coef) pairs, most recent last.
    """
    if len(history) >= 2:
        lam1, b1 = history[-1]
        lam2, b2 = history[-2]
        if lam1 != lam2:
            t = (lam - lam1) / (lam1 - lam2)
            return b1 + (b1 - b2) * t
    if history:
        return history[-1][1]
    return None


def lasso_objective(matrix: FeatureMatrix, model: LinearModel) -> float:
    """0.5 * SSE + lam * L1, evaluated on the matrix rows."""
    resid = matrix.y - model.intercept - matrix.X @ model.coef
    return 0.5 * float(resid @ resid) + float(model.lam) * float(np.abs(model.coef).sum())


def kkt_residuals(matrix: FeatureMatrix, model: LinearModel) -> np.ndarray:
    """Per-coordinate KKT violation of the 0.5-scaled LASSO objective.

    For active coordinates the stationarity residual |grad_l + lam*sign| and
    for zero coordinates the excess max(|grad_l| - lam, 0), where grad_l is
    the gradient of 0.5*SSE.
    """
    resid = matrix.y - model.intercept - matrix.X @ model.coef
    grad = -(matrix.X.T @ resid)
    lam = float(model.lam)
    out = np.empty(len(grad))
    active = model.coef != 0
    out[active] = np.abs(grad[active] + lam * np.sign(model.coef[active]))
    out[~active] = np.maximum(np.abs(grad[~active]) - lam, 0.0)
    return out


def lasso_lambda_max(matrix: FeatureMatrix) -> float:
    """Smallest penalty shrinking every coefficient to zero: max |X_l'(y - ybar)|."""
    Xc, yc, _, _ = _centered(matrix)
    return float(np.abs(Xc.T @ yc).max())


@dataclass(frozen=True)
class LassoPath:
    lambdas: np.ndarray            # descending
    models: tuple[LinearModel, ...]
    cv_mse: np.ndarray             # mean validation MSE per lambda
    selected_lambda: float

    @property
    def selected_model(self) -> LinearModel:
        idx = int(np.argmin(np.abs(self.lambdas - self.selected_lambda)))
        return self.models[idx]

    def nonzero_counts(self) -> np.ndarray:
        return np.array([int((m.coef != 0).sum()) for m in self.models])


def lambda_grid(lam_max: float, size: int = 50, ratio: float = 1e-4) -> np.ndarray:
    if lam_max <= 0:
        raise ValueError("lambda_max must be positive")
    return np.geomspace(lam_max, ratio * lam_max, size)


def _fold_bounds(n: int, folds: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n, folds + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(folds)]


def select_lasso_lambda(matrix: FeatureMatrix, folds: int = 5,
                        shuffle: bool = False, shuffle_seed: int = 0,
                        grid_size: int = 50) -> LassoPath:
    """Validation-driven penalty selection over a 50-point log-spaced grid.

    Folds are contiguous in row order by default, respecting serial
    dependence; ``shuffle=True`` restores conventional shuffled folds. The
    selected lambda minimizes mean out-of-fold MSE; the returned path holds
    models refitted on all rows at every grid point.
    """
    n = matrix.n_rows
    if n < folds * 20:
        raise ValueError(f"need at least {folds * 20} rows for {folds}-fold selection")
    _require_standardized(matrix)
    grid = lambda_grid(lasso_lambda_max(matrix), size=grid_size)

    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    fold_mse = np.zeros((folds, grid_size))
    for fi, (lo, hi) in enumerate(_fold_bounds(n, folds)):
        valid_rows = order[lo:hi]
        train_rows = np.concatenate([order[:lo], order[hi:]])
        sub = matrix.subset(train_rows)
        hold = matrix.subset(valid_rows)
        history = []
        for gi, lam in enumerate(grid):
            model = fit_lasso(sub, lam, warm_start=path_warm_start(lam, history))
            history.append((lam, model.coef))
            pred = model.intercept + hold.X @ model.coef
            fold_mse[fi, gi] = float(np.mean((hold.y - pred) ** 2))

    cv = fold_mse.mean(axis=0)
    selected = float(grid[int(np.argmin(cv))])

    models = []
    history = []
    for lam in grid:
        model = fit_lasso(matrix, lam, warm_start=path_warm_start(lam, history))
        history.append((lam, model.coef))
        models.append(model)
    return LassoPath(lambdas=grid, models=tuple(models), cv_mse=cv, selected_lambda=selected)


def predict_linear(model: LinearModel, matrix: FeatureMatrix) -> np.ndarray:
    """alpha + X beta, with strict column-name alignment."""
    if matrix.columns != model.columns:
        missing = set(model.columns) - set(matrix.columns)
        extra = set(matrix.columns) - set(model.columns)
        detail = []
        if missing:
            detail.append(f"missing {sorted(missing)}")
        if extra:
            detail.append(f"unexpected {sorted(extra)}")
        if not detail:
            detail.append("same names, different order")
        raise ValueError("column mismatch: " + "; ".join(detail))
    return model.intercept + matrix.X @ model.coef

"""Commonality measurement, model interpretability, and factor regressions.

Commonality is the adjusted R-squared of regressing a stock's RV on the
contemporaneous market RV, grouped by calendar month or by half-hour of the
session. Sensitivity profiles aggregate absolute partial derivatives of a
fitted model over its training rows; interaction profiles trace the fitted
surface along one predictor while pinning a second at quantile values and
everything else at its mean.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix
from .linmodels import LinearModel
from .mlmodels import EnsembleModel, GBTModel, LSTMModel, MLPModel, predict
from .mlmodels.gbt import predict_gbt_raw
from .mlmodels.lstm import lstm_input_gradients, sequence_from_matrix
from .mlmodels.mlp import mlp_input_gradients
from .rvcore import RVSeries, market_rv
from .session import fmt, half_hour_label

MIN_GROUP_OBS = 10


# ---------------------------------------------------------------------------
# commonality

@dataclass(frozen=True)
class CommonalityCell:
    ticker: str
    group: str
    adj_r2: float
    n_obs: int


@dataclass(frozen=True)
class CommonalityReport:
    grouping: str                       # 'monthly' | 'half-hour'
    horizon: int
    cells: tuple[CommonalityCell, ...]
    skipped: tuple[tuple[str, str, int], ...]   # (ticker, group, n_obs)
    lead_lag: bool = False

    def groups(self) -> list[str]:
        seen = []
        for c in self.cells:
            if c.group not in seen:
                seen.append(c.group)
        return seen

    def group_mean_std(self) -> dict[str, tuple[float, float]]:
        out = {}
        for g in self.groups():
            vals = np.array([c.adj_r2 for c in self.cells if c.group == g])
            out[g] = (float(vals.mean()), float(vals.std()))
        return out

    def mean_adj_r2(self) -> float:
        return float(np.mean([c.adj_r2 for c in self.cells]))

    def monthly_average_series(self) -> tuple[list[str], np.ndarray]:
        groups = self.groups()
        return groups, np.array([self.group_mean_std()[g][0] for g in groups])

    def _note(self) -> str:
        if self.lead_lag:
            return ("# regressors include the lag-1 and lead-1 market RV; "
                    "the lead-1 term is non-causal\n")
        return ""

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self._note())
            fh.write("group,ticker,value\n")
            for c in self.cells:
                fh.write(f"{c.group},{c.ticker},{fmt(c.adj_r2)}\n")

    def write_summary(self, path) -> None:
        stats = self.group_mean_std()
        with open(path, "w") as fh:
            fh.write(self._note())
            fh.write("group,mean_adj_r2,std_adj_r2,n_tickers\n")
            for g in self.groups():
                n = sum(1 for c in self.cells if c.group == g)
                fh.write(f"{g},{fmt(stats[g][0])},{fmt(stats[g][1])},{n}\n")


def _adjusted_r2(y: np.ndarray, X: np.ndarray) -> float:
    """Adjusted R^2 of y on [1, X]; X is (n, k)."""
    n, k = X.shape
    design = np.column_stack([np.ones(n), X])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        return float("nan")
    r2 = 1.0 - float(resid @ resid) / sst
    return 1.0 - (1.0 - r2) * (n - 1) / (n - 1 - k)


def commonality(rvs: dict[str, RVSeries], market: RVSeries | None, horizon: int,
                grouping: str = "monthly", include_self: bool = True,
                lead_lag: bool = False, min_obs: int = MIN_GROUP_OBS) -> CommonalityReport:
    """Per (ticker, group) adjusted R-squared of RV_i on the market RV.

    ``include_self=False`` recomputes a leave-one-out market average per
    ticker (the pooled average inflates R-squared for small cross-sections).
    ``lead_lag=True`` adds the lag-one and lead-one market RV as regressors;
    the lead term is non-causal and flagged in reports. Groups with fewer
    than ``min_obs`` observations are skipped and recorded.
    """
    if grouping not in ("monthly", "half-hour"):
        raise ValueError("grouping must be 'monthly' or 'half-hour'")
    if grouping == "half-hour" and horizon >= 390:
        raise ValueError("half-hour grouping needs an intraday horizon")
    if market is None and include_self:
        raise ValueError("need a market series (or include_self=False)")

    cells = []
    skipped = []
    for ticker in sorted(rvs):
        series = rvs[ticker]
        if include_self:
            mkt = market
        else:
            others = {t: s for t, s in rvs.items() if t != ticker}
            if len(others) < 2:
                raise ValueError("leave-one-out market needs >= 3 tickers")
            mkt = market_rv(others)
        # align by timestamp
        common, ia, ib = np.intersect1d(series.times, mkt.times,
                                        return_indices=True)
        y_all = series.values[ia]
        m_all = mkt.values[ib]
        cols = [m_all]
        valid_from, valid_to = 0, len(common)
        if lead_lag:
            lag = np.roll(m_all, 1)
            lead = np.roll(m_all, -1)
            cols = [m_all, lag, lead]
            valid_from, valid_to = 1, len(common) - 1
        X_all = np.column_stack(cols)[valid_from:valid_to]
        y_all = y_all[valid_from:valid_to]
        times = common[valid_from:valid_to]

        if grouping == "monthly":
            keys = times.astype("datetime64[M]").astype(str)
        else:
            days = times.astype("datetime64[D]")
            minutes = (times - days).astype("timedelta64[m]").astype(int)
            keys = np.array([half_hour_label(m) for m in minutes])

        for g in _ordered_unique(keys):
            sel = keys == g
            n = int(sel.sum())
            if n < min_obs:
                skipped.append((ticker, g, n))
                continue
            cells.append(CommonalityCell(ticker=ticker, group=g,
                                         adj_r2=_adjusted_r2(y_all[sel], X_all[sel]),
                                         n_obs=n))
    return CommonalityReport(grouping=grouping, horizon=horizon,
                             cells=tuple(cells), skipped=tuple(skipped),
                             lead_lag=lead_lag)


def _ordered_unique(keys) -> list[str]:
    seen = []
    for k in keys:
        if k not in seen:
            seen.append(str(k))
    return seen


# ---------------------------------------------------------------------------
# sensitivity

@dataclass(frozen=True)
class SensitivityProfile:
    columns: tuple[str, ...]
    values: np.ndarray            # normalized to sum to 1

    def top(self, k: int = 10) -> list[tuple[str, float]]:
        order = np.argsort(self.values)[::-1][:k]
        return [(self.columns[i], float(self.values[i])) for i in order]

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("feature,sensitivity\n")
            for c, v in zip(self.columns, self.values):
                fh.write(f"{c},{fmt(v)}\n")


def _input_gradients(model, matrix: FeatureMatrix) -> np.ndarray:
    """Per-row d prediction / d feature for any supported model."""
    if isinstance(model, EnsembleModel):
        grads = np.stack([_input_gradients(m, matrix) for m in model.members])
        return grads.mean(axis=0)
    if isinstance(model, LinearModel):
        return np.broadcast_to(model.coef, matrix.X.shape).copy()
    if isinstance(model, MLPModel):
        return mlp_input_gradients(model, matrix.X)
    if isinstance(model, LSTMModel):
        seq_grads = lstm_input_gradients(model, sequence_from_matrix(matrix))
        return _sequence_grads_to_columns(matrix, seq_grads)
    if isinstance(model, GBTModel):
        return _gbt_finite_differences(model, matrix)
    raise TypeError(f"cannot differentiate {type(model).__name__}")


def _sequence_grads_to_columns(matrix: FeatureMatrix, seq_grads: np.ndarray) -> np.ndarray:
    n, T, d = seq_grads.shape
    out = np.zeros((n, matrix.n_columns))
    for step in range(T):
        lag = T - step
        out[:, matrix.column_index(f"rv_lag_{lag}")] = seq_grads[:, step, 0]
        if d == 2:
            out[:, matrix.column_index(f"mkt_lag_{lag}")] = seq_grads[:, step, 1]
    return out


def _gbt_finite_differences(model: GBTModel, matrix: FeatureMatrix,
                            rel_step: float = 0.1) -> np.ndarray:
    """Central differences with step 0.1 of each column's std; trees are
    piecewise constant so true derivatives are useless."""
    X = matrix.X
    steps = rel_step * X.std(axis=0)
    steps[steps == 0.0] = rel_step
    out = np.empty_like(X)
    for k in range(X.shape[1]):
        Xp = X.copy()
        Xp[:, k] = X[:, k] + steps[k]
        up = predict_gbt_raw(model, Xp)
        Xp[:, k] = X[:, k] - steps[k]
        dn = predict_gbt_raw(model, Xp)
        out[:, k] = (up - dn) / (2.0 * steps[k])
    return out


def sensitivity(model, matrix: FeatureMatrix) -> SensitivityProfile:
    """Summed absolute partial derivatives per predictor, normalized to 1."""
    grads = _input_gradients(model, matrix)
    totals = np.abs(grads).sum(axis=0)
    total = totals.sum()
    if total == 0.0:
        print("sensitivity: all gradients are zero; returning a uniform profile",
              file=sys.stderr)
        totals = np.ones_like(totals)
        total = totals.sum()
    return SensitivityProfile(columns=matrix.columns, values=totals / total)


# ---------------------------------------------------------------------------
# interaction profiles

@dataclass(frozen=True)
class InteractionProfile:
    feature_j: str                  # swept predictor
    feature_i: str                  # conditioned predictor
    quantiles: tuple[float, ...]
    quantile_values: np.ndarray
    grid: np.ndarray                # (n_grid,) values of feature_j
    curves: np.ndarray              # (n_quantiles, n_grid) fitted responses

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"quantile,{self.feature_j},prediction\n")
            for qi, q in enumerate(self.quantiles):
                for g, v in zip(self.grid, self.curves[qi]):
                    fh.write(f"{fmt(q)},{fmt(g)},{fmt(v)}\n")

    def gap_spread(self) -> float:
        """Max variation of inter-curve gaps across the grid (0 for linear)."""
        gaps = np.diff(self.curves, axis=0)
        return float((gaps.max(axis=1) - gaps.min(axis=1)).max())


def _evaluate_surface(model, X: np.ndarray, template: FeatureMatrix) -> np.ndarray:
    if callable(model) and not isinstance(model, (LinearModel, GBTModel, MLPModel,
                                                  LSTMModel, EnsembleModel)):
        return np.asarray(model(X), dtype=float)
    n = X.shape[0]
    stamp = np.repeat(np.datetime64("2000-01-03T16:00", "m"), n)
    probe = FeatureMatrix(
        columns=template.columns, X=X, y=np.zeros(n),
        tickers=np.full(n, "_probe_"), times=stamp,
        target_starts=stamp, source_ends=stamp - np.timedelta64(1, "m"),
    )
    return predict(model, probe)


def interaction_profile(model, matrix: FeatureMatrix, feature_j: str, feature_i: str,
                        quantiles=(0.1, 0.25, 0.5, 0.75, 0.9),
                        n_grid: int = 50) -> InteractionProfile:
    """Fitted response along feature_j at quantile pins of feature_i.

    All other predictors sit at their column means; the grid spans feature_j's
    empirical 1%..99% range. ``model`` may be any fitted model or a plain
    callable on raw feature arrays.
    """
    ji = matrix.column_index(feature_j)
    ii = matrix.column_index(feature_i)
    lo, hi = np.quantile(matrix.X[:, ji], [0.01, 0.99])
    grid = np.linspace(lo, hi, n_grid)
    qvals = np.quantile(matrix.X[:, ii], quantiles)
    base = matrix.X.mean(axis=0)

    curves = np.empty((len(quantiles), n_grid))
    for qi, qv in enumerate(qvals):
        X = np.tile(base, (n_grid, 1))
        X[:, ji] = grid
        X[:, ii] = qv
        curves[qi] = _evaluate_surface(model, X, matrix)
    return InteractionProfile(feature_j=feature_j, feature_i=feature_i,
                              quantiles=tuple(quantiles), quantile_values=qvals,
                              grid=grid, curves=curves)


# ---------------------------------------------------------------------------
# time-of-day coefficients

_INTRA_COL = re.compile(r"^intra_(\d{2})(\d{2})_(\d{2})(\d{2})$")


def time_of_day_coefficients(model: LinearModel) -> list[tuple[str, float]]:
    """Intraday-block coefficients of an intraday-to-daily linear model,
    ordered by time of day and labeled like '09:30-10:00'."""
    entries = []
    for name, coef in zip(model.columns, model.coef):
        m = _INTRA_COL.match(name)
        if m:
            h1, m1, h2, m2 = m.groups()
            entries.append((f"{h1}:{m1}-{h2}:{m2}", float(coef)))
    if not entries:
        raise ValueError("model has no intraday feature block (intra_* columns)")
    return entries


def write_coefficients_csv(entries, path) -> None:
    with open(path, "w") as fh:
        fh.write("bucket,coefficient\n")
        for label, coef in entries:
            fh.write(f"{label},{fmt(coef)}\n")


# ---------------------------------------------------------------------------
# sentiment regression

@dataclass(frozen=True)
class SentimentReport:
    factor_names: tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    intercept: float
    intercept_se: float
    adj_r2: float
    n_obs: int

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("term,coefficient,std_error\n")
            fh.write(f"const,{fmt(self.intercept)},{fmt(self.intercept_se)}\n")
            for name, c, s in zip(self.factor_names, self.coefficients, self.std_errors):
                fh.write(f"{name},{fmt(c)},{fmt(s)}\n")
            fh.write(f"adj_r2,{fmt(self.adj_r2)},\n")


def sentiment_regression(r2_series: np.ndarray, factors: dict[str, np.ndarray],
                         clamp: float = 1e-6) -> SentimentReport:
    """Regress the logistic transform of monthly commonality on factor series.

    The dependent variable is log(R2/(1-R2)) of the cross-stock average
    monthly R-squared; factor series are standardized to zero mean and unit
    variance before the regression so their slopes are comparable. R-squared
    values at exactly 0 or 1 are clamped into (0, 1) with a warning.
    """
    r2 = np.asarray(r2_series, dtype=float)
    if ((r2 <= 0.0) | (r2 >= 1.0)).any():
        print(f"sentiment_regression: clamping R^2 values into [{clamp}, {1-clamp}]",
              file=sys.stderr)
        r2 = np.clip(r2, clamp, 1.0 - clamp)
    y = np.log(r2 / (1.0 - r2))

    names = tuple(factors)
    cols = []
    for name in names:
        f = np.asarray(factors[name], dtype=float)
        if len(f) != len(y):
            raise ValueError(f"factor {name!r} is not aligned with the R^2 series")
        std = f.std()
        if std < 1e-12:
            raise ValueError(f"factor {name!r} is constant")
        cols.append((f - f.mean()) / std)
    X = np.column_stack(cols) if cols else np.empty((len(y), 0))
    n, k = X.shape
    if n < k + 2:
        raise ValueError(f"need at least {k + 2} months, have {n}")

    design = np.column_stack([np.ones(n), X])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    sse = float(resid @ resid)
    dof = n - k - 1
    sigma2 = sse / dof if dof > 0 else float("nan")
    cov = sigma2 * np.linalg.inv(design.T @ design)
    ses = np.sqrt(np.diag(cov))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        adj = 0.0 if sse == 0.0 else float("nan")
    else:
        r2_fit = 1.0 - sse / sst
        adj = 1.0 - (1.0 - r2_fit) * (n - 1) / dof
    return SentimentReport(factor_names=names, coefficients=beta[1:],
                           std_errors=ses[1:], intercept=float(beta[0]),
                           intercept_se=float(ses[0]), adj_r2=float(adj), n_obs=n)

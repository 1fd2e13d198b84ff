"""Model-ready feature matrices for every model family and training scheme.

Rows are keyed (ticker, target timestamp); predictors use information that
ends strictly before the first minute of the target interval, and the
construction records per-row source/target timestamps so the no-look-ahead
invariant is assertable. Rows whose lag window hits a series gap are dropped
(history must be complete).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from .rvcore import DailyAuxiliaries, RVSeries, rv_grid
from .session import (SESSION_MINUTES, bucket_end_times, bucket_label,
                      buckets_per_day, fmt)

DEGENERATE_STD = 1e-12
ONE_MINUTE = np.timedelta64(1, "m")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SchemeSpec:
    """Training scheme: per-stock, pooled, or pooled plus market features."""

    variant: str                 # 'single' | 'universal' | 'augmented'
    ticker: str | None = None

    def __post_init__(self):
        if self.variant not in ("single", "universal", "augmented"):
            raise ValueError(f"unknown scheme variant {self.variant!r}")
        if self.variant == "single" and not self.ticker:
            raise ValueError("single scheme needs a ticker")
        if self.variant != "single" and self.ticker is not None:
            raise ValueError(f"{self.variant} scheme does not take a ticker")

    @property
    def with_market(self) -> bool:
        return self.variant == "augmented"


@dataclass(frozen=True)
class Normalization:
    """Per-column training moments; population (n-denominator) std."""

    columns: tuple[str, ...]
    means: np.ndarray
    stds: np.ndarray
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        for arr in (self.means, self.stds):
            _freeze(arr)


@dataclass(frozen=True)
class FeatureMatrix:
    columns: tuple[str, ...]
    X: np.ndarray                # (n, p)
    y: np.ndarray                # (n,) target log RV
    tickers: np.ndarray          # (n,) str
    times: np.ndarray            # (n,) datetime64[m], target-interval end
    target_starts: np.ndarray    # (n,) datetime64[m], first minute of target
    source_ends: np.ndarray      # (n,) datetime64[m], latest predictor source
    norm: Normalization | None = None

    def __post_init__(self):
        n = self.X.shape[0]
        if self.X.shape != (n, len(self.columns)):
            raise ValueError("X shape does not match columns")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        for arr in (self.y, self.tickers, self.times, self.target_starts, self.source_ends):
            if len(arr) != n:
                raise ValueError("row metadata length mismatch")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("feature matrix contains non-finite entries")
        for arr in (self.X, self.y, self.tickers, self.times,
                    self.target_starts, self.source_ends):
            _freeze(arr)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"no column {name!r}") from None

    def days(self) -> np.ndarray:
        """Target day of each row."""
        return self.times.astype("datetime64[D]")

    def subset(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(
            columns=self.columns, X=self.X[rows], y=self.y[rows],
            tickers=self.tickers[rows], times=self.times[rows],
            target_starts=self.target_starts[rows], source_ends=self.source_ends[rows],
            norm=self.norm,
        )

    def select_columns(self, names) -> "FeatureMatrix":
        idx = [self.column_index(n) for n in names]
        norm = self.norm
        if norm is not None:
            norm = Normalization(columns=tuple(names), means=norm.means[idx].copy(),
                                 stds=norm.stds[idx].copy(), dropped=norm.dropped)
        return FeatureMatrix(
            columns=tuple(names), X=self.X[:, idx], y=self.y,
            tickers=self.tickers, times=self.times,
            target_starts=self.target_starts, source_ends=self.source_ends, norm=norm,
        )

    def assert_no_lookahead(self) -> None:
        if self.n_rows and not (self.source_ends < self.target_starts).all():
            bad = int(np.argmax(~(self.source_ends < self.target_starts)))
            raise AssertionError(
                f"row {bad}: predictor source {self.source_ends[bad]} does not "
                f"precede target start {self.target_starts[bad]}"
            )


def _concat(parts: list[FeatureMatrix]) -> FeatureMatrix:
    if not parts:
        raise ValueError("no rows survive history filtering")
    first = parts[0]
    return FeatureMatrix(
        columns=first.columns,
        X=np.concatenate([p.X for p in parts]),
        y=np.concatenate([p.y for p in parts]),
        tickers=np.concatenate([p.tickers for p in parts]),
        times=np.concatenate([p.times for p in parts]),
        target_starts=np.concatenate([p.target_starts for p in parts]),
        source_ends=np.concatenate([p.source_ends for p in parts]),
    )


def _scheme_tickers(rvs: dict[str, RVSeries], scheme: SchemeSpec) -> list[str]:
    if scheme.variant == "single":
        if scheme.ticker not in rvs:
            raise KeyError(f"ticker {scheme.ticker!r} not in panel")
        return [scheme.ticker]
    return sorted(rvs)


def _rows_from_grid(columns, ticker, grid_times_flat, horizon, target_idx, X, y):
    """Assemble one ticker's rows; target_idx indexes the flattened grid."""
    if len(target_idx) == 0:
        return None
    times = grid_times_flat[target_idx]
    return FeatureMatrix(
        columns=tuple(columns), X=X, y=y,
        tickers=np.full(len(target_idx), ticker),
        times=times,
        target_starts=times - np.timedelta64(horizon - 1, "m"),
        source_ends=grid_times_flat[target_idx - 1],
    )


def build_lag_features(rvs: dict[str, RVSeries], market: RVSeries | None,
                       calendar: np.ndarray, horizon: int, scheme: SchemeSpec,
                       lookback_days: int = 21) -> FeatureMatrix:
    """Lagged-RV predictors: lookback_days * (390/h) own lags, and under the
    augmented scheme the same number of market-RV lags, time-aligned.

    The target is the next bucket's log RV; lag j is the log RV j buckets
    before the target. Rows with any gap in the window are dropped.
    """
    nb = buckets_per_day(horizon)
    p = lookback_days * nb
    columns = [f"rv_lag_{j}" for j in range(1, p + 1)]
    if scheme.with_market:
        if market is None:
            raise ValueError("augmented scheme needs a market series")
        columns += [f"mkt_lag_{j}" for j in range(1, p + 1)]

    grid_times = bucket_end_times(calendar, horizon).reshape(-1)
    mkt_flat = None
    if scheme.with_market:
        mkt_flat = rv_grid(market, calendar)[0].reshape(-1)

    parts = []
    for ticker in _scheme_tickers(rvs, scheme):
        flat = rv_grid(rvs[ticker], calendar)[0].reshape(-1)
        n = len(flat)
        cand = np.arange(p, n)
        window = cand[:, None] - np.arange(1, p + 1)[None, :]
        X = flat[window]
        ok = np.isfinite(flat[cand]) & np.isfinite(X).all(axis=1)
        if scheme.with_market:
            Xm = mkt_flat[window]
            ok &= np.isfinite(Xm).all(axis=1)
            X = np.hstack([X, Xm])
        target_idx = cand[ok]
        part = _rows_from_grid(columns, ticker, grid_times, horizon,
                               target_idx, X[ok], flat[target_idx])
        if part is not None:
            parts.append(part)
    return _concat(parts)


_HAR_COLS = ("rv_d", "rv_w", "rv_m")
_MKT_HAR_COLS = ("mkt_rv_d", "mkt_rv_w", "mkt_rv_m")


def _daily_aggregate_grid(daily_flat: np.ndarray) -> np.ndarray:
    """(n_days, 3) array of [lag-1, mean of lags 1-5, mean of lags 1-21].

    Row d holds aggregates over days d-1 ... d-21; NaN when any needed day is
    missing from the series.
    """
    n = len(daily_flat)
    out = np.full((n, 3), np.nan)
    for d in range(21, n):
        win = daily_flat[d - 21:d]
        if np.isfinite(win).all():
            out[d, 0] = win[-1]
            out[d, 1] = win[-5:].mean()
            out[d, 2] = win.mean()
    return out


def build_har_features(daily_rv: dict[str, RVSeries], intraday_rv: dict[str, RVSeries] | None,
                       market_daily: RVSeries | None,
                       calendar: np.ndarray, horizon: int, scheme: SchemeSpec,
                       with_diurnal: bool = True, lookback_days: int = 21) -> FeatureMatrix:
    """Heterogeneous-autoregressive features at any horizon.

    Columns are [diurnal, rv_d, rv_w, rv_m] at intraday horizons (the diurnal
    column is the 21-day mean log RV of the target's time-of-day bucket) and
    exactly [rv_d, rv_w, rv_m] at the daily horizon. Daily/weekly/monthly
    aggregates come from the daily series of the most recent 1/5/21 full days
    before the target's day. The augmented scheme appends the market's three
    aggregates.
    """
    nb = buckets_per_day(horizon)
    intraday = horizon < SESSION_MINUTES
    use_diurnal = with_diurnal and intraday
    if intraday and intraday_rv is None:
        raise ValueError("intraday horizons need the intraday RV panel")

    columns = (["diurnal"] if use_diurnal else []) + list(_HAR_COLS)
    if scheme.with_market:
        if market_daily is None:
            raise ValueError("augmented scheme needs the market daily series")
        columns += list(_MKT_HAR_COLS)
        mkt_agg = _daily_aggregate_grid(rv_grid(market_daily, calendar)[0].reshape(-1))

    n_days = len(calendar)
    grid_times = bucket_end_times(calendar, horizon).reshape(-1)
    day_close = bucket_end_times(calendar, SESSION_MINUTES).reshape(-1)  # 16:00 stamps

    parts = []
    for ticker in _scheme_tickers(daily_rv, scheme):
        daily_flat = rv_grid(daily_rv[ticker], calendar)[0].reshape(-1)
        agg = _daily_aggregate_grid(daily_flat)

        if intraday:
            tgrid = rv_grid(intraday_rv[ticker], calendar)[0]   # (n_days, nb)
            target = tgrid.reshape(-1)
        else:
            target = daily_flat

        day_of = np.repeat(np.arange(n_days), nb)
        blocks = [agg[day_of]]
        if use_diurnal:
            diurnal = np.full((n_days, nb), np.nan)
            for d in range(lookback_days, n_days):
                win = tgrid[d - lookback_days:d]
                ok = np.isfinite(win).all(axis=0)
                diurnal[d, ok] = win[:, ok].mean(axis=0)
            blocks.insert(0, diurnal.reshape(-1)[:, None])
        if scheme.with_market:
            blocks.append(mkt_agg[day_of])

        X = np.hstack(blocks)
        cand = np.flatnonzero(np.isfinite(target) & np.isfinite(X).all(axis=1) & (day_of >= 1))
        if len(cand) == 0:
            continue
        # latest source: the previous day's close (aggregates and diurnal use
        # full days strictly before the target's day)
        src = day_close[day_of[cand] - 1]
        parts.append(FeatureMatrix(
            columns=tuple(columns), X=X[cand], y=target[cand],
            tickers=np.full(len(cand), ticker),
            times=grid_times[cand],
            target_starts=grid_times[cand] - np.timedelta64(horizon - 1, "m"),
            source_ends=src,
        ))
    return _concat(parts)


def _daily_model_rows(tickers, calendar, target_map, block_map, columns) -> FeatureMatrix:
    """Shared assembly for daily-horizon layouts (SHAR, HARQ, Intraday2Daily)."""
    n_days = len(calendar)
    day_close = bucket_end_times(calendar, SESSION_MINUTES).reshape(-1)
    parts = []
    for ticker in tickers:
        target = target_map[ticker]
        X = block_map[ticker]
        cand = np.flatnonzero(np.isfinite(target) & np.isfinite(X).all(axis=1))
        if len(cand) == 0:
            continue
        parts.append(FeatureMatrix(
            columns=tuple(columns), X=X[cand], y=target[cand],
            tickers=np.full(len(cand), ticker),
            times=day_close[cand],
            target_starts=calendar[cand].astype("datetime64[m]")
            + np.timedelta64(9 * 60 + 31, "m"),
            source_ends=day_close[cand - 1],
        ))
    return _concat(parts)


def build_shar_features(daily_rv: dict[str, RVSeries], aux: DailyAuxiliaries,
                        market_daily: RVSeries | None, calendar: np.ndarray,
                        scheme: SchemeSpec) -> FeatureMatrix:
    """Semivariance layout: [semi_rv_pos, semi_rv_neg, rv_w, rv_m] of the lag
    day, predicting the next day's log RV (+ market aggregates if augmented).
    """
    columns = ["semi_rv_pos", "semi_rv_neg", "rv_w", "rv_m"]
    if scheme.with_market:
        if market_daily is None:
            raise ValueError("augmented scheme needs the market daily series")
        columns += list(_MKT_HAR_COLS)
        mkt_agg = _daily_aggregate_grid(rv_grid(market_daily, calendar)[0].reshape(-1))

    tickers = _scheme_tickers(daily_rv, scheme)
    targets, blocks = {}, {}
    for ticker in tickers:
        ti = aux.tickers.index(ticker)
        daily_flat = rv_grid(daily_rv[ticker], calendar)[0].reshape(-1)
        agg = _daily_aggregate_grid(daily_flat)
        lag = np.full(len(calendar), np.nan)
        lag_pos = np.full(len(calendar), np.nan)
        lag_neg = np.full(len(calendar), np.nan)
        lag_pos[1:] = aux.semi_pos[ti][:-1]
        lag_neg[1:] = aux.semi_neg[ti][:-1]
        cols = [lag_pos[:, None], lag_neg[:, None], agg[:, 1:]]
        if scheme.with_market:
            cols.append(mkt_agg)
        blocks[ticker] = np.hstack(cols)
        targets[ticker] = daily_flat
    return _daily_model_rows(tickers, calendar, targets, blocks, columns)


def build_harq_features(daily_rv: dict[str, RVSeries], aux: DailyAuxiliaries,
                        market_daily: RVSeries | None, calendar: np.ndarray,
                        scheme: SchemeSpec) -> FeatureMatrix:
    """Quarticity-corrected layout: [rv_d, rq_x_rv_d, rv_w, rv_m].

    The interaction column is sqrt(RQ) (raw scale) times the lag-day log RV,
    letting the fitted slope on rv_d bend with measurement-error size.
    """
    columns = ["rv_d", "rq_x_rv_d", "rv_w", "rv_m"]
    if scheme.with_market:
        if market_daily is None:
            raise ValueError("augmented scheme needs the market daily series")
        columns += list(_MKT_HAR_COLS)
        mkt_agg = _daily_aggregate_grid(rv_grid(market_daily, calendar)[0].reshape(-1))

    tickers = _scheme_tickers(daily_rv, scheme)
    targets, blocks = {}, {}
    for ticker in tickers:
        ti = aux.tickers.index(ticker)
        daily_flat = rv_grid(daily_rv[ticker], calendar)[0].reshape(-1)
        agg = _daily_aggregate_grid(daily_flat)
        rq_lag = np.full(len(calendar), np.nan)
        rq_lag[1:] = aux.quarticity[ti][:-1]
        interact = np.sqrt(rq_lag) * agg[:, 0]
        cols = [agg[:, 0:1], interact[:, None], agg[:, 1:]]
        if scheme.with_market:
            cols.append(mkt_agg)
        blocks[ticker] = np.hstack(cols)
        targets[ticker] = daily_flat
    return _daily_model_rows(tickers, calendar, targets, blocks, columns)


def build_intraday2daily_features(intraday_rv: dict[str, RVSeries],
                                  daily_rv: dict[str, RVSeries],
                                  market_intraday: RVSeries | None,
                                  market_daily: RVSeries | None,
                                  calendar: np.ndarray, horizon: int,
                                  scheme: SchemeSpec, daily_lags: int = 20) -> FeatureMatrix:
    """Next-day RV from the previous day's intraday RVs plus daily lags.

    Columns: the (390/h) intraday log RVs of day t in time-of-day order, then
    ``daily_lags`` daily log RVs of days t-20 ... t-1; the target is day t+1's
    log RV. Augmented appends the market counterpart of both blocks.
    """
    nb = buckets_per_day(horizon)
    intra_cols = [f"intra_{bucket_label(horizon, b).replace(':', '').replace('-', '_')}"
                  for b in range(nb)]
    daily_cols = [f"daily_lag_{j}" for j in range(1, daily_lags + 1)]
    columns = intra_cols + daily_cols
    if scheme.with_market:
        if market_intraday is None or market_daily is None:
            raise ValueError("augmented scheme needs the market RV series")
        columns += [f"mkt_{c}" for c in intra_cols] + [f"mkt_{c}" for c in daily_cols]
        mkt_intra = rv_grid(market_intraday, calendar)[0]
        mkt_daily_flat = rv_grid(market_daily, calendar)[0].reshape(-1)

    n_days = len(calendar)

    def daily_lag_block(flat):
        out = np.full((n_days, daily_lags), np.nan)
        # column j-1 of row t holds day (t-1) - j  ... i.e. lag j counted from
        # day t-1 backwards, so with the intraday block covering day t-1 the
        # total look-back spans 21 days
        for j in range(1, daily_lags + 1):
            if n_days > j + 1:
                out[j + 1:, j - 1] = flat[:n_days - j - 1]
        return out

    tickers = _scheme_tickers(intraday_rv, scheme)
    targets, blocks = {}, {}
    for ticker in tickers:
        igrid = rv_grid(intraday_rv[ticker], calendar)[0]          # (n_days, nb)
        daily_flat = rv_grid(daily_rv[ticker], calendar)[0].reshape(-1)
        intra_lag = np.full((n_days, nb), np.nan)
        intra_lag[1:] = igrid[:-1]
        cols = [intra_lag, daily_lag_block(daily_flat)]
        if scheme.with_market:
            m_lag = np.full((n_days, nb), np.nan)
            m_lag[1:] = mkt_intra[:-1]
            cols += [m_lag, daily_lag_block(mkt_daily_flat)]
        blocks[ticker] = np.hstack(cols)
        targets[ticker] = daily_flat
    return _daily_model_rows(tickers, calendar, targets, blocks, columns)


def normalize(matrix: FeatureMatrix, fit_rows) -> FeatureMatrix:
    """Standardize columns with moments fitted on ``fit_rows`` only.

    Columns whose training std falls below 1e-12 are dropped (and logged to
    stderr); the surviving moments are kept on the matrix for inverse use and
    for reporting coefficients in original units.
    """
    fit_rows = np.asarray(fit_rows)
    sub = matrix.X[fit_rows]
    if sub.shape[0] == 0:
        raise ValueError("fit_rows selects no rows")
    means = sub.mean(axis=0)
    stds = sub.std(axis=0)          # population denominator n

    keep = stds >= DEGENERATE_STD
    if not keep.any():
        raise ValueError("all columns are degenerate on the fit rows")
    dropped = tuple(c for c, k in zip(matrix.columns, keep) if not k)
    if dropped:
        print(f"normalize: dropped degenerate columns {dropped}", file=sys.stderr)

    X = (matrix.X[:, keep] - means[keep]) / stds[keep]
    norm = Normalization(
        columns=tuple(c for c, k in zip(matrix.columns, keep) if k),
        means=means[keep].copy(), stds=stds[keep].copy(), dropped=dropped,
    )
    return FeatureMatrix(
        columns=norm.columns, X=X, y=matrix.y.copy(), tickers=matrix.tickers.copy(),
        times=matrix.times.copy(), target_starts=matrix.target_starts.copy(),
        source_ends=matrix.source_ends.copy(), norm=norm,
    )


def export_matrix(matrix: FeatureMatrix, path) -> None:
    """Delimited dump with a header of column names, for external cross-checks."""
    from .session import format_timestamp

    with open(path, "w") as fh:
        fh.write("ticker,timestamp,y," + ",".join(matrix.columns) + "\n")
        for i in range(matrix.n_rows):
            vals = ",".join(fmt(v) for v in matrix.X[i])
            fh.write(f"{matrix.tickers[i]},{format_timestamp(matrix.times[i])},"
                     f"{fmt(matrix.y[i])},{vals}\n")


def import_matrix(path) -> FeatureMatrix:
    from .session import parse_timestamp

    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:3] != ["ticker", "timestamp", "y"]:
            raise ValueError(f"{path}: unexpected header")
        columns = tuple(header[3:])
        tickers, times, ys, xs = [], [], [], []
        for line in fh:
            fields = line.rstrip("\n").split(",")
            tickers.append(fields[0])
            times.append(parse_timestamp(fields[1]))
            ys.append(float(fields[2]))
            xs.append([float(v) for v in fields[3:]])
    times = np.array(times, dtype="datetime64[m]")
    return FeatureMatrix(
        columns=columns, X=np.array(xs), y=np.array(ys),
        tickers=np.array(tickers), times=times,
        target_starts=times, source_ends=times - ONE_MINUTE,
    )

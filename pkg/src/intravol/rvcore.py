"""Log realized volatility and derived quantities.

Log RV over a bucket is half the log of the summed squared unmasked minute
returns in that bucket. Buckets whose squared-return sum is exactly zero are
floored at 1e-18 (log RV ~ -20.72) and flagged; fully masked buckets are
omitted from the series and tallied in a gap report on stderr.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from .marketdata import MinutePanel
from .session import OPEN_MINUTE, SESSION_MINUTES, bucket_end_times, buckets_per_day

ZERO_SUM_FLOOR = 1e-18
MARKET_TICKER = "_MKT_"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RVSeries:
    """Log realized volatility of one ticker at a fixed horizon."""

    ticker: str
    horizon: int
    times: np.ndarray        # datetime64[m] bucket ends, strictly increasing
    values: np.ndarray       # float64 log RV
    floored: np.ndarray      # bool, True where the zero-sum floor applied

    def __post_init__(self):
        if not (len(self.times) == len(self.values) == len(self.floored)):
            raise ValueError("times/values/floored length mismatch")
        if len(self.times) > 1 and not (self.times[1:] > self.times[:-1]).all():
            raise ValueError("timestamps must be strictly increasing")
        if not np.isfinite(self.values).all():
            raise ValueError("log RV values must be finite")
        for arr in (self.times, self.values, self.floored):
            _freeze(arr)

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class DailyAuxiliaries:
    """Per (ticker, day) semivariances (log scale) and realized quarticity.

    Entries are NaN on fully masked days. The semivariance decomposition
    exp(2*semi_pos) + exp(2*semi_neg) equals exp(2*daily log RV) whenever
    neither side was floored.
    """

    tickers: tuple[str, ...]
    calendar: np.ndarray
    semi_pos: np.ndarray       # (n_tickers, n_days) log scale
    semi_neg: np.ndarray
    quarticity: np.ndarray     # raw scale, >= 0
    pos_floored: np.ndarray    # bool
    neg_floored: np.ndarray

    def __post_init__(self):
        for arr in (self.calendar, self.semi_pos, self.semi_neg,
                    self.quarticity, self.pos_floored, self.neg_floored):
            _freeze(arr)


def realized_volatility(panel: MinutePanel, horizon: int) -> dict[str, RVSeries]:
    """Compute per-ticker log RV series at a horizon dividing the session."""
    nb = buckets_per_day(horizon)
    shape = (panel.n_tickers, panel.n_days, nb, horizon)
    sq = (panel.returns * panel.returns).reshape(shape)
    sums = sq.sum(axis=3)
    counts = panel.observed.reshape(shape).sum(axis=3)

    grid_times = bucket_end_times(panel.calendar, horizon).reshape(-1)
    out: dict[str, RVSeries] = {}
    n_gaps = 0
    for ti, ticker in enumerate(panel.tickers):
        s = sums[ti].reshape(-1)
        c = counts[ti].reshape(-1)
        present = c > 0
        n_gaps += int((~present).sum())
        floored = present & (s <= 0.0)
        vals = 0.5 * np.log(np.maximum(s[present], ZERO_SUM_FLOOR))
        out[ticker] = RVSeries(
            ticker=ticker, horizon=horizon,
            times=grid_times[present], values=vals, floored=floored[present],
        )
    if n_gaps:
        print(f"rv gap report: horizon={horizon} omitted_buckets={n_gaps}", file=sys.stderr)
    return out


def market_rv(rvs: dict[str, RVSeries], scale: str = "log",
              min_tickers: int = 2) -> RVSeries:
    """Equally weighted cross-ticker average RV series.

    ``scale='log'`` averages log RVs (the default; keeps everything in one
    space); ``scale='raw'`` averages raw volatilities exp(log RV) and returns
    the log of that mean. Timestamps covered by fewer than ``min_tickers``
    tickers are omitted. The floored flag marks timestamps where any
    contributing series was floored.
    """
    if scale not in ("log", "raw"):
        raise ValueError("scale must be 'log' or 'raw'")
    series = list(rvs.values())
    if not series:
        raise ValueError("empty RV panel")
    horizon = series[0].horizon
    if any(s.horizon != horizon for s in series):
        raise ValueError("all series must share one horizon")

    all_times = np.concatenate([s.times for s in series])
    all_vals = np.concatenate([s.values for s in series])
    all_floor = np.concatenate([s.floored for s in series])
    times, inverse = np.unique(all_times, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(times))
    if scale == "log":
        sums = np.bincount(inverse, weights=all_vals, minlength=len(times))
        means = sums / counts
    else:
        sums = np.bincount(inverse, weights=np.exp(all_vals), minlength=len(times))
        means = np.log(sums / counts)
    floored = np.bincount(inverse, weights=all_floor.astype(float), minlength=len(times)) > 0

    keep = counts >= min_tickers
    return RVSeries(ticker=MARKET_TICKER, horizon=horizon,
                    times=times[keep], values=means[keep], floored=floored[keep])


def daily_auxiliaries(panel: MinutePanel) -> DailyAuxiliaries:
    """Signed semivariances and realized quarticity per (ticker, day).

    semi_pos = 0.5*log(sum of squared positive returns) and analogously for
    semi_neg, both with the zero-sum floor; quarticity = (M/3) * sum(r^4)
    with M the unmasked minute count of the day.
    """
    r = panel.returns
    obs = panel.observed
    pos_sq = np.where(obs & (r > 0), r * r, 0.0).sum(axis=2)
    neg_sq = np.where(obs & (r < 0), r * r, 0.0).sum(axis=2)
    quart = np.where(obs, r ** 4, 0.0).sum(axis=2)
    m = obs.sum(axis=2).astype(float)

    day_ok = m > 0
    semi_pos = np.where(day_ok, 0.5 * np.log(np.maximum(pos_sq, ZERO_SUM_FLOOR)), np.nan)
    semi_neg = np.where(day_ok, 0.5 * np.log(np.maximum(neg_sq, ZERO_SUM_FLOOR)), np.nan)
    rq = np.where(day_ok, m / 3.0 * quart, np.nan)
    return DailyAuxiliaries(
        tickers=panel.tickers, calendar=np.array(panel.calendar),
        semi_pos=semi_pos, semi_neg=semi_neg, quarticity=rq,
        pos_floored=day_ok & (pos_sq <= 0.0), neg_floored=day_ok & (neg_sq <= 0.0),
    )


class InsufficientHistory(ValueError):
    """Raised when an aggregate needs more prior observations than exist."""


def har_aggregates(daily_rv: RVSeries, day) -> tuple[float, float, float]:
    """Daily, weekly (5-day) and monthly (21-day) lagged log-RV aggregates.

    ``day`` is a date (or bucket-end timestamp) present in the series; the
    aggregates average the 1, 5, and 21 observations strictly before it.
    """
    if daily_rv.horizon != SESSION_MINUTES:
        raise ValueError("har_aggregates needs a daily (h=390) series")
    target = np.datetime64(day, "D")
    days = daily_rv.times.astype("datetime64[D]")
    pos = int(np.searchsorted(days, target))
    if pos >= len(days) or days[pos] != target:
        raise KeyError(f"day {target} not present in series")
    if pos < 21:
        raise InsufficientHistory(f"need 21 prior trading days, have {pos}")
    v = daily_rv.values
    return float(v[pos - 1]), float(v[pos - 5:pos].mean()), float(v[pos - 21:pos].mean())


def diurnal_average(intraday_rv: RVSeries, bucket: int, day, lookback: int = 21) -> float:
    """Mean log RV of time-of-day ``bucket`` over the ``lookback`` prior days."""
    nb = buckets_per_day(intraday_rv.horizon)
    if not 0 <= bucket < nb:
        raise ValueError(f"bucket {bucket} out of range (0..{nb - 1})")
    target = np.datetime64(day, "D")
    days = intraday_rv.times.astype("datetime64[D]")
    minute_in_day = (intraday_rv.times - days).astype("timedelta64[m]").astype(int)
    bucket_idx = (minute_in_day - OPEN_MINUTE) // intraday_rv.horizon - 1

    # calendar gaps are fine; the mean uses the most recent `lookback`
    # observations of this bucket before the target day
    sel = (bucket_idx == bucket) & (days < target)
    if sel.sum() < lookback:
        raise InsufficientHistory(
            f"need {lookback} prior days with bucket {bucket}, have {int(sel.sum())}"
        )
    return float(intraday_rv.values[sel][-lookback:].mean())


def rv_grid(series: RVSeries, calendar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Place a series on the full (n_days, buckets) grid.

    Returns (values, floored) with NaN values where the series has gaps.
    """
    nb = buckets_per_day(series.horizon)
    grid_times = bucket_end_times(calendar, series.horizon).reshape(-1)
    values = np.full(grid_times.shape, np.nan)
    floored = np.zeros(grid_times.shape, dtype=bool)
    pos = np.searchsorted(grid_times, series.times)
    if (pos >= len(grid_times)).any() or (grid_times[pos] != series.times).any():
        raise ValueError("series timestamps do not lie on the calendar grid")
    values[pos] = series.values
    floored[pos] = series.floored
    return values.reshape(len(calendar), nb), floored.reshape(len(calendar), nb)


def export_rv(series_list, path) -> None:
    """Write RV series as delimited text: ticker,timestamp,h,log_rv,floored_flag."""
    from .session import fmt, format_timestamp

    with open(path, "w") as fh:
        fh.write("ticker,timestamp,h,log_rv,floored_flag\n")
        for s in series_list:
            for t, v, fl in zip(s.times, s.values, s.floored):
                fh.write(f"{s.ticker},{format_timestamp(t)},{s.horizon},{fmt(v)},{int(fl)}\n")


def import_rv(path) -> dict[str, RVSeries]:
    """Read the delimited RV format back into per-ticker series."""
    from .session import parse_timestamp

    rows: dict[str, list] = {}
    horizons = set()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "ticker,timestamp,h,log_rv,floored_flag":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            ticker, ts, h, v, fl = line.rstrip("\n").split(",")
            horizons.add(int(h))
            rows.setdefault(ticker, []).append((parse_timestamp(ts), float(v), fl == "1"))
    if len(horizons) != 1:
        raise ValueError(f"{path}: expected a single horizon, found {sorted(horizons)}")
    h = horizons.pop()
    out = {}
    for ticker, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        out[ticker] = RVSeries(
            ticker=ticker, horizon=h,
            times=np.array([e[0] for e in entries], dtype="datetime64[m]"),
            values=np.array([e[1] for e in entries]),
            floored=np.array([e[2] for e in entries], dtype=bool),
        )
    return out
